//! Per-point snow probabilities from a trained network.

use super::net::{Network, INPUT_CHANNELS};
use super::tape::sigmoid;
use super::tensor::Tensor;
use crate::error::Result;
use crate::geom::PointCloud;
use crate::rangeproj::{normalize_channels, project, unproject_mask, ChannelStats, OverflowPolicy, RangeImage};

/// Per-pixel probabilities for an already projected scan.
pub fn infer_image(net: &Network, stats: &ChannelStats, img: &RangeImage) -> Result<Vec<f64>> {
    let input = normalize_channels(img, stats).data;
    let x = Tensor::from_vec(&[1, INPUT_CHANNELS, img.height, img.width], input)?;
    let logits = net.predict_logits(&x)?;
    Ok(logits.data().iter().map(|&z| sigmoid(z)).collect())
}

/// Project at the sensor's native resolution, normalize, run the network in
/// eval mode, and map pixel probabilities back onto the points.
pub fn infer(net: &Network, stats: &ChannelStats, cloud: &PointCloud, policy: OverflowPolicy) -> Result<Vec<f64>> {
    let (img, _) = project(cloud, cloud.meta.channels, cloud.meta.horiz_steps)?;
    let probs = infer_image(net, stats, &img)?;
    unproject_mask(&img, &probs, policy)
}
