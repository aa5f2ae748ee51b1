//! PNG renderings of flows and prediction overlays.

use std::path::Path;

use crate::data::save_rgb_bytes;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// HSV → RGB for `h ∈ [0, 360)`, `s, v ∈ [0, 1]`.
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Colour-codes a `2×H×W` flow (dx, dy): hue is the direction, saturation the
/// magnitude relative to the largest one, value is 1. Zero flow is white.
pub fn flow_to_rgb<T: Float>(flow: &Tensor<T>) -> Result<(Vec<u8>, usize, usize)> {
    let s = flow.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::shape(format!("flow must be 2×H×W, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let p = h * w;
    let d = flow.data();
    let mag: Vec<f64> = (0..p).map(|q| d[q].as_f64().hypot(d[p + q].as_f64())).collect();
    let max = mag.iter().copied().fold(0.0, f64::max);
    let mut raw = Vec::with_capacity(3 * p);
    for q in 0..p {
        let angle = d[p + q].as_f64().atan2(d[q].as_f64()).to_degrees().rem_euclid(360.0);
        let sat = if max > 0.0 { mag[q] / max } else { 0.0 };
        raw.extend(hsv_to_rgb(angle, sat, 1.0));
    }
    Ok((raw, h, w))
}

pub fn save_flow_png<T: Float>(path: &Path, flow: &Tensor<T>) -> Result<()> {
    let (raw, h, w) = flow_to_rgb(flow)?;
    save_rgb_bytes(path, w, h, raw)
}

pub const TP_COLOR: [u8; 3] = [255, 255, 255];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];

/// Per-pixel outcome colours: TP white, TN black, FP red, FN blue.
pub fn overlay_rgb(pred: &[u8], truth: &[u8]) -> Result<Vec<u8>> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("{} predicted vs {} reference pixels", pred.len(), truth.len())));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .flat_map(|(&p, &t)| match (p != 0, t != 0) {
            (true, true) => TP_COLOR,
            (false, false) => TN_COLOR,
            (true, false) => FP_COLOR,
            (false, true) => FN_COLOR,
        })
        .collect())
}

pub fn save_overlay(path: &Path, pred: &[u8], truth: &[u8], height: usize, width: usize) -> Result<()> {
    save_rgb_bytes(path, width, height, overlay_rgb(pred, truth)?)
}
