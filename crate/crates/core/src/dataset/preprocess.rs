use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNEL_MEAN: f64 = 0.5;
pub const CHANNEL_STD: f64 = 0.5;

/// Bilinear resize of an interleaved RGB byte image to `target` (height, width),
/// then channel-first layout with `(v / 255 - 0.5) / 0.5` normalization.
///
/// Sampling uses pixel centers: destination pixel `d` reads source coordinate
/// `(d + 0.5) * src / dst - 0.5`, clamped to the image.
pub fn preprocess(pixels: &[u8], height: usize, width: usize, target: (usize, usize)) -> Result<Tensor> {
    let (th, tw) = target;
    if height == 0 || width == 0 || th == 0 || tw == 0 {
        return Err(Error::shape(format!(
            "cannot resize a {height}x{width} image to {th}x{tw}"
        )));
    }
    if pixels.len() != height * width * 3 {
        return Err(Error::shape(format!(
            "{} bytes do not form a {height}x{width} RGB image",
            pixels.len()
        )));
    }

    let ys = sample_axis(height, th);
    let xs = sample_axis(width, tw);
    let mut out = vec![0.0; 3 * th * tw];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let at = |y: usize, x: usize| pixels[(y * width + x) * 3 + c] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out[(c * th + oy) * tw + ox] = (v / 255.0 - CHANNEL_MEAN) / CHANNEL_STD;
            }
        }
    }
    Tensor::new(vec![3, th, tw], out)
}

/// For each destination index: (lower source index, upper source index, weight of upper).
fn sample_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}
