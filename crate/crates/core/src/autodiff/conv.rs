//! 2-D cross-correlation kernels (forward and backward) on raw NCHW buffers.
//!
//! Each sample is lowered to a column matrix (`im2col`) so the inner loops run
//! over contiguous memory. Work is split across samples only; every output
//! element and every per-sample partial gradient is produced by exactly one
//! task, and kernel/bias gradients are summed in sample order, so results do
//! not depend on the number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Validates an input shape `[N, Cin, H, W]` against a kernel shape `[Cout, Cin, kH, kW]`.
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape(format!("conv2d input must be [N,C,H,W], got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d kernel must be [Cout,Cin,kH,kW], got {kernel:?}"
            )));
        }
        if input[1] != kernel[1] {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {} channels, kernel expects {}",
                input[1], kernel[1]
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let out_h = out_extent(input[2], kernel[2], stride, padding, "height")?;
        let out_w = out_extent(input[3], kernel[3], stride, padding, "width")?;
        Ok(ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            in_h: input[2],
            in_w: input[3],
            out_channels: kernel[0],
            kernel_h: kernel[2],
            kernel_w: kernel[3],
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_sample_len(&self) -> usize {
        self.out_channels * self.positions()
    }
}

fn out_extent(size: usize, kernel: usize, stride: usize, padding: usize, axis: &str) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(Error::config(format!(
            "conv2d kernel {axis} {kernel} exceeds padded input {axis} {padded}"
        )));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(Error::config(format!(
            "conv2d output {axis} ({size} + 2*{padding} - {kernel})/{stride} + 1 is not an integer"
        )));
    }
    Ok(span / stride + 1)
}

/// Lowers one sample into a `[Cin*kH*kW, outH*outW]` column matrix.
fn im2col(g: &ConvGeometry, sample: &[f64], cols: &mut [f64]) {
    let positions = g.positions();
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &sample[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *slot = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a column matrix back onto one sample (the adjoint of `im2col`).
fn col2im(g: &ConvGeometry, cols: &[f64], sample: &mut [f64]) {
    let positions = g.positions();
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut sample[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let positions = g.positions();
    let patch = g.patch_len();
    let mut out = vec![0.0; g.batch * g.out_sample_len()];
    out.par_chunks_mut(g.out_sample_len())
        .zip(input.par_chunks(g.in_sample_len()))
        .for_each_init(
            || vec![0.0; patch * positions],
            |cols, (out_n, in_n)| {
                im2col(g, in_n, cols);
                for (co, out_row) in out_n.chunks_mut(positions).enumerate() {
                    out_row.fill(bias[co]);
                    let weights = &kernel[co * patch..(co + 1) * patch];
                    for (k, &w) in weights.iter().enumerate() {
                        let col = &cols[k * positions..(k + 1) * positions];
                        for (o, &x) in out_row.iter_mut().zip(col) {
                            *o += w * x;
                        }
                    }
                }
            },
        );
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    upstream: &[f64],
    want: [bool; 3],
) -> ConvGrads {
    let [want_input, want_kernel, want_bias] = want;
    let positions = g.positions();
    let patch = g.patch_len();

    let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>)> = upstream
        .par_chunks(g.out_sample_len())
        .zip(input.par_chunks(g.in_sample_len()))
        .map(|(up_n, in_n)| {
            let mut cols = vec![0.0; patch * positions];
            let dinput = want_input.then(|| {
                for (co, up_row) in up_n.chunks(positions).enumerate() {
                    let weights = &kernel[co * patch..(co + 1) * patch];
                    for (k, &w) in weights.iter().enumerate() {
                        let col = &mut cols[k * positions..(k + 1) * positions];
                        for (c, &u) in col.iter_mut().zip(up_row) {
                            *c += w * u;
                        }
                    }
                }
                let mut dx = vec![0.0; g.in_sample_len()];
                col2im(g, &cols, &mut dx);
                dx
            });
            let dkernel = want_kernel.then(|| {
                im2col(g, in_n, &mut cols);
                let mut dk = vec![0.0; g.out_channels * patch];
                for (co, up_row) in up_n.chunks(positions).enumerate() {
                    for k in 0..patch {
                        let col = &cols[k * positions..(k + 1) * positions];
                        dk[co * patch + k] = up_row.iter().zip(col).map(|(u, x)| u * x).sum();
                    }
                }
                dk
            });
            let dbias = want_bias.then(|| {
                up_n.chunks(positions)
                    .map(|row| row.iter().sum::<f64>())
                    .collect::<Vec<_>>()
            });
            (dinput, dkernel, dbias)
        })
        .collect();

    let mut input_grad = want_input.then(|| Vec::with_capacity(input.len()));
    let mut kernel_grad = want_kernel.then(|| vec![0.0; kernel.len()]);
    let mut bias_grad = want_bias.then(|| vec![0.0; g.out_channels]);
    for (dx, dk, db) in per_sample {
        if let (Some(acc), Some(dx)) = (input_grad.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
        if let (Some(acc), Some(dk)) = (kernel_grad.as_mut(), dk) {
            acc.iter_mut().zip(&dk).for_each(|(a, d)| *a += d);
        }
        if let (Some(acc), Some(db)) = (bias_grad.as_mut(), db) {
            acc.iter_mut().zip(&db).for_each(|(a, d)| *a += d);
        }
    }
    ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias: bias_grad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_must_be_integral() {
        assert!(matches!(
            ConvGeometry::new(&[1, 1, 4, 4], &[1, 1, 3, 3], 2, 0),
            Err(Error::Config(_))
        ));
        let g = ConvGeometry::new(&[1, 1, 5, 5], &[1, 1, 3, 3], 2, 0).unwrap();
        assert_eq!(g.output_shape(), [1, 1, 2, 2]);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let err = ConvGeometry::new(&[1, 3, 4, 4], &[2, 2, 3, 3], 1, 1).unwrap_err();
        assert!(matches!(err, Error::Shape(ref m) if m.contains("3 channels")));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for arbitrary x, c.
        let g = ConvGeometry::new(&[1, 2, 5, 4], &[1, 2, 3, 2], 1, 1).unwrap();
        let x: Vec<f64> = (0..g.in_sample_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.patch_len() * g.positions())
            .map(|i| (i as f64 * 0.91).cos())
            .collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&g, &x, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&g, &c, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
