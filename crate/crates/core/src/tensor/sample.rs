//! Resampling ops: bilinear warping through a fixed grid, average pooling and
//! bilinear upsampling.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// Pixel-unit sampling locations for `planes` output slices of
/// `height x width` samples each, plus a validity mask. Masked samples read
/// as zero.
#[derive(Debug, Clone, Copy)]
pub struct SampleGrid<'a> {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    /// Interleaved `(x, y)` pairs, `planes * height * width` of them.
    pub coords: &'a [f64],
    pub mask: &'a [bool],
}

/// Up to four (flat index, weight) taps per output sample. Unused taps carry
/// weight zero.
type Taps = [(usize, f64); 4];

fn bilinear_taps(x: f64, y: f64, width: usize, height: usize) -> Taps {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut taps = [(0, 0.0); 4];
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    for (slot, (cx, cy, w)) in taps.iter_mut().zip(corners) {
        let inside = cx >= 0.0 && cy >= 0.0 && cx < width as f64 && cy < height as f64;
        if inside && w != 0.0 {
            *slot = (cy as usize * width + cx as usize, w);
        }
    }
    taps
}

/// Bilinearly sample `feature` (`[N, C, H, W]`) at every grid location,
/// producing `[N, C, planes, grid.height, grid.width]`. Gradients flow to the
/// feature values only.
pub fn grid_sample_bilinear(feature: &Tensor, grid: &SampleGrid<'_>) -> Result<Tensor> {
    let fs = feature.shape();
    if fs.len() != 4 {
        return Err(Error::shape("grid_sample", format!("feature must be 4-D, got {fs:?}")));
    }
    let samples = grid.planes * grid.height * grid.width;
    if grid.coords.len() != 2 * samples || grid.mask.len() != samples {
        return Err(Error::shape(
            "grid_sample",
            format!(
                "grid of {samples} samples has {} coords and {} mask entries",
                grid.coords.len(),
                grid.mask.len()
            ),
        ));
    }
    let (n, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    let taps: Vec<Taps> = (0..samples)
        .map(|i| {
            let (x, y) = (grid.coords[2 * i], grid.coords[2 * i + 1]);
            if grid.mask[i] && x.is_finite() && y.is_finite() {
                bilinear_taps(x, y, w, h)
            } else {
                [(0, 0.0); 4]
            }
        })
        .collect();

    let plane = h * w;
    let src = feature.values();
    let mut out = vec![0.0; n * c * samples];
    out.par_chunks_mut(samples).enumerate().for_each(|(nc, dst)| {
        let f = &src[nc * plane..][..plane];
        for (d, t) in dst.iter_mut().zip(&taps) {
            *d = t.iter().map(|&(i, wt)| wt * f[i]).sum();
        }
    });

    let shape = vec![n, c, grid.planes, grid.height, grid.width];
    Tensor::from_op("grid_sample", shape, out, vec![feature.clone()], move |g| {
        let mut grad = vec![0.0; n * c * plane];
        grad.par_chunks_mut(plane).enumerate().for_each(|(nc, dst)| {
            let go = &g[nc * samples..][..samples];
            for (gv, t) in go.iter().zip(&taps) {
                for &(i, wt) in t {
                    dst[i] += wt * gv;
                }
            }
        });
        vec![Some(grad)]
    })
}

/// Non-overlapping `window x window` average pooling on `[N, C, H, W]`. When
/// the window does not divide the input, the last row/column of windows is
/// truncated and averages only the cells it covers.
pub fn avg_pool2d(input: &Tensor, window: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::shape("avg_pool2d", format!("input must be 4-D, got {s:?}")));
    }
    if window == 0 {
        return Err(Error::invalid("pooling window must be positive"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h.div_ceil(window), w.div_ceil(window));
    let x = input.values();
    let mut out = vec![0.0; n * c * oh * ow];
    for nc in 0..n * c {
        let src = &x[nc * h * w..][..h * w];
        for py in 0..oh {
            for px in 0..ow {
                let (y0, y1) = (py * window, ((py + 1) * window).min(h));
                let (x0, x1) = (px * window, ((px + 1) * window).min(w));
                let mut acc = 0.0;
                for yy in y0..y1 {
                    acc += src[yy * w + x0..yy * w + x1].iter().sum::<f64>();
                }
                out[(nc * oh + py) * ow + px] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    Tensor::from_op("avg_pool2d", vec![n, c, oh, ow], out, vec![input.clone()], move |g| {
        let mut grad = vec![0.0; n * c * h * w];
        for nc in 0..n * c {
            for py in 0..oh {
                for px in 0..ow {
                    let (y0, y1) = (py * window, ((py + 1) * window).min(h));
                    let (x0, x1) = (px * window, ((px + 1) * window).min(w));
                    let share = g[(nc * oh + py) * ow + px] / ((y1 - y0) * (x1 - x0)) as f64;
                    for yy in y0..y1 {
                        for v in &mut grad[nc * h * w + yy * w + x0..nc * h * w + yy * w + x1] {
                            *v = share;
                        }
                    }
                }
            }
        }
        vec![Some(grad)]
    })
}

/// Source taps for resizing an axis of length `from` to length `to` with
/// pixel centers aligned and edge clamping.
fn linear_taps(from: usize, to: usize) -> Vec<(usize, usize, f64)> {
    let ratio = from as f64 / to as f64;
    (0..to)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (from - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(from - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `[N, C, H, W]` to `[N, C, out_h, out_w]`.
pub fn upsample_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::shape("upsample_bilinear", format!("input must be 4-D, got {s:?}")));
    }
    if out_h == 0 || out_w == 0 || s[2] == 0 || s[3] == 0 {
        return Err(Error::invalid("upsample sizes must be non-zero"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let x = input.values();
    let mut out = vec![0.0; n * c * out_h * out_w];
    out.par_chunks_mut(out_h * out_w).enumerate().for_each(|(nc, dst)| {
        let src = &x[nc * h * w..][..h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    });
    Tensor::from_op(
        "upsample_bilinear",
        vec![n, c, out_h, out_w],
        out,
        vec![input.clone()],
        move |g| {
            let mut grad = vec![0.0; n * c * h * w];
            grad.par_chunks_mut(h * w).enumerate().for_each(|(nc, dst)| {
                let go = &g[nc * out_h * out_w..][..out_h * out_w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = go[oy * out_w + ox];
                        dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                        dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                        dst[y1 * w + x1] += gv * fy * fx;
                    }
                }
            });
            vec![Some(grad)]
        },
    )
}
