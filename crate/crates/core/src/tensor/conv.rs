//! Cross-correlation over 2D and 3D inputs.
//!
//! Both entry points run through one volumetric kernel; a 2D convolution is a
//! 3D one with unit depth. Inputs are unfolded into patch matrices and
//! multiplied with a blocked GEMM. Batch elements are split across tasks with
//! one owner per output, and weight gradients are summed over the batch in a
//! fixed order, so results do not depend on the thread count.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }
}

impl Conv2dOptions {
    /// Stride-1 convolution padded so the output keeps the input size.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dOptions {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv3dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    stride: [usize; 3],
    dilation: [usize; 3],
    padding: [usize; 3],
}

impl Geometry {
    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output index range along `axis` whose input sample for kernel tap `k`
    /// lies inside the input, and the input offset for output index 0.
    #[inline]
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize, isize) {
        let s = self.stride[axis] as isize;
        let off = (k * self.dilation[axis]) as isize - self.padding[axis] as isize;
        let n_in = self.input[axis] as isize;
        let n_out = self.output[axis] as isize;
        // need 0 <= o*s + off < n_in
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if n_in - 1 - off < 0 {
            0
        } else {
            ((n_in - 1 - off) / s + 1).min(n_out)
        };
        (lo as usize, (hi.max(lo)) as usize, off)
    }
}

fn output_extent(n: usize, k: usize, stride: usize, dilation: usize, pad: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = n + 2 * pad;
    (padded >= span).then(|| (padded - span) / stride + 1)
}

/// Output values unfolded per GEMM call; keeps the patch buffer cache-sized.
const CHUNK_VALUES: usize = 1024;

/// Input offset along `axis` for output index `o` and kernel tap `k`, if it
/// lies inside the input.
#[inline]
fn source(geo: &Geometry, axis: usize, o: usize, k: usize) -> Option<usize> {
    let i = (o * geo.stride[axis] + k * geo.dilation[axis]) as isize - geo.padding[axis] as isize;
    (i >= 0 && (i as usize) < geo.input[axis]).then_some(i as usize)
}

/// Output rows (flattened depth and height) covered by one chunk.
fn rows_per_chunk(geo: &Geometry) -> usize {
    (CHUNK_VALUES / geo.output[2]).max(1)
}

/// Visit every in-bounds (column row, chunk column, input offset) triple of
/// the unfolded input over output rows `rows`. Column rows are taps.
fn for_each_tap(geo: &Geometry, rows: std::ops::Range<usize>, mut f: impl FnMut(usize, usize, usize)) {
    let [_, ih, iw] = geo.input;
    let [_, oh, ow] = geo.output;
    let [_, kh, kw] = geo.kernel;
    let sx = geo.stride[2];
    for kz in 0..geo.kernel[0] {
        for ky in 0..kh {
            for kx in 0..kw {
                let tap = (kz * kh + ky) * kw + kx;
                let (x_lo, x_hi, x_off) = geo.valid_range(2, kx);
                for (local, r) in rows.clone().enumerate() {
                    let (Some(iz), Some(iy)) = (source(geo, 0, r / oh, kz), source(geo, 1, r % oh, ky)) else {
                        continue;
                    };
                    let i_row = (iz * ih + iy) * iw;
                    for ox in x_lo..x_hi {
                        let ix = ((ox * sx) as isize + x_off) as usize;
                        f(tap, local * ow + ox, i_row + ix);
                    }
                }
            }
        }
    }
}

/// Fill `cols` (`[in_ch * taps, rows * ow]`) with the patches of output
/// rows `rows` of one batch element.
fn im2col(geo: &Geometry, src: &[f64], rows: std::ops::Range<usize>, cols: &mut [f64]) {
    let (in_plane, taps) = (geo.in_plane(), geo.taps());
    let width = rows.len() * geo.output[2];
    cols.fill(0.0);
    for c in 0..geo.in_ch {
        let s = &src[c * in_plane..][..in_plane];
        let block = &mut cols[c * taps * width..][..taps * width];
        for_each_tap(geo, rows.clone(), |tap, o, i| block[tap * width + o] = s[i]);
    }
}

/// Adjoint of `im2col`: scatter-add a patch matrix back onto the input.
fn col2im(geo: &Geometry, cols: &[f64], rows: std::ops::Range<usize>, dst: &mut [f64]) {
    let (in_plane, taps) = (geo.in_plane(), geo.taps());
    let width = rows.len() * geo.output[2];
    for c in 0..geo.in_ch {
        let d = &mut dst[c * in_plane..][..in_plane];
        let block = &cols[c * taps * width..][..taps * width];
        for_each_tap(geo, rows.clone(), |tap, o, i| d[i] += block[tap * width + o]);
    }
}

/// Call `f(rows, first output offset, patch width)` for each chunk of output rows.
fn chunks(geo: &Geometry, mut f: impl FnMut(std::ops::Range<usize>, usize, usize)) {
    let total = geo.output[0] * geo.output[1];
    let step = rows_per_chunk(geo);
    for r0 in (0..total).step_by(step) {
        let r1 = (r0 + step).min(total);
        f(r0..r1, r0 * geo.output[2], (r1 - r0) * geo.output[2]);
    }
}

/// Matrix operand: data plus (row, column) strides.
struct Mat<'a>(&'a [f64], usize, usize);

/// `c = a (m x k) * b (k x n) + beta * c`; `c` has row stride `rsc`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, beta: f64, c: &mut [f64], rsc: usize) {
    let reach = |len: usize, rows: usize, cols: usize, rs: usize, cs: usize| {
        rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < len
    };
    assert!(
        reach(a.0.len(), m, k, a.1, a.2) && reach(b.0.len(), k, n, b.1, b.2) && reach(c.len(), m, n, rsc, 1)
    );
    // SAFETY: the bounds checks above keep every strided access inside the
    // slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn patch_buffer(geo: &Geometry) -> Vec<f64> {
    vec![0.0; geo.in_ch * geo.taps() * rows_per_chunk(geo) * geo.output[2]]
}

fn forward(geo: &Geometry, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (in_plane, out_plane) = (geo.in_plane(), geo.out_plane());
    let k = geo.in_ch * geo.taps();
    let mut out = vec![0.0; geo.batch * geo.out_ch * out_plane];
    out.par_chunks_mut(geo.out_ch * out_plane).enumerate().for_each(|(n, dst)| {
        let src = &input[n * geo.in_ch * in_plane..][..geo.in_ch * in_plane];
        if let Some(b) = bias {
            for (o, plane) in dst.chunks_mut(out_plane).enumerate() {
                plane.fill(b[o]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let mut buf = patch_buffer(geo);
        chunks(geo, |rows, p0, width| {
            let cols = &mut buf[..k * width];
            im2col(geo, src, rows, cols);
            gemm(geo.out_ch, k, width, Mat(weight, k, 1), Mat(cols, width, 1), beta, &mut dst[p0..], out_plane);
        });
    });
    out
}

fn input_grad(geo: &Geometry, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    let (in_plane, out_plane) = (geo.in_plane(), geo.out_plane());
    let k = geo.in_ch * geo.taps();
    let mut grad = vec![0.0; geo.batch * geo.in_ch * in_plane];
    grad.par_chunks_mut(geo.in_ch * in_plane).enumerate().for_each(|(n, dst)| {
        let g = &grad_out[n * geo.out_ch * out_plane..][..geo.out_ch * out_plane];
        let mut buf = patch_buffer(geo);
        chunks(geo, |rows, p0, width| {
            let cols = &mut buf[..k * width];
            // weight^T (k x out_ch) * grad_out block (out_ch x width)
            gemm(k, geo.out_ch, width, Mat(weight, 1, k), Mat(&g[p0..], out_plane, 1), 0.0, cols, width);
            col2im(geo, cols, rows, dst);
        });
    });
    grad
}

fn weight_grad(geo: &Geometry, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let (in_plane, out_plane) = (geo.in_plane(), geo.out_plane());
    let k = geo.in_ch * geo.taps();
    let mut grad = vec![0.0; geo.out_ch * k];
    let mut buf = patch_buffer(geo);
    for n in 0..geo.batch {
        let src = &input[n * geo.in_ch * in_plane..][..geo.in_ch * in_plane];
        let g = &grad_out[n * geo.out_ch * out_plane..][..geo.out_ch * out_plane];
        chunks(geo, |rows, p0, width| {
            let cols = &mut buf[..k * width];
            im2col(geo, src, rows, cols);
            // grad_out block (out_ch x width) * cols^T (width x k)
            gemm(geo.out_ch, width, k, Mat(&g[p0..], out_plane, 1), Mat(cols, 1, width), 1.0, &mut grad, k);
        });
    }
    grad
}

fn bias_grad(geo: &Geometry, grad_out: &[f64]) -> Vec<f64> {
    let out_plane = geo.out_plane();
    (0..geo.out_ch)
        .map(|o| {
            (0..geo.batch)
                .map(|n| {
                    grad_out[(n * geo.out_ch + o) * out_plane..][..out_plane]
                        .iter()
                        .sum::<f64>()
                })
                .sum()
        })
        .collect()
}

fn conv_generic(
    op: &'static str,
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geo: Geometry,
    out_shape: Vec<usize>,
) -> Result<Tensor> {
    let data = forward(&geo, input.values(), weight.values(), bias.map(|b| b.values()));
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let (x, w) = (input.clone(), weight.clone());
    let has_bias = bias.is_some();
    let needs = parents.iter().map(|p| p.requires_grad()).collect::<Vec<_>>();
    Tensor::from_op(op, out_shape, data, parents, move |g| {
        let mut grads = vec![
            needs[0].then(|| input_grad(&geo, g, w.values())),
            needs[1].then(|| weight_grad(&geo, g, x.values())),
        ];
        if has_bias {
            grads.push(needs[2].then(|| bias_grad(&geo, g)));
        }
        grads
    })
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, out_ch: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [out_ch] {
            return Err(Error::shape(
                op,
                format!("bias shape {:?}, expected [{out_ch}]", b.shape()),
            ));
        }
    }
    Ok(())
}

/// 2D cross-correlation. `input` is `[N, C, H, W]`, `weight` is
/// `[O, C, kh, kw]` with odd kernel sizes, `bias` is `[O]`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    opts: Conv2dOptions,
) -> Result<Tensor> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.len() != 4 || ws.len() != 4 || is[1] != ws[1] {
        return Err(Error::shape(
            "conv2d",
            format!("input {is:?} incompatible with weight {ws:?}"),
        ));
    }
    if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel {ws:?} must be odd-sized")));
    }
    if opts.stride == 0 || opts.dilation == 0 {
        return Err(Error::invalid("conv2d stride and dilation must be positive"));
    }
    check_bias("conv2d", bias, ws[0])?;
    let oh = output_extent(is[2], ws[2], opts.stride, opts.dilation, opts.padding);
    let ow = output_extent(is[3], ws[3], opts.stride, opts.dilation, opts.padding);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::shape("conv2d", format!("kernel larger than padded input {is:?}")));
    };
    let geo = Geometry {
        batch: is[0],
        in_ch: is[1],
        out_ch: ws[0],
        input: [1, is[2], is[3]],
        kernel: [1, ws[2], ws[3]],
        output: [1, oh, ow],
        stride: [1, opts.stride, opts.stride],
        dilation: [1, opts.dilation, opts.dilation],
        padding: [0, opts.padding, opts.padding],
    };
    conv_generic("conv2d", input, weight, bias, geo, vec![is[0], ws[0], oh, ow])
}

/// 3D cross-correlation. `input` is `[N, C, D, H, W]`, `weight` is
/// `[O, C, kd, kh, kw]`, `bias` is `[O]`.
pub fn conv3d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    opts: Conv3dOptions,
) -> Result<Tensor> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.len() != 5 || ws.len() != 5 || is[1] != ws[1] {
        return Err(Error::shape(
            "conv3d",
            format!("input {is:?} incompatible with weight {ws:?}"),
        ));
    }
    if ws[2..].iter().any(|k| k % 2 == 0) {
        return Err(Error::shape("conv3d", format!("kernel {ws:?} must be odd-sized")));
    }
    if opts.stride == 0 {
        return Err(Error::invalid("conv3d stride must be positive"));
    }
    check_bias("conv3d", bias, ws[0])?;
    let mut output = [0; 3];
    for a in 0..3 {
        output[a] = output_extent(is[2 + a], ws[2 + a], opts.stride, 1, opts.padding)
            .ok_or_else(|| Error::shape("conv3d", format!("kernel larger than padded input {is:?}")))?;
    }
    let geo = Geometry {
        batch: is[0],
        in_ch: is[1],
        out_ch: ws[0],
        input: [is[2], is[3], is[4]],
        kernel: [ws[2], ws[3], ws[4]],
        output,
        stride: [opts.stride; 3],
        dilation: [1; 3],
        padding: [opts.padding; 3],
    };
    let shape = vec![is[0], ws[0], output[0], output[1], output[2]];
    conv_generic("conv3d", input, weight, bias, geo, shape)
}
