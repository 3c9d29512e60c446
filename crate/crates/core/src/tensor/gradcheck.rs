use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    avg_pool2d, conv2d, conv3d, grid_sample_bilinear, upsample_bilinear, Conv2dOptions, Conv3dOptions, SampleGrid,
    Tensor,
};
use crate::error::Result;

/// Denominator floor for relative errors, so near-zero gradients are compared
/// in absolute terms.
const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Element index with the largest error.
    pub worst_index: usize,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Central difference of `f` with respect to element `index` of `values`.
pub fn central_difference<F>(values: &[f64], index: usize, h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = values.to_vec();
    probe[index] = values[index] + h;
    let plus = f(&probe)?;
    probe[index] = values[index] - h;
    let minus = f(&probe)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Compare the reverse-mode gradient of scalar `f` at `x` against central
/// differences for every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_subset(f, x, h, &all)
}

/// Like [`grad_check`] but only for the listed element indices.
pub fn grad_check_subset<F>(f: F, x: &Tensor, h: f64, indices: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = Tensor::param(x.shape(), x.values().to_vec())?;
    f(&leaf)?.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let shape = x.shape().to_vec();
    let eval = |v: &[f64]| -> Result<f64> { f(&Tensor::new(&shape, v.to_vec())?)?.item() };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in indices {
        let numeric = central_difference(x.values(), i, h, eval)?;
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Outcome of one entry of [`op_suite`].
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    /// Elementwise ops are held to the tighter tolerance.
    pub elementwise: bool,
    pub report: GradCheckReport,
}

impl OpCheck {
    pub fn tolerance(&self) -> f64 {
        if self.elementwise {
            ELEMENTWISE_TOLERANCE
        } else {
            COMPOSITE_TOLERANCE
        }
    }

    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance()
    }
}

pub const ELEMENTWISE_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
pub const SUITE_STEP: f64 = 1e-6;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values in `[0.2, 1.5]` with a random sign: away from the kinks of relu and
/// abs and the pole of recip.
fn kink_free(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).expect("shape")
}

/// Reduce an op output to a scalar with fixed random weights so that every
/// output element contributes a distinct gradient.
fn project(out: &Tensor, weights: &Tensor) -> Result<Tensor> {
    out.mul(weights)?.sum()
}

type Case = (&'static str, bool, Box<dyn Fn(&Tensor) -> Result<Tensor>>, Tensor);

/// Finite-difference check of every differentiable op on small random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<Case> = Vec::new();

    let x = kink_free(&mut rng, &[2, 3, 4]);
    let other = kink_free(&mut rng, &[2, 3, 4]);
    let w = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
    macro_rules! elementwise {
        ($name:expr, $f:expr) => {{
            let (w, other) = (w.clone(), other.clone());
            let f = $f;
            let _ = &other;
            cases.push(($name, true, Box::new(move |t: &Tensor| project(&f(t, &other)?, &w)), x.clone()));
        }};
    }
    elementwise!("add", |t: &Tensor, o: &Tensor| t.add(o));
    elementwise!("sub", |t: &Tensor, o: &Tensor| o.sub(t));
    elementwise!("mul", |t: &Tensor, o: &Tensor| t.mul(o));
    elementwise!("scale", |t: &Tensor, _: &Tensor| t.scale(-1.7));
    elementwise!("add_scalar", |t: &Tensor, _: &Tensor| t.add_scalar(0.4));
    elementwise!("abs", |t: &Tensor, _: &Tensor| t.abs());
    elementwise!("relu", |t: &Tensor, _: &Tensor| t.relu());
    elementwise!("recip", |t: &Tensor, _: &Tensor| t.recip());
    elementwise!("square", |t: &Tensor, _: &Tensor| t.square());
    elementwise!("reshape", |t: &Tensor, _: &Tensor| t.reshape(&[2, 3, 4]));
    cases.push(("sum", true, Box::new(|t: &Tensor| t.sum()), x.clone()));
    cases.push(("mean", true, Box::new(|t: &Tensor| t.mean()), x.clone()));

    let target: Vec<f64> = x.values().iter().enumerate().map(|(i, v)| v + [0.3, -2.5, 0.9, 1.8][i % 4]).collect();
    let mask: Vec<bool> = (0..x.numel()).map(|i| i % 5 != 0).collect();
    cases.push(("huber", true, Box::new(move |t: &Tensor| t.huber(&target, &mask)), x.clone()));

    let y = uniform(&mut rng, &[2, 3, 4], -2.0, 2.0);
    let cw = uniform(&mut rng, &[2, 7, 4], -1.0, 1.0);
    let extra = uniform(&mut rng, &[2, 4, 4], -1.0, 1.0);
    cases.push((
        "concat",
        false,
        Box::new(move |t: &Tensor| project(&Tensor::concat(&[t.clone(), extra.clone()], 1)?, &cw)),
        y.clone(),
    ));
    let rw = uniform(&mut rng, &[2, 3, 4, 3], -1.0, 1.0);
    cases.push((
        "repeat_axis",
        false,
        Box::new(move |t: &Tensor| project(&t.reshape(&[2, 3, 4, 1])?.repeat_axis(3, 3)?, &rw)),
        y.clone(),
    ));
    let sw = w.clone();
    cases.push(("softmax", false, Box::new(move |t: &Tensor| project(&t.softmax(1)?, &sw)), y.clone()));
    let ww = uniform(&mut rng, &[2, 4], -1.0, 1.0);
    cases.push((
        "weighted_sum",
        false,
        Box::new(move |t: &Tensor| project(&t.weighted_sum(1, &[1.0, 2.0, 3.0])?, &ww)),
        y.clone(),
    ));

    let img = uniform(&mut rng, &[2, 2, 7, 6], -1.0, 1.0);
    let kernel = uniform(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let bias = uniform(&mut rng, &[3], -0.5, 0.5);
    for (name, opts) in [
        ("conv2d", Conv2dOptions::same(3, 1)),
        ("conv2d_dilated", Conv2dOptions::same(3, 2)),
        ("conv2d_strided", Conv2dOptions { stride: 2, dilation: 1, padding: 1 }),
    ] {
        let probe = conv2d(&img, &kernel, Some(&bias), opts)?;
        let pw = uniform(&mut rng, probe.shape(), -1.0, 1.0);
        let (k, b, pw2) = (kernel.clone(), bias.clone(), pw.clone());
        cases.push((
            name,
            false,
            Box::new(move |t: &Tensor| project(&conv2d(t, &k, Some(&b), opts)?, &pw2)),
            img.clone(),
        ));
        let (i2, b2) = (img.clone(), bias.clone());
        let wname = match name {
            "conv2d" => "conv2d_weight",
            "conv2d_dilated" => "conv2d_dilated_weight",
            _ => "conv2d_strided_weight",
        };
        let pw3 = pw.clone();
        cases.push((
            wname,
            false,
            Box::new(move |t: &Tensor| project(&conv2d(&i2, t, Some(&b2), opts)?, &pw3)),
            kernel.clone(),
        ));
        let (i3, k3) = (img.clone(), kernel.clone());
        let bname = match name {
            "conv2d" => "conv2d_bias",
            "conv2d_dilated" => "conv2d_dilated_bias",
            _ => "conv2d_strided_bias",
        };
        cases.push((
            bname,
            false,
            Box::new(move |t: &Tensor| project(&conv2d(&i3, &k3, Some(t), opts)?, &pw)),
            bias.clone(),
        ));
    }

    let vol = uniform(&mut rng, &[1, 2, 3, 4, 4], -1.0, 1.0);
    let k3d = uniform(&mut rng, &[2, 2, 3, 3, 3], -0.5, 0.5);
    let b3d = uniform(&mut rng, &[2], -0.5, 0.5);
    let v3w = uniform(&mut rng, &[1, 2, 3, 4, 4], -1.0, 1.0);
    {
        let (k, b, pw) = (k3d.clone(), b3d.clone(), v3w.clone());
        cases.push((
            "conv3d",
            false,
            Box::new(move |t: &Tensor| project(&conv3d(t, &k, Some(&b), Conv3dOptions::default())?, &pw)),
            vol.clone(),
        ));
        let (v, b, pw) = (vol.clone(), b3d.clone(), v3w.clone());
        cases.push((
            "conv3d_weight",
            false,
            Box::new(move |t: &Tensor| project(&conv3d(&v, t, Some(&b), Conv3dOptions::default())?, &pw)),
            k3d.clone(),
        ));
        let (v, k, pw) = (vol.clone(), k3d.clone(), v3w.clone());
        cases.push((
            "conv3d_bias",
            false,
            Box::new(move |t: &Tensor| project(&conv3d(&v, &k, Some(t), Conv3dOptions::default())?, &pw)),
            b3d.clone(),
        ));
    }

    let feat = uniform(&mut rng, &[1, 2, 5, 6], -1.0, 1.0);
    let (planes, gh, gw) = (2, 3, 4);
    let n = planes * gh * gw;
    let coords: Vec<f64> = (0..n)
        .flat_map(|_| [rng.random_range(-0.5..6.0), rng.random_range(-0.5..5.0)])
        .collect();
    let mask: Vec<bool> = (0..n).map(|i| i % 7 != 3).collect();
    let gsw = uniform(&mut rng, &[1, 2, planes, gh, gw], -1.0, 1.0);
    cases.push((
        "grid_sample",
        false,
        Box::new(move |t: &Tensor| {
            let grid = SampleGrid {
                planes,
                height: gh,
                width: gw,
                coords: &coords,
                mask: &mask,
            };
            project(&grid_sample_bilinear(t, &grid)?, &gsw)
        }),
        feat.clone(),
    ));

    let pool_in = uniform(&mut rng, &[1, 2, 6, 5], -1.0, 1.0);
    let pw = uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
    cases.push((
        "avg_pool2d",
        false,
        Box::new(move |t: &Tensor| project(&avg_pool2d(t, 2)?, &pw)),
        pool_in.clone(),
    ));
    let uw = uniform(&mut rng, &[1, 2, 9, 7], -1.0, 1.0);
    cases.push((
        "upsample_bilinear",
        false,
        Box::new(move |t: &Tensor| project(&upsample_bilinear(t, 9, 7)?, &uw)),
        pool_in,
    ));

    cases
        .into_iter()
        .map(|(name, elementwise, f, x)| {
            Ok(OpCheck {
                name,
                elementwise,
                report: grad_check(f, &x, SUITE_STEP)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[5], vec![0.3, -1.2, 2.0, 0.0, 4.5]).unwrap();
        let r = grad_check(|t| t.square()?.sum(), &x, 1e-5).unwrap();
        assert_eq!(r.checked, 5);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu'(0) is taken as 0 but the symmetric difference sees 0.5
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let r = grad_check(|t| t.relu()?.sum(), &x, 1e-5).unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn every_op_passes() {
        let checks = op_suite(3).unwrap();
        assert!(checks.len() > 25);
        for c in &checks {
            assert!(c.passed(), "{} {:?}", c.name, c.report);
        }
    }
}
