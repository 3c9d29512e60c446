use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Transition point between the quadratic and linear branches of the Huber
/// loss (the SmoothL1 convention).
pub const HUBER_DELTA: f64 = 1.0;

/// Split `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape().len() {
            return Err(Error::shape(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        Ok(())
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Tensor> {
        let data: Vec<f64> = self.values().iter().map(|&v| f(v)).collect();
        let input = self.clone();
        let out = data.clone();
        Tensor::from_op(op, self.shape().to_vec(), data, vec![self.clone()], move |g| {
            let grad = input
                .values()
                .iter()
                .zip(&out)
                .zip(g)
                .map(|((&x, &y), &g)| g * df(x, y))
                .collect();
            vec![Some(grad)]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.values().to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self.values().iter().zip(other.values()).map(|(a, b)| a + b).collect();
        Tensor::from_op("add", self.shape().to_vec(), data, vec![self.clone(), other.clone()], |g| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self.values().iter().zip(other.values()).map(|(a, b)| a - b).collect();
        Tensor::from_op("sub", self.shape().to_vec(), data, vec![self.clone(), other.clone()], |g| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let data = self.values().iter().zip(other.values()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        let (ga, gb) = (a.requires_grad(), b.requires_grad());
        Tensor::from_op("mul", self.shape().to_vec(), data, vec![self.clone(), other.clone()], move |g| {
            let da = ga.then(|| g.iter().zip(b.values()).map(|(g, b)| g * b).collect());
            let db = gb.then(|| g.iter().zip(a.values()).map(|(g, a)| g * a).collect());
            vec![da, db]
        })
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.values().iter().map(|v| v * c).collect();
        Tensor::from_op("scale", self.shape().to_vec(), data, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|v| v * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.values().iter().map(|v| v + c).collect();
        Tensor::from_op("add_scalar", self.shape().to_vec(), data, vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        })
    }

    /// Elementwise absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&self) -> Result<Tensor> {
        self.unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn recip(&self) -> Result<Tensor> {
        self.unary("recip", |x| 1.0 / x, |_, y| -y * y)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sum(&self) -> Result<Tensor> {
        let total = self.values().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![], vec![total], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let n = self.numel();
        let total: f64 = self.values().iter().sum();
        Tensor::from_op("mean", vec![], vec![total / n as f64], vec![self.clone()], move |g| {
            vec![Some(vec![g[0] / n as f64; n])]
        })
    }

    /// Join tensors along `axis`; all other extents must agree.
    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::invalid("concat needs at least one tensor"))?;
        first.check_axis(axis, "concat")?;
        let rank = first.shape().len();
        for t in tensors {
            let ok = t.shape().len() == rank
                && (0..rank).all(|d| d == axis || t.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", first.shape(), t.shape()),
                ));
            }
        }
        let (outer, _, inner) = axis_extents(first.shape(), axis);
        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;

        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &len) in tensors.iter().zip(&sizes) {
                data.extend_from_slice(&t.values()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let needs: Vec<bool> = tensors.iter().map(|t| t.requires_grad()).collect();
        Tensor::from_op("concat", shape, data, tensors.to_vec(), move |g| {
            let mut grads: Vec<Option<Vec<f64>>> = sizes
                .iter()
                .zip(&needs)
                .map(|(&len, &need)| need.then(|| Vec::with_capacity(outer * len * inner)))
                .collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (grad, &len) in grads.iter_mut().zip(&sizes) {
                    let chunk = len * inner;
                    if let Some(grad) = grad {
                        grad.extend_from_slice(&g[offset..offset + chunk]);
                    }
                    offset += chunk;
                }
            }
            grads
        })
    }

    /// Broadcast a size-1 axis to `n` copies.
    pub fn repeat_axis(&self, axis: usize, n: usize) -> Result<Tensor> {
        self.check_axis(axis, "repeat_axis")?;
        if self.shape()[axis] != 1 || n == 0 {
            return Err(Error::shape(
                "repeat_axis",
                format!("axis {axis} of {:?} must have size 1 (repeat {n})", self.shape()),
            ));
        }
        let (outer, _, inner) = axis_extents(self.shape(), axis);
        let mut shape = self.shape().to_vec();
        shape[axis] = n;
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let block = &self.values()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(block);
            }
        }
        Tensor::from_op("repeat_axis", shape, data, vec![self.clone()], move |g| {
            let mut grad = vec![0.0; outer * inner];
            for o in 0..outer {
                let acc = &mut grad[o * inner..(o + 1) * inner];
                for r in 0..n {
                    let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                    acc.iter_mut().zip(src).for_each(|(a, s)| *a += s);
                }
            }
            vec![Some(grad)]
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "softmax")?;
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        let x = self.values();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (x[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[idx(l)] /= total;
                }
            }
        }
        let y = out.clone();
        Tensor::from_op("softmax", self.shape().to_vec(), out, vec![self.clone()], move |g| {
            let mut grad = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                    for l in 0..len {
                        grad[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                    }
                }
            }
            vec![Some(grad)]
        })
    }

    /// Contract `axis` against fixed weights: `out = sum_i w_i * x[.., i, ..]`.
    /// The axis is removed from the output shape.
    pub fn weighted_sum(&self, axis: usize, weights: &[f64]) -> Result<Tensor> {
        self.check_axis(axis, "weighted_sum")?;
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        if weights.len() != len {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for axis of length {len}", weights.len()),
            ));
        }
        let x = self.values();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (l, &w) in weights.iter().enumerate() {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let weights = weights.to_vec();
        Tensor::from_op("weighted_sum", shape, out, vec![self.clone()], move |g| {
            let mut grad = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for (l, &w) in weights.iter().enumerate() {
                    let dst = &mut grad[(o * len + l) * inner..(o * len + l + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d = w * s);
                }
            }
            vec![Some(grad)]
        })
    }

    /// Mean Huber (SmoothL1) loss over the elements where `mask` is true.
    /// The target is a constant.
    pub fn huber(&self, target: &[f64], mask: &[bool]) -> Result<Tensor> {
        if target.len() != self.numel() || mask.len() != self.numel() {
            return Err(Error::shape(
                "huber",
                format!(
                    "prediction has {} elements, target {}, mask {}",
                    self.numel(),
                    target.len(),
                    mask.len()
                ),
            ));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::invalid("huber loss over an empty mask"));
        }
        let residual: Vec<f64> = self
            .values()
            .iter()
            .zip(target)
            .zip(mask)
            .map(|((p, t), &m)| if m { p - t } else { 0.0 })
            .collect();
        let total: f64 = residual.iter().map(|&e| huber_value(e)).sum();
        let n = count as f64;
        Tensor::from_op("huber", vec![], vec![total / n], vec![self.clone()], move |g| {
            let grad = residual
                .iter()
                .map(|&e| g[0] * e.clamp(-HUBER_DELTA, HUBER_DELTA) / n)
                .collect();
            vec![Some(grad)]
        })
    }
}

fn huber_value(e: f64) -> f64 {
    let a = e.abs();
    if a <= HUBER_DELTA {
        0.5 * e * e
    } else {
        HUBER_DELTA * (a - 0.5 * HUBER_DELTA)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_closed_forms() {
        let u = t(&[4], &[0.3; 4]).softmax(0).unwrap();
        assert!(u.values().iter().all(|p| (p - 0.25).abs() < 1e-15));
        let p = t(&[2], &[0.0, 3f64.ln()]).softmax(0).unwrap();
        assert!((p.values()[0] - 0.25).abs() < 1e-15);
        assert!((p.values()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let x = t(&[2, 3, 2], &[0.1, -2.0, 3.0, 0.5, 0.0, 1.0, 7.0, -1.0, 2.5, 0.2, -0.3, 4.0]);
        let shifted = x.add_scalar(123.0).unwrap();
        let a = x.softmax(1).unwrap();
        let b = shifted.softmax(1).unwrap();
        for (p, q) in a.values().iter().zip(b.values()) {
            assert!((p - q).abs() < 1e-12);
        }
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|l| a.values()[(o * 3 + l) * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let big = t(&[2], &[1000.0, 1000.0]).softmax(0).unwrap();
        assert_eq!(big.values(), &[0.5, 0.5]);
    }

    #[test]
    fn huber_branches() {
        let mask = [true];
        let h = |e: f64| t(&[1], &[e]).huber(&[0.0], &mask).unwrap().item().unwrap();
        assert_eq!(h(0.5), 0.125);
        assert_eq!(h(2.0), 1.5);
        assert_eq!(h(-2.0), 1.5);
        assert_eq!(h(1.0), 0.5);
        assert_eq!(0.5 * 1.0f64 * 1.0, 1.0 - 0.5);
    }

    #[test]
    fn huber_masks_and_rejects_empty_mask() {
        let p = t(&[3], &[0.5, 100.0, 2.0]);
        let v = p.huber(&[0.0; 3], &[true, false, true]).unwrap().item().unwrap();
        assert!((v - (0.125 + 1.5) / 2.0).abs() < 1e-15);
        assert!(matches!(p.huber(&[0.0; 3], &[false; 3]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn concat_and_repeat_layout() {
        let a = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1, 1, 2], &[5.0, 6.0]);
        let c = Tensor::concat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2]);
        assert_eq!(c.values(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).repeat_axis(1, 3).unwrap();
        assert_eq!(r.values(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        assert!(a.repeat_axis(1, 2).is_err());
    }

    #[test]
    fn weighted_sum_removes_axis() {
        let x = t(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.weighted_sum(1, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.values(), &[1.0 + 6.0 + 15.0, 2.0 + 8.0 + 18.0]);
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        assert!(matches!(a.add(&b), Err(Error::Shape { op: "add", .. })));
        assert!(a.reshape(&[3]).is_err());
        assert!(a.softmax(1).is_err());
    }
}
