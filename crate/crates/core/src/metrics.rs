//! Depth accuracy, photometric/geometric consistency and cost-volume confidence.

use std::fmt::Write as _;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::geometry::{project_pixel, CameraIntrinsics, CameraPose};
use crate::network::DepthMap;
use crate::tensor::Tensor;

/// Relative error below which a pixel counts as complete.
pub const DEFAULT_COMPLETENESS_THRESHOLD: f64 = 0.1;

pub const CSV_FIELDS: [&str; 9] = [
    "abs_rel",
    "abs_diff",
    "sq_rel",
    "rmse",
    "rmse_log",
    "a1",
    "a2",
    "a3",
    "completeness",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub abs_diff: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub completeness: f64,
}

impl DepthMetrics {
    pub fn fields(&self) -> [f64; 9] {
        [
            self.abs_rel,
            self.abs_diff,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.a1,
            self.a2,
            self.a3,
            self.completeness,
        ]
    }

    fn from_fields(f: [f64; 9]) -> Self {
        Self {
            abs_rel: f[0],
            abs_diff: f[1],
            sq_rel: f[2],
            rmse: f[3],
            rmse_log: f[4],
            a1: f[5],
            a2: f[6],
            a3: f[7],
            completeness: f[8],
        }
    }

    /// Field-wise mean.
    pub fn mean(rows: &[DepthMetrics]) -> Result<DepthMetrics> {
        if rows.is_empty() {
            return Err(Error::invalid("no metric rows to average"));
        }
        let mut acc = [0.0; 9];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.fields()) {
                *a += v;
            }
        }
        Ok(Self::from_fields(acc.map(|a| a / rows.len() as f64)))
    }

    pub fn csv_row(&self, label: &str) -> String {
        let mut out = label.to_string();
        for v in self.fields() {
            let _ = write!(out, ",{v}");
        }
        out
    }
}

pub fn csv_header() -> String {
    format!("scene,{}", CSV_FIELDS.join(","))
}

/// One row per labelled result plus a trailing `mean` row.
pub fn metrics_csv(rows: &[(String, DepthMetrics)]) -> Result<String> {
    let mut out = csv_header();
    out.push('\n');
    for (label, m) in rows {
        out.push_str(&m.csv_row(label));
        out.push('\n');
    }
    let all: Vec<DepthMetrics> = rows.iter().map(|(_, m)| *m).collect();
    out.push_str(&DepthMetrics::mean(&all)?.csv_row("mean"));
    out.push('\n');
    Ok(out)
}

fn check_same_size(a: &DepthMap, b: &DepthMap, op: &'static str) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height),
        ));
    }
    Ok(())
}

pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMetrics> {
    depth_metrics_with(pred, gt, DEFAULT_COMPLETENESS_THRESHOLD)
}

/// Errors over pixels valid in both maps. Completeness is the share of valid
/// ground-truth pixels predicted with relative error below `threshold`.
pub fn depth_metrics_with(pred: &DepthMap, gt: &DepthMap, threshold: f64) -> Result<DepthMetrics> {
    check_same_size(pred, gt, "depth_metrics")?;
    let mut sums = [0.0; 8];
    let (mut n, mut gt_valid, mut complete) = (0usize, 0usize, 0usize);
    for i in 0..gt.depth.len() {
        if !gt.valid[i] {
            continue;
        }
        gt_valid += 1;
        if !pred.valid[i] {
            continue;
        }
        let (p, g) = (pred.depth[i], gt.depth[i]);
        let diff = p - g;
        let rel = diff.abs() / g;
        let delta = (p / g).max(g / p);
        let log_diff = p.ln() - g.ln();
        n += 1;
        sums[0] += rel;
        sums[1] += diff.abs();
        sums[2] += diff * diff / g;
        sums[3] += diff * diff;
        sums[4] += log_diff * log_diff;
        sums[5] += (delta < 1.25) as u8 as f64;
        sums[6] += (delta < 1.25f64.powi(2)) as u8 as f64;
        sums[7] += (delta < 1.25f64.powi(3)) as u8 as f64;
        complete += (rel < threshold) as usize;
    }
    if n == 0 {
        return Err(Error::invalid("no pixel is valid in both depth maps"));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: sums[0] / nf,
        abs_diff: sums[1] / nf,
        sq_rel: sums[2] / nf,
        rmse: (sums[3] / nf).sqrt(),
        rmse_log: (sums[4] / nf).sqrt(),
        a1: sums[5] / nf,
        a2: sums[6] / nf,
        a3: sums[7] / nf,
        completeness: complete as f64 / gt_valid as f64,
    })
}

/// Mean `|1/p - 1/g|` over pixels valid in both maps.
pub fn geometric_error(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    check_same_size(pred, gt, "geometric_error")?;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..gt.depth.len() {
        if gt.valid[i] && pred.valid[i] {
            sum += (1.0 / pred.depth[i] - 1.0 / gt.depth[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no pixel is valid in both depth maps"));
    }
    Ok(sum / n as f64)
}

/// Warp `paired` into the reference view through the per-pixel depth `pred`
/// and return the mean absolute intensity difference over pixels that land
/// inside the paired image.
pub fn photometric_error(
    reference: &Image,
    paired: &Image,
    pred: &DepthMap,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<f64> {
    if (reference.width, reference.height) != (pred.width, pred.height)
        || (paired.width, paired.height) != (pred.width, pred.height)
    {
        return Err(Error::shape("photometric_error", "images and depth differ in size"));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..pred.height {
        for x in 0..pred.width {
            let Some(d) = pred.get(x, y) else { continue };
            let p = project_pixel(x as f64, y as f64, d, k, pose);
            if !p.in_bounds(paired.width, paired.height) {
                continue;
            }
            let Some(v) = paired.sample_bilinear(p.x, p.y) else { continue };
            sum += (reference.get(x, y) - v).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no pixel projects inside the paired image"));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceReport {
    pub winner_margin: f64,
    pub curvature: f64,
}

/// Mean winner margin and curvature of a probability volume `[1, L, H, W]`
/// or `[L, H, W]`. Curvature at a label edge reuses the peak for the missing
/// neighbour.
pub fn confidence(prob: &Tensor) -> Result<ConfidenceReport> {
    let s = prob.shape();
    let (labels, pixels) = match s {
        [1, l, h, w] | [l, h, w] => (*l, h * w),
        _ => return Err(Error::shape("confidence", format!("{s:?}"))),
    };
    if labels < 3 {
        return Err(Error::invalid(format!("curvature needs at least 3 labels, got {labels}")));
    }
    let v = prob.values();
    let (mut margin, mut curvature) = (0.0, 0.0);
    let mut profile = vec![0.0; labels];
    for px in 0..pixels {
        for (l, p) in profile.iter_mut().enumerate() {
            *p = v[l * pixels + px];
        }
        let (best, second, arg) = top_two(&profile);
        margin += best - second;
        let below = profile[arg.saturating_sub(1)];
        let above = profile[(arg + 1).min(labels - 1)];
        curvature += best - 0.5 * (below + above);
    }
    Ok(ConfidenceReport {
        winner_margin: margin / pixels as f64,
        curvature: curvature / pixels as f64,
    })
}

/// Largest value, second largest value and the first index of the largest.
fn top_two(profile: &[f64]) -> (f64, f64, usize) {
    let mut arg = 0;
    for (i, &p) in profile.iter().enumerate() {
        if p > profile[arg] {
            arg = i;
        }
    }
    let second = profile
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, p)| *p)
        .fold(f64::NEG_INFINITY, f64::max);
    (profile[arg], second, arg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};
    use proptest::prelude::*;

    fn map(values: &[f64]) -> DepthMap {
        DepthMap::from_values(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = map(&[0.7, 1.5, 3.0]);
        let m = depth_metrics(&gt, &gt).unwrap();
        assert_eq!(m.fields(), [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn doubled_depth() {
        let m = depth_metrics(&map(&[2.0]), &map(&[1.0])).unwrap();
        assert_eq!((m.abs_rel, m.sq_rel, m.rmse, m.abs_diff), (1.0, 1.0, 1.0, 1.0));
        assert_eq!((m.a1, m.a2, m.a3, m.completeness), (0.0, 0.0, 0.0, 0.0));
        assert!((m.rmse_log - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn small_ratio_is_inlier() {
        let m = depth_metrics(&map(&[1.2]), &map(&[1.0])).unwrap();
        assert_eq!(m.a1, 1.0);
    }

    #[test]
    fn invalid_prediction_is_incomplete() {
        let pred = DepthMap::new(2, 1, vec![1.0, 0.0], vec![true, false]).unwrap();
        let m = depth_metrics(&pred, &map(&[1.0, 1.0])).unwrap();
        assert_eq!(m.abs_rel, 0.0);
        assert_eq!(m.completeness, 0.5);
    }

    #[test]
    fn empty_mask_rejected() {
        let none = DepthMap::new(1, 1, vec![0.0], vec![false]).unwrap();
        assert!(matches!(depth_metrics(&none, &map(&[1.0])), Err(Error::InvalidArgument(_))));
        assert!(matches!(geometric_error(&none, &map(&[1.0])), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn geometric_examples() {
        let gt = map(&[4.0, 1.0]);
        assert_eq!(geometric_error(&gt, &gt).unwrap(), 0.0);
        assert_eq!(geometric_error(&map(&[2.0]), &map(&[4.0])).unwrap(), 0.25);
        let gt_masked = DepthMap::new(2, 1, vec![4.0, 0.0], vec![true, false]).unwrap();
        let a = geometric_error(&map(&[2.0, 1.0]), &gt_masked).unwrap();
        let b = geometric_error(&map(&[2.0, 9.0]), &gt_masked).unwrap();
        assert_eq!(a, b);
    }

    fn profile(values: &[f64]) -> Tensor {
        Tensor::new(&[values.len(), 1, 1], values.to_vec()).unwrap()
    }

    #[test]
    fn confidence_examples() {
        let one_hot = confidence(&profile(&[0.0, 1.0, 0.0, 0.0])).unwrap();
        assert_eq!(one_hot.winner_margin, 1.0);
        assert_eq!(one_hot.curvature, 1.0);
        let flat = confidence(&profile(&[0.25; 4])).unwrap();
        assert_eq!((flat.winner_margin, flat.curvature), (0.0, 0.0));
        let c = confidence(&profile(&[0.5, 0.3, 0.2])).unwrap();
        assert!((c.winner_margin - 0.2).abs() < 1e-15);
        // peak at the edge: the missing neighbour is the peak itself
        assert!((c.curvature - (0.5 - 0.5 * (0.5 + 0.3))).abs() < 1e-15);
        assert!(confidence(&profile(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn identity_pose_photometric_error_is_zero() {
        let k = CameraIntrinsics::new(8.0, 8.0, 3.5, 3.5, 8, 8).unwrap();
        let img = Image::new(8, 8, (0..64).map(|i| (i as f64 * 0.37).sin().abs()).collect()).unwrap();
        let depth = DepthMap::from_values(8, 8, (0..64).map(|i| 0.5 + i as f64 * 0.1).collect()).unwrap();
        let e = photometric_error(&img, &img, &depth, &k, &CameraPose::identity()).unwrap();
        assert_eq!(e, 0.0);
        let away = CameraPose::new(Matrix3::identity(), Vector3::new(100.0, 0.0, 0.0)).unwrap();
        assert!(photometric_error(&img, &img, &depth, &k, &away).is_err());
    }

    #[test]
    fn csv_layout() {
        let m = depth_metrics(&map(&[2.0]), &map(&[1.0])).unwrap();
        let text = metrics_csv(&[("s1".into(), m), ("s2".into(), m)]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "scene,abs_rel,abs_diff,sq_rel,rmse,rmse_log,a1,a2,a3,completeness"
        );
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("mean,1,1,1,1,"));
    }

    fn depth_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(0.05f64..20.0, n),
                prop::collection::vec(0.05f64..20.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn inlier_ratios_are_ordered((p, g) in depth_pair()) {
            let m = depth_metrics(&map(&p), &map(&g)).unwrap();
            prop_assert!(m.a1 <= m.a2 && m.a2 <= m.a3 && m.a3 <= 1.0);
            prop_assert!(m.fields().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn pixel_order_is_irrelevant((p, g) in depth_pair(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pp: Vec<f64> = order.iter().map(|&i| p[i]).collect();
            let gg: Vec<f64> = order.iter().map(|&i| g[i]).collect();
            let a = depth_metrics(&map(&p), &map(&g)).unwrap();
            let b = depth_metrics(&map(&pp), &map(&gg)).unwrap();
            for (x, y) in a.fields().iter().zip(b.fields()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }

        #[test]
        fn scale_covariance((p, g) in depth_pair(), s in 0.1f64..10.0) {
            let a = depth_metrics(&map(&p), &map(&g)).unwrap();
            let ps: Vec<f64> = p.iter().map(|v| v * s).collect();
            let gs: Vec<f64> = g.iter().map(|v| v * s).collect();
            let b = depth_metrics(&map(&ps), &map(&gs)).unwrap();
            prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-9);
            prop_assert!((a.rmse_log - b.rmse_log).abs() < 1e-9);
            prop_assert!((a.sq_rel * s - b.sq_rel).abs() < 1e-9 * b.sq_rel.max(1.0));
            prop_assert!((a.rmse * s - b.rmse).abs() < 1e-9 * b.rmse.max(1.0));
        }

        #[test]
        fn sharpening_never_lowers_margin(raw in prop::collection::vec(0.01f64..1.0, 3..12), power in 1.0f64..6.0) {
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let sharp_raw: Vec<f64> = p.iter().map(|v| v.powf(power)).collect();
            let st: f64 = sharp_raw.iter().sum();
            let sharp: Vec<f64> = sharp_raw.iter().map(|v| v / st).collect();
            let a = confidence(&profile(&p)).unwrap();
            let b = confidence(&profile(&sharp)).unwrap();
            prop_assert!(b.winner_margin >= a.winner_margin - 1e-12);
            prop_assert!((0.0..=1.0).contains(&a.winner_margin));
        }
    }
}
