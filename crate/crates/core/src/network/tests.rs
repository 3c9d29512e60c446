use super::*;
use crate::geometry::SamplingMode;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_param(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let t = random(shape, seed);
    Tensor::param(shape, t.values().iter().map(|v| v * scale).collect()).unwrap()
}

fn toy_k(size: usize) -> CameraIntrinsics {
    let s = size as f64;
    CameraIntrinsics::new(s, s, s / 2.0 - 0.5, s / 2.0 - 0.5, size, size).unwrap()
}

fn shifted_pose(tx: f64) -> CameraPose {
    CameraPose::new(Matrix3::identity(), Vector3::new(tx, 0.0, 0.0)).unwrap()
}

fn feature_map(shape: &[usize], seed: u64) -> FeatureMap {
    FeatureMap {
        tensor: random(shape, seed),
    }
}

#[test]
fn full_size_feature_shape() {
    let cfg = NetworkConfig::full_size();
    let params = ParamStore::init(&cfg, 1).unwrap();
    let f = extract_features(&random(&[1, 3, 64, 64], 2), &params, &cfg).unwrap();
    assert_eq!(f.tensor.shape(), &[1, 32, 16, 16]);
}

#[test]
fn full_resolution_feature_shape() {
    let cfg = NetworkConfig::toy();
    let params = ParamStore::init(&cfg, 1).unwrap();
    let f = extract_features(&random(&[1, 1, 64, 64], 2), &params, &cfg).unwrap();
    assert_eq!(f.tensor.shape(), &[1, 8, 64, 64]);
}

#[test]
fn indivisible_size_reports_padding() {
    let cfg = NetworkConfig::full_size();
    let params = ParamStore::init(&cfg, 1).unwrap();
    let err = extract_features(&random(&[1, 3, 60, 70], 2), &params, &cfg).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::InvalidArgument(_)));
    assert!(msg.contains("multiple of 64"), "{msg}");
    assert!(msg.contains("58x4"), "{msg}");
}

#[test]
fn identical_images_identical_features() {
    let cfg = NetworkConfig::toy();
    let params = ParamStore::init(&cfg, 3).unwrap();
    let img = random(&[1, 1, 16, 16], 4);
    let a = extract_features(&img, &params, &cfg).unwrap();
    let b = extract_features(&img.detach(), &params, &cfg).unwrap();
    assert_eq!(a.tensor.values(), b.tensor.values());
}

fn identity_grid(labels: usize, size: usize) -> WarpGrid {
    let planes = sample_planes(labels, 0.5, SamplingMode::InverseDepth).unwrap();
    compute_warp_grid(&toy_k(size), &CameraPose::identity(), &planes, size, size).unwrap()
}

#[test]
fn identity_concat_duplicates_reference() {
    let (ch, l, s) = (3, 4, 6);
    let f = feature_map(&[1, ch, s, s], 7);
    let raw = build_cost_volume(&f, &[f.clone()], &[identity_grid(l, s)], CostVariant::Concat).unwrap();
    let v = raw[0].volume.values();
    assert_eq!(raw[0].volume.shape(), &[1, 2 * ch, l, s, s]);
    let block = l * s * s;
    for c in 0..ch {
        assert_eq!(&v[c * block..(c + 1) * block], &v[(c + ch) * block..(c + ch + 1) * block]);
    }
}

#[test]
fn identity_abs_diff_is_zero() {
    let f = feature_map(&[1, 3, 6, 6], 8);
    let raw = build_cost_volume(&f, &[f.clone()], &[identity_grid(4, 6)], CostVariant::AbsDiff).unwrap();
    assert_eq!(raw[0].volume.shape(), &[1, 3, 4, 6, 6]);
    assert!(raw[0].volume.values().iter().all(|v| *v == 0.0));
}

#[test]
fn concat_channels_are_twice_features() {
    let mut cfg = NetworkConfig::full_size();
    assert_eq!(cfg.cost_channels(), 64);
    cfg.cost_variant = CostVariant::AbsDiff;
    assert_eq!(cfg.cost_channels(), 32);
}

#[test]
fn empty_view_list_rejected() {
    let f = feature_map(&[1, 2, 4, 4], 1);
    let err = build_cost_volume(&f, &[], &[], CostVariant::Concat).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

fn small_cfg(labels: usize) -> NetworkConfig {
    NetworkConfig {
        channels: 2,
        labels,
        reg_channels: 3,
        ..NetworkConfig::toy()
    }
}

#[test]
fn regularizer_output_shape() {
    let cfg = small_cfg(4);
    let params = ParamStore::init(&cfg, 2).unwrap();
    let raw = RawCostVolume {
        volume: random(&[1, 4, 4, 8, 8], 3),
        in_bounds: vec![true; 4 * 64],
    };
    let out = regularize_cost_volume(&[raw], &params, &cfg, RegularizerMode::Standard).unwrap();
    assert_eq!(out.shape(), &[1, 4, 8, 8]);
}

#[test]
fn duplicated_view_averages_to_itself() {
    let cfg = small_cfg(4);
    let params = ParamStore::init(&cfg, 2).unwrap();
    let raw = RawCostVolume {
        volume: random(&[1, 4, 4, 5, 5], 3),
        in_bounds: vec![true; 100],
    };
    for fusion in [ViewFusion::AfterRegularization, ViewFusion::BeforeRegularization] {
        let cfg = NetworkConfig { view_fusion: fusion, ..cfg };
        let one = regularize_cost_volume(&[raw.clone()], &params, &cfg, RegularizerMode::Standard).unwrap();
        let two =
            regularize_cost_volume(&[raw.clone(), raw.clone()], &params, &cfg, RegularizerMode::Standard).unwrap();
        assert_eq!(one.values(), two.values());
    }
}

#[test]
fn opposite_volumes_cancel_under_linear_head() {
    let cfg = small_cfg(3);
    let params = ParamStore::init(&cfg, 5).unwrap();
    let v = random(&[1, 4, 3, 5, 5], 6);
    let neg = v.scale(-1.0).unwrap();
    let raws: Vec<RawCostVolume> = [v, neg]
        .into_iter()
        .map(|volume| RawCostVolume {
            volume,
            in_bounds: vec![true; 75],
        })
        .collect();
    let out = regularize_cost_volume(&raws, &params, &cfg, RegularizerMode::Linear).unwrap();
    let max = out.values().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(max < 1e-12, "{max}");
    let standard = regularize_cost_volume(&raws, &params, &cfg, RegularizerMode::Standard).unwrap();
    assert!(standard.values().iter().any(|x| x.abs() > 1e-6));
}

#[test]
fn coverage_counts_views() {
    let a = RawCostVolume {
        volume: Tensor::zeros(&[1, 1, 1, 1, 3]),
        in_bounds: vec![true, false, true],
    };
    let b = RawCostVolume {
        in_bounds: vec![true, false, false],
        ..a.clone()
    };
    assert_eq!(coverage(&[a, b]), vec![2, 0, 1]);
}

#[test]
fn zero_initialized_aggregation_is_identity() {
    let cfg = small_cfg(4);
    let params = ParamStore::init(&cfg, 9).unwrap();
    let initial = random(&[1, 4, 8, 8], 1);
    let agg = aggregate_cost(&initial, &feature_map(&[1, 2, 8, 8], 2), &params).unwrap();
    assert_eq!(agg.refined.values(), initial.values());
    assert!(agg.residual.values().iter().all(|v| *v == 0.0));
}

fn live_aggregation(cfg: &NetworkConfig, seed: u64) -> ParamStore {
    let mut params = ParamStore::init(cfg, seed).unwrap();
    let last = CONTEXT_DILATIONS.len() - 1;
    let name = format!("agg.conv{last}.weight");
    let shape = params.get(&name).unwrap().shape().to_vec();
    params.insert(name, random_param(&shape, seed + 1, 0.3));
    params
}

#[test]
fn constant_inputs_give_constant_interior() {
    let cfg = small_cfg(1);
    let params = live_aggregation(&cfg, 11);
    let reach: usize = CONTEXT_DILATIONS.iter().sum();
    let size = 2 * reach + 4;
    let initial = Tensor::full(&[1, 1, size, size], 0.7);
    let ctx = FeatureMap {
        tensor: Tensor::concat(
            &[
                Tensor::full(&[1, 1, size, size], 0.3),
                Tensor::full(&[1, 1, size, size], -0.2),
            ],
            1,
        )
        .unwrap(),
    };
    let agg = aggregate_cost(&initial, &ctx, &params).unwrap();
    let v = agg.refined.values();
    let centre = v[reach * size + reach];
    for y in reach..size - reach {
        for x in reach..size - reach {
            assert!((v[y * size + x] - centre).abs() < 1e-12);
        }
    }
}

fn permute_slices(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let plane = s[2] * s[3];
    let mut out = Vec::with_capacity(t.numel());
    for &p in perm {
        out.extend_from_slice(&t.values()[p * plane..(p + 1) * plane]);
    }
    Tensor::new(s, out).unwrap()
}

#[test]
fn aggregation_is_label_permutation_equivariant() {
    let cfg = small_cfg(5);
    let params = live_aggregation(&cfg, 21);
    let initial = random(&[1, 5, 6, 7], 22);
    let ctx = feature_map(&[1, 2, 6, 7], 23);
    let perm = [3, 0, 4, 1, 2];
    let mut inverse = [0; 5];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let direct = aggregate_cost(&initial, &ctx, &params).unwrap().refined;
    let permuted = aggregate_cost(&permute_slices(&initial, &perm), &ctx, &params).unwrap().refined;
    assert_eq!(permute_slices(&permuted, &inverse).values(), direct.values());
}

fn two_view_inputs(seed: u64) -> (CameraIntrinsics, Tensor, Vec<PairedView>) {
    let k = toy_k(32);
    let reference = random(&[1, 1, 32, 32], seed);
    let paired = vec![PairedView {
        image: random(&[1, 1, 32, 32], seed + 1),
        pose: shifted_pose(0.1),
    }];
    (k, reference, paired)
}

#[test]
fn toy_forward_depth_within_range() {
    let net = Network::new(NetworkConfig::toy(), 5).unwrap();
    let (k, reference, paired) = two_view_inputs(30);
    let out = net.forward(&k, &reference, &paired).unwrap();
    let (lo, hi) = (0.5, 8.0 * 0.5);
    for d in [out.initial_depth().unwrap(), out.refined_depth().unwrap()] {
        assert_eq!((d.width, d.height), (32, 32));
        assert_eq!(d.valid_count(), 32 * 32);
        assert!(d.depth.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
    }
    let p = out.refined.prob.values();
    for px in 0..32 * 32 {
        let total: f64 = (0..8).map(|l| p[l * 1024 + px]).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

#[test]
fn strided_forward_upsamples_to_full_resolution() {
    let cfg = NetworkConfig {
        feature_stride: 2,
        ..NetworkConfig::toy()
    };
    let net = Network::new(cfg, 6).unwrap();
    let (k, reference, paired) = two_view_inputs(31);
    let out = net.forward(&k, &reference, &paired).unwrap();
    assert_eq!(out.volume.initial.shape(), &[1, 8, 16, 16]);
    assert_eq!(out.refined.depth.shape(), &[1, 32, 32]);
}

#[test]
fn aggregation_off_returns_initial_twice() {
    let cfg = NetworkConfig {
        aggregation: false,
        ..NetworkConfig::toy()
    };
    let net = Network::new(cfg, 7).unwrap();
    let (k, reference, paired) = two_view_inputs(32);
    let out = net.forward(&k, &reference, &paired).unwrap();
    assert_eq!(out.initial.depth.values(), out.refined.depth.values());
    assert!(out.volume.residual.is_none());
}

#[test]
fn duplicated_paired_view_changes_nothing() {
    let net = Network::new(NetworkConfig::toy(), 8).unwrap();
    let (k, reference, paired) = two_view_inputs(33);
    let one = net.forward(&k, &reference, &paired).unwrap();
    let doubled = vec![paired[0].clone(), paired[0].clone()];
    let two = net.forward(&k, &reference, &doubled).unwrap();
    assert_eq!(one.initial.depth.values(), two.initial.depth.values());
    assert_eq!(one.refined.depth.values(), two.refined.depth.values());
}

#[test]
fn forward_rejects_mismatched_views() {
    let net = Network::new(NetworkConfig::toy(), 8).unwrap();
    let (k, reference, _) = two_view_inputs(34);
    let bad = vec![PairedView {
        image: random(&[1, 1, 16, 16], 1),
        pose: CameraPose::identity(),
    }];
    assert!(net.forward(&k, &reference, &bad).is_err());
    assert!(net.forward(&k, &reference, &[]).is_err());
}

#[test]
fn depth_map_validation() {
    assert!(DepthMap::new(2, 1, vec![1.0, -1.0], vec![true, true]).is_err());
    let d = DepthMap::from_values(2, 1, vec![1.0, 0.0]).unwrap();
    assert_eq!(d.valid, vec![true, false]);
    assert_eq!(d.get(0, 0), Some(1.0));
    assert_eq!(d.get(1, 0), None);
}
