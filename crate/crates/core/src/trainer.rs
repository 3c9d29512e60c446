//! Two-term Huber loss, Adam and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::metrics::{confidence, depth_metrics, ConfidenceReport, DepthMetrics};
use crate::network::{DepthMap, Network, NetworkConfig, PairedView, ParamStore};
use crate::tensor::{relative_error, GradCheckReport, Tensor};

/// Weight of the initial-depth term.
pub const DEFAULT_LAMBDA: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub initial: f64,
    pub refined: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct Loss {
    /// Differentiable total.
    pub total: Tensor,
    pub report: LossReport,
}

/// `lambda * huber(initial - gt) + huber(refined - gt)`, each a mean over the
/// valid ground-truth pixels. Depth tensors are `[1, H, W]`.
pub fn compute_loss(initial: &Tensor, refined: &Tensor, gt: &DepthMap, lambda: f64) -> Result<Loss> {
    let expected = [1, gt.height, gt.width];
    for t in [initial, refined] {
        if t.shape() != expected {
            return Err(Error::shape(
                "compute_loss",
                format!("prediction {:?} vs ground truth {expected:?}", t.shape()),
            ));
        }
    }
    if gt.valid_count() == 0 {
        return Err(Error::invalid("ground-truth mask is empty"));
    }
    let li = initial.huber(&gt.depth, &gt.valid)?;
    let lr = refined.huber(&gt.depth, &gt.valid)?;
    let total = li.scale(lambda)?.add(&lr)?;
    let report = LossReport {
        total: total.item()?,
        initial: li.item()?,
        refined: lr.item()?,
        lambda,
    };
    Ok(Loss { total, report })
}

/// Keep only ground truth inside the network's depth range.
pub fn supervision_mask(gt: &DepthMap, cfg: &NetworkConfig) -> DepthMap {
    let (lo, hi) = cfg.depth_range();
    let valid = gt
        .valid
        .iter()
        .zip(&gt.depth)
        .map(|(v, d)| *v && *d >= lo && *d <= hi)
        .collect();
    DepthMap {
        valid,
        ..gt.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }
}

/// One bias-corrected Adam update using the gradients accumulated on
/// `params`. Updated tensors replace the old ones, so gradients reset.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    let grads = params
        .iter()
        .map(|(name, p)| {
            p.grad()
                .map(|g| (name.clone(), g))
                .ok_or_else(|| Error::InvalidState(format!("parameter `{name}` has no gradient")))
        })
        .collect::<Result<Vec<_>>>()?;

    let c = state.config;
    state.t += 1;
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    for (name, g) in grads {
        let p = params.get(&name)?;
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let mut values = p.values().to_vec();
        for i in 0..values.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        let shape = p.shape().to_vec();
        params.insert(name, Tensor::param(&shape, values)?);
    }
    Ok(())
}

/// One supervised example: a reference image, its paired views and the
/// reference-view depth.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub intrinsics: CameraIntrinsics,
    pub reference: Tensor,
    pub paired: Vec<PairedView>,
    pub gt: DepthMap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Paired views used per sample; a random subset is drawn each time.
    pub views_per_sample: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 2,
            lambda: DEFAULT_LAMBDA,
            adam: AdamConfig::default(),
            seed: 0,
            views_per_sample: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub initial: f64,
    pub refined: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub curve: Vec<LossRow>,
}

/// Forward one sample and return its loss.
pub fn sample_loss(network: &Network, sample: &TrainingSample, paired: &[PairedView], lambda: f64) -> Result<Loss> {
    let gt = supervision_mask(&sample.gt, &network.config);
    let out = network.forward(&sample.intrinsics, &sample.reference, paired)?;
    compute_loss(&out.initial.depth, &out.refined.depth, &gt, lambda)
}

fn draw_views(rng: &mut ChaCha8Rng, sample: &TrainingSample, count: usize) -> Vec<PairedView> {
    let n = sample.paired.len();
    rand::seq::index::sample(rng, n, count.min(n))
        .into_iter()
        .map(|i| sample.paired[i].clone())
        .collect()
}

/// Train a freshly initialized network. Deterministic in `opts.seed`:
/// the same seed reproduces every parameter bit for bit.
pub fn train(
    config: NetworkConfig,
    dataset: &[TrainingSample],
    opts: &TrainOptions,
    mut on_step: impl FnMut(&LossRow),
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if opts.batch_size == 0 || opts.views_per_sample == 0 {
        return Err(Error::invalid("batch size and views per sample must be positive"));
    }
    if let Some(i) = dataset.iter().position(|s| s.paired.is_empty()) {
        return Err(Error::invalid(format!("training sample {i} has no paired views")));
    }
    let mut network = Network::new(config, opts.seed)?;
    let mut adam = AdamState::new(opts.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0x5eed));
    let mut curve = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        network.params.zero_grad();
        let mut row = LossRow {
            step,
            loss: 0.0,
            initial: 0.0,
            refined: 0.0,
        };
        let share = 1.0 / opts.batch_size as f64;
        for _ in 0..opts.batch_size {
            let sample = &dataset[rng.random_range(0..dataset.len())];
            let paired = draw_views(&mut rng, sample, opts.views_per_sample);
            let loss = sample_loss(&network, sample, &paired, opts.lambda)
                .map_err(|e| annotate(e, step))?;
            if !loss.report.total.is_finite() {
                return Err(Error::NonFinite { op: "loss" });
            }
            loss.total.scale(share)?.backward().map_err(|e| annotate(e, step))?;
            row.loss += share * loss.report.total;
            row.initial += share * loss.report.initial;
            row.refined += share * loss.report.refined;
        }
        adam_step(&mut network.params, &mut adam)?;
        on_step(&row);
        curve.push(row);
    }
    Ok(TrainOutcome { network, curve })
}

fn annotate(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::InvalidState(format!("non-finite value from `{op}` at step {step}")),
        other => other,
    }
}

/// Mean loss over the first and last `window` rows.
pub fn smoothed_endpoints(curve: &[LossRow], window: usize) -> Option<(f64, f64)> {
    if curve.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(curve.len());
    let mean = |rows: &[LossRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    Some((mean(&curve[..w]), mean(&curve[curve.len() - w..])))
}

pub fn format_loss_curve(curve: &[LossRow]) -> String {
    let mut out = String::from("step,loss,initial,refined\n");
    for r in curve {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.loss, r.initial, r.refined);
    }
    out
}

/// Refined-depth metrics and confidence of both probability volumes for one
/// sample.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub depth: DepthMap,
    pub metrics: DepthMetrics,
    pub initial: ConfidenceReport,
    pub refined: ConfidenceReport,
}

pub fn evaluate(network: &Network, sample: &TrainingSample) -> Result<Evaluation> {
    let out = network.forward(&sample.intrinsics, &sample.reference, &sample.paired)?;
    let depth = out.refined_depth()?;
    Ok(Evaluation {
        metrics: depth_metrics(&depth, &sample.gt)?,
        initial: confidence(&out.initial.prob)?,
        refined: confidence(&out.refined.prob)?,
        depth,
    })
}

/// Random-texture `size` x `size` sample with one sideways paired view and
/// gt depths spread over `[1, 2.8]`, for finite-difference checks.
pub fn gradcheck_sample(size: usize, seed: u64) -> Result<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let k = CameraIntrinsics::new(s, s, (s - 1.0) / 2.0, (s - 1.0) / 2.0, size, size)?;
    let mut img = || {
        let v = (0..size * size).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(&[1, 1, size, size], v)
    };
    let reference = img()?;
    let paired = vec![PairedView {
        image: img()?,
        pose: CameraPose::new(nalgebra::Matrix3::identity(), nalgebra::Vector3::new(0.1, 0.0, 0.0))?,
    }];
    let depth = (0..size * size).map(|i| 1.0 + (i % 7) as f64 * 0.3).collect();
    Ok(TrainingSample {
        intrinsics: k,
        reference,
        paired,
        gt: DepthMap::from_values(size, size, depth)?,
    })
}

/// A network whose zero-initialized tensors are randomized, so every
/// parameter has a non-trivial gradient.
pub fn gradcheck_network(config: NetworkConfig, seed: u64) -> Result<Network> {
    let mut network = Network::new(config, seed)?;
    network.params.perturb_zero_init(&config, seed.wrapping_add(1), 0.1)?;
    Ok(network)
}

/// Per-tensor result of [`pipeline_grad_check`].
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub report: GradCheckReport,
}

/// Central-difference check of the full forward pass plus loss with respect to
/// `per_tensor` evenly spaced entries of every parameter tensor.
pub fn pipeline_grad_check(
    network: &Network,
    sample: &TrainingSample,
    lambda: f64,
    h: f64,
    per_tensor: usize,
) -> Result<Vec<ParamCheck>> {
    network.params.zero_grad();
    sample_loss(network, sample, &sample.paired, lambda)?.total.backward()?;
    let frozen = network.params.frozen();
    let mut checks = Vec::new();
    for (name, p) in network.params.iter() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let n = p.numel();
        let picks = per_tensor.min(n);
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_index: 0,
            checked: 0,
        };
        for j in 0..picks {
            let i = j * n / picks + (n / picks) / 2;
            let eval = |delta: f64| -> Result<f64> {
                let mut values = p.values().to_vec();
                values[i] += delta;
                let mut params = frozen.clone();
                params.insert(name.clone(), Tensor::new(p.shape(), values)?);
                let probe = Network {
                    config: network.config,
                    params,
                };
                Ok(sample_loss(&probe, sample, &sample.paired, lambda)?.report.total)
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = i;
            }
            report.checked += 1;
        }
        checks.push(ParamCheck {
            name: name.clone(),
            report,
        });
    }
    network.params.zero_grad();
    Ok(checks)
}
