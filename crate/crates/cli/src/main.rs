use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use planesweep::data::{
    generate_dataset, load_depth, read_scene, save_depth, write_scene, Layout, SceneSpec, DEPTH_FILE,
};
use planesweep::geometry::SamplingMode;
use planesweep::metrics::{depth_metrics_with, metrics_csv, DepthMetrics, DEFAULT_COMPLETENESS_THRESHOLD};
use planesweep::network::{
    load_checkpoint, save_checkpoint, CostVariant, KeyValues, Network, NetworkConfig,
};
use planesweep::tensor::{op_suite, SUITE_STEP};
use planesweep::trainer::{
    evaluate, format_loss_curve, gradcheck_network, gradcheck_sample, pipeline_grad_check, smoothed_endpoints, train,
    AdamConfig, TrainOptions, TrainingSample, DEFAULT_LAMBDA,
};

const LOSS_FILE: &str = "loss.csv";
const META_FILE: &str = "meta.txt";
const INITIAL_DEPTH_FILE: &str = "depth_initial.pfm";

#[derive(Parser)]
#[command(name = "planesweep", version, about = "Learned plane-sweep stereo on synthetic multi-view scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes with exact reference depth.
    Generate(GenerateArgs),
    /// Train a network and write a checkpoint plus its loss curve.
    Train(TrainArgs),
    /// Predict reference depth for one scene.
    Infer(InferArgs),
    /// Compare predicted depth maps with ground truth and print CSV rows.
    Eval(EvalArgs),
    /// Train and evaluate the cost-variant, aggregation and sampling variants.
    Ablate(AblateArgs),
    /// Finite-difference check of every op and of the full pipeline.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SceneArgs {
    /// Layout: planes, box-room or sphere-field.
    #[arg(long = "spec", default_value = "planes", value_parser = parse_layout)]
    layout: Layout,
    /// Paired views per scene.
    #[arg(long, default_value_t = 2)]
    n_views: usize,
    /// Standard deviation of pixel noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Side of the centred textureless patch as a fraction of the image.
    #[arg(long, default_value_t = 0.0)]
    textureless_patch: f64,
}

impl SceneArgs {
    fn spec(&self) -> SceneSpec {
        SceneSpec {
            paired_views: self.n_views,
            noise: self.noise,
            textureless_patch: self.textureless_patch,
            ..SceneSpec::toy(self.layout)
        }
    }
}

fn parse_layout(s: &str) -> std::result::Result<Layout, String> {
    Layout::parse(s).map_err(|e| e.to_string())
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of scenes. With more than one, scene `s` goes to `<out>/scene_<s>`.
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` file with network keys and optionally steps,
    /// batch_size, lambda, lr, seed and views_per_sample.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene directory, or a directory of scene directories. Without it a
    /// synthetic training set is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    scene: SceneArgs,
    /// Synthetic training scenes (seeds `scene-seed..scene-seed+scenes`).
    #[arg(long, default_value_t = 50)]
    scenes: u64,
    #[arg(long, default_value_t = 0)]
    scene_seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    views_per_sample: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Use paired views 1..=N (default: all).
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted depth: a PFM file, a directory holding `depth.pfm`, or a
    /// directory of such directories.
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth, laid out like `--pred`.
    #[arg(long)]
    gt: PathBuf,
    /// Relative error below which a pixel counts as complete.
    #[arg(long, default_value_t = DEFAULT_COMPLETENESS_THRESHOLD)]
    threshold: f64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 20)]
    train_scenes: u64,
    #[arg(long, default_value_t = 5)]
    test_scenes: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    views_per_sample: usize,
    /// Also write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side of the pipeline check.
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// Entries checked per parameter tensor.
    #[arg(long, default_value_t = 3)]
    per_tensor: usize,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    ensure!(a.count >= 1, "--count must be at least 1");
    let spec = a.scene.spec();
    let seeds: Vec<u64> = (a.seed..a.seed + a.count).collect();
    let scenes = generate_dataset(&spec, &seeds)?;
    for s in &scenes {
        let dir = if a.count == 1 { a.out.clone() } else { a.out.join(format!("scene_{}", s.seed)) };
        write_scene(&dir, &s.scene).with_context(|| format!("writing {}", dir.display()))?;
    }
    eprintln!("wrote {} scene(s) to {}", scenes.len(), a.out.display());
    Ok(())
}

/// Scene directories under `path`: the directory itself if it holds a scene,
/// otherwise its subdirectories that do, sorted by name.
fn scene_dirs(path: &Path, marker: &str) -> Result<Vec<(String, PathBuf)>> {
    if path.join(marker).is_file() {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(name, path.to_path_buf())]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(path).with_context(|| format!("reading {}", path.display()))? {
        let p = entry?.path();
        if p.join(marker).is_file() {
            dirs.push((p.file_name().unwrap().to_string_lossy().into_owned(), p));
        }
    }
    dirs.sort();
    ensure!(!dirs.is_empty(), "no scenes (directories with {marker}) under {}", path.display());
    Ok(dirs)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config = NetworkConfig::toy();
    let mut opts = TrainOptions {
        views_per_sample: a.scene.n_views,
        ..TrainOptions::default()
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut map = KeyValues::parse(&text)?;
        config = config.update_from(&mut map)?;
        opts.steps = map.take_parsed("steps")?.unwrap_or(opts.steps);
        opts.batch_size = map.take_parsed("batch_size")?.unwrap_or(opts.batch_size);
        opts.lambda = map.take_parsed("lambda")?.unwrap_or(opts.lambda);
        opts.adam.lr = map.take_parsed("lr")?.unwrap_or(opts.adam.lr);
        opts.seed = map.take_parsed("seed")?.unwrap_or(opts.seed);
        opts.views_per_sample = map.take_parsed("views_per_sample")?.unwrap_or(opts.views_per_sample);
        map.finish().with_context(|| format!("in {}", path.display()))?;
    }
    opts.steps = a.steps.unwrap_or(opts.steps);
    opts.seed = a.seed.unwrap_or(opts.seed);
    opts.batch_size = a.batch_size.unwrap_or(opts.batch_size);
    opts.views_per_sample = a.views_per_sample.unwrap_or(opts.views_per_sample);
    opts.adam.lr = a.lr.unwrap_or(opts.adam.lr);
    opts.lambda = a.lambda.unwrap_or(opts.lambda);

    let samples = match &a.data {
        Some(dir) => scene_dirs(dir, "cameras.txt")?
            .iter()
            .map(|(_, p)| Ok(read_scene(p)?.full_sample()?))
            .collect::<Result<Vec<_>>>()?,
        None => {
            let seeds: Vec<u64> = (a.scene_seed..a.scene_seed + a.scenes).collect();
            generate_dataset(&a.scene.spec(), &seeds)?
                .iter()
                .map(|s| s.scene.full_sample())
                .collect::<planesweep::error::Result<Vec<_>>>()?
        }
    };
    eprintln!("training on {} scenes for {} steps", samples.len(), opts.steps);
    let start = Instant::now();
    let outcome = train(config, &samples, &opts, |r| {
        if (r.step + 1) % 100 == 0 {
            eprintln!("step {:>5}  loss {:.5}  ({:.0}s)", r.step + 1, r.loss, start.elapsed().as_secs_f64());
        }
    })?;
    save_checkpoint(&a.out, &config, &outcome.network.params)?;
    let curve = a.out.join(LOSS_FILE);
    fs::write(&curve, format_loss_curve(&outcome.curve)).with_context(|| format!("writing {}", curve.display()))?;
    if let Some((first, last)) = smoothed_endpoints(&outcome.curve, 50) {
        println!("smoothed loss {first:.5} -> {last:.5}");
    }
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn load_network(dir: &Path) -> Result<Network> {
    let (config, params) = load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    Ok(Network::from_parts(config, params.frozen())?)
}

fn infer(a: InferArgs) -> Result<()> {
    let network = load_network(&a.checkpoint)?;
    let scene = read_scene(&a.scene).with_context(|| format!("reading scene {}", a.scene.display()))?;
    let views = a.views.unwrap_or(scene.paired_count());
    ensure!(
        (1..=scene.paired_count()).contains(&views),
        "--views {views} is out of range; the scene has {} paired views",
        scene.paired_count()
    );
    let chosen: Vec<usize> = (1..=views).collect();
    let sample = scene.sample(&chosen)?;
    let out = network.forward(&sample.intrinsics, &sample.reference, &sample.paired)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_depth(&a.out.join(DEPTH_FILE), &out.refined_depth()?)?;
    save_depth(&a.out.join(INITIAL_DEPTH_FILE), &out.initial_depth()?)?;
    let list: Vec<String> = chosen.iter().map(|v| v.to_string()).collect();
    let meta = format!(
        "views = {views}\npaired_views = {}\nscene = {}\ncheckpoint = {}\n",
        list.join(","),
        a.scene.display(),
        a.checkpoint.display()
    );
    fs::write(a.out.join(META_FILE), meta)?;
    println!("wrote depth from {views} paired view(s) to {}", a.out.display());
    Ok(())
}

fn depth_files(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    if path.is_file() {
        let name = path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(name, path.to_path_buf())]);
    }
    Ok(scene_dirs(path, DEPTH_FILE)?
        .into_iter()
        .map(|(name, dir)| (name, dir.join(DEPTH_FILE)))
        .collect())
}

fn eval(a: EvalArgs) -> Result<()> {
    let preds = depth_files(&a.pred)?;
    let gts = depth_files(&a.gt)?;
    let pairs: Vec<_> = if preds.len() == 1 && gts.len() == 1 {
        vec![(preds[0].0.clone(), preds[0].1.clone(), gts[0].1.clone())]
    } else {
        preds
            .iter()
            .map(|(name, p)| {
                let gt = gts
                    .iter()
                    .find(|(n, _)| n == name)
                    .with_context(|| format!("no ground truth for `{name}` under {}", a.gt.display()))?;
                Ok((name.clone(), p.clone(), gt.1.clone()))
            })
            .collect::<Result<_>>()?
    };
    let mut rows = Vec::new();
    for (name, p, g) in pairs {
        let pred = load_depth(&p).with_context(|| format!("reading {}", p.display()))?;
        let gt = load_depth(&g).with_context(|| format!("reading {}", g.display()))?;
        let m = depth_metrics_with(&pred, &gt, a.threshold).with_context(|| format!("scoring `{name}`"))?;
        rows.push((name, m));
    }
    let csv = metrics_csv(&rows)?;
    match &a.out {
        Some(path) => fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let spec = SceneSpec {
        paired_views: 2,
        ..SceneSpec::toy(Layout::TexturedPlanes)
    };
    let train_seeds: Vec<u64> = (0..a.train_scenes).collect();
    let test_seeds: Vec<u64> = (1000..1000 + a.test_scenes).collect();
    let to_samples = |seeds: &[u64]| -> Result<Vec<TrainingSample>> {
        generate_dataset(&spec, seeds)?
            .iter()
            .map(|s| Ok(s.scene.full_sample()?))
            .collect()
    };
    let train_set = to_samples(&train_seeds)?;
    let test_set = to_samples(&test_seeds)?;
    let base = NetworkConfig::toy();
    let variants = [
        ("concat+agg+inverse", base),
        ("abs-diff", NetworkConfig { cost_variant: CostVariant::AbsDiff, ..base }),
        ("no-aggregation", NetworkConfig { aggregation: false, ..base }),
        (
            "uniform-sampling",
            NetworkConfig {
                sampling: SamplingMode::UniformDepth { d_max: base.depth_range().1 },
                ..base
            },
        ),
    ];
    let opts = TrainOptions {
        steps: a.steps,
        seed: a.seed,
        views_per_sample: a.views_per_sample,
        adam: AdamConfig::default(),
        lambda: DEFAULT_LAMBDA,
        ..TrainOptions::default()
    };
    let mut csv = String::from("variant,abs_rel,sq_rel,rmse,a1,first_loss,last_loss\n");
    println!(
        "{:<20} {:>8} {:>8} {:>8} {:>6} {:>10} {:>10}",
        "variant", "abs_rel", "sq_rel", "rmse", "a1", "first_loss", "last_loss"
    );
    for (name, config) in variants {
        let outcome = train(config, &train_set, &opts, |_| {})?;
        let network = Network::from_parts(config, outcome.network.params.frozen())?;
        let rows = test_set
            .iter()
            .map(|s| Ok(evaluate(&network, s)?.metrics))
            .collect::<Result<Vec<_>>>()?;
        let m = DepthMetrics::mean(&rows)?;
        let window = (a.steps / 10).max(1);
        let (first, last) = smoothed_endpoints(&outcome.curve, window).unwrap_or((f64::NAN, f64::NAN));
        println!(
            "{name:<20} {:>8.4} {:>8.4} {:>8.4} {:>6.3} {first:>10.5} {last:>10.5}",
            m.abs_rel, m.sq_rel, m.rmse, m.a1
        );
        csv.push_str(&format!("{name},{},{},{},{},{first},{last}\n", m.abs_rel, m.sq_rel, m.rmse, m.a1));
    }
    if let Some(path) = &a.out {
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let start = Instant::now();
    let mut failures = 0;
    for c in op_suite(a.seed)? {
        let ok = c.passed();
        failures += usize::from(!ok);
        println!(
            "{:<28} max rel err {:.3e}  (< {:.0e})  {}",
            c.name,
            c.report.max_rel_error,
            c.tolerance(),
            if ok { "ok" } else { "FAIL" }
        );
    }
    let config = NetworkConfig::toy();
    let network = gradcheck_network(config, a.seed)?;
    let sample = gradcheck_sample(a.size, a.seed)?;
    let tolerance = 1e-3;
    for c in pipeline_grad_check(&network, &sample, DEFAULT_LAMBDA, SUITE_STEP, a.per_tensor)? {
        let ok = c.report.max_rel_error < tolerance;
        failures += usize::from(!ok);
        println!(
            "pipeline {:<19} max rel err {:.3e}  (< {tolerance:.0e})  {}",
            c.name,
            c.report.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!("finished in {:.1}s", start.elapsed().as_secs_f64());
    if failures > 0 {
        bail!("{failures} gradient check(s) failed");
    }
    Ok(())
}
