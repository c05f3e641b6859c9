//! `pointgraph`: one entry point for the whole pipeline, from mesh sampling
//! to training, evaluation, graph export and sweeps.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Every subcommand
//! is reproducible from its flags alone; `POINTGRAPH_THREADS` caps the rayon
//! pool (0 or unset picks the core count).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::builder::PossibleValuesParser;
use clap::{ArgGroup, Args, Parser, Subcommand};
use ndarray::{Array1, Array2};

use pointgraph::dataset::SplitKind;
use pointgraph::harness;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use pointgraph::model::{self, GraphMode, ModelParams};
use pointgraph::nn::softmax_cross_entropy;
use pointgraph::{
    finite_diff_check, knn_kdtree, load_checkpoint, load_config, pairwise_distances, project,
    save_checkpoint, save_config, shared_edge_percentage, stress, stress_squared_grad,
    DirectedGraph, PointCloud, SweepAxis,
};

#[derive(Parser)]
#[command(
    name = "pointgraph",
    version,
    about = "Pointcloud classification with learned k-NN graphs",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a point cloud uniformly from an OFF mesh surface
    Sample(SampleArgs),
    /// Train one model per configured seed and write all artifacts
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Build and export the k-NN graph of a cloud
    Graph(GraphArgs),
    /// Print the shared-edge percentage between two exported graphs
    CompareGraphs(CompareGraphsArgs),
    /// Kruskal stress between a cloud and mapped features
    Stress(StressArgs),
    /// Check analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Chart mapped features on the plane of the coordinate-extreme anchors
    Project(ProjectArgs),
    /// Sweep d_graph or gamma over a base config
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SampleArgs {
    /// Input OFF mesh
    #[arg(long = "in", value_name = "MESH.OFF")]
    input: PathBuf,
    /// Number of points to sample
    #[arg(long, default_value_t = 1024)]
    n: usize,
    /// Sampling seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output cloud CSV (x,y,z rows)
    #[arg(long, value_name = "CLOUD.CSV")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config JSON
    #[arg(long, value_name = "CFG.JSON")]
    config: PathBuf,
    /// Output directory for checkpoints and metrics
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint written by `train`
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// Dataset split to evaluate
    #[arg(long, default_value = "test")]
    split: SplitKind,
    /// Config JSON; defaults to the checkpoint's sidecar `<CKPT>.json`
    #[arg(long, value_name = "CFG.JSON")]
    config: Option<PathBuf>,
}

#[derive(Args)]
#[command(group = ArgGroup::new("features").required(true))]
struct GraphArgs {
    /// Input cloud CSV
    #[arg(long, value_name = "CLOUD.CSV")]
    cloud: PathBuf,
    /// Neighbors per node
    #[arg(long, default_value_t = 16)]
    k: usize,
    /// Build the graph in the checkpoint's mapped feature space
    #[arg(long, group = "features", value_name = "CKPT")]
    checkpoint: Option<PathBuf>,
    /// Build the graph over raw xyz
    #[arg(long, group = "features")]
    baseline: bool,
    /// Output edge CSV (v,w rows)
    #[arg(long, value_name = "EDGES.CSV")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareGraphsArgs {
    /// First edge CSV
    a: PathBuf,
    /// Second edge CSV
    b: PathBuf,
}

#[derive(Args)]
struct StressArgs {
    /// Original cloud CSV (x,y,z rows)
    #[arg(long, value_name = "CLOUD.CSV")]
    cloud: PathBuf,
    /// Mapped feature CSV, one row per point
    #[arg(long, value_name = "MAPPED.CSV")]
    mapped: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Experiment config JSON; the first training cloud is probed
    #[arg(long, value_name = "CFG.JSON")]
    config: PathBuf,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Maximum relative error accepted
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Probe at most this many coordinates (0 = all)
    #[arg(long, default_value_t = 0)]
    max_coords: usize,
}

#[derive(Args)]
struct ProjectArgs {
    /// Input cloud CSV
    #[arg(long, value_name = "CLOUD.CSV")]
    cloud: PathBuf,
    /// Checkpoint providing the feature mapping
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// Output CSV (label,x,y; anchors labeled A-F)
    #[arg(long, value_name = "PROJ.CSV")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Base experiment config JSON
    #[arg(long, value_name = "CFG.JSON")]
    config: PathBuf,
    /// Swept parameter
    #[arg(long, value_parser = PossibleValuesParser::new(["d_graph", "gamma"]))]
    axis: String,
    /// Comma-separated axis values, e.g. 0,0.0001,0.01,10
    #[arg(long)]
    values: String,
    /// Directory for table.csv and table.txt (tables always print to stdout)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

/// Marker for problems that are the caller's fault (exit 1, not 2).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    if let Err(err) = configure_threads().and_then(|()| dispatch(cli)) {
        eprintln!("error: {err:#}");
        let code = if err.downcast_ref::<UsageError>().is_some() { 1 } else { 2 };
        return ExitCode::from(code);
    }
    ExitCode::SUCCESS
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("POINTGRAPH_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| usage(format!("POINTGRAPH_THREADS must be a number, got {raw:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sample(args) => run_sample(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Graph(args) => run_graph(args),
        Command::CompareGraphs(args) => run_compare_graphs(args),
        Command::Stress(args) => run_stress(args),
        Command::Gradcheck(args) => run_gradcheck(args),
        Command::Project(args) => run_project(args),
        Command::Sweep(args) => run_sweep(args),
    }
}

/// Six significant digits, plain `0` for an exact zero.
fn sig6(x: f64) -> String {
    if x == 0.0 {
        "0".to_string()
    } else {
        format!("{x:.5e}")
    }
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    PointCloud::from_csv(&text).with_context(|| format!("parsing cloud {}", path.display()))
}

/// Numeric CSV with a fixed column count per file; a non-numeric first line
/// is treated as a header.
fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: Result<Vec<f64>, _> =
            line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) => {
                if let Some(first) = rows.first() {
                    if row.len() != first.len() {
                        bail!(
                            "{}:{}: row has {} columns, first row has {}",
                            path.display(),
                            idx + 1,
                            row.len(),
                            first.len()
                        );
                    }
                }
                rows.push(row);
            }
            Err(err) if rows.is_empty() && idx == 0 => {
                // Header line; tolerated, same as cloud CSVs.
                let _ = err;
            }
            Err(err) => bail!("{}:{}: bad number: {err}", path.display(), idx + 1),
        }
    }
    if rows.is_empty() {
        bail!("{}: no data rows", path.display());
    }
    let (n, d) = (rows.len(), rows[0].len());
    let mut out = Array2::zeros((n, d));
    for (i, row) in rows.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            out[[i, j]] = x;
        }
    }
    Ok(out)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating directory {}", parent.display()))?;
        }
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run_sample(args: SampleArgs) -> Result<()> {
    let bytes =
        fs::read(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let mesh = pointgraph::parse_off(&bytes)
        .with_context(|| format!("parsing {}", args.input.display()))?;
    let cloud = pointgraph::sample_surface(&mesh, args.n, args.seed)
        .with_context(|| format!("sampling {}", args.input.display()))?;
    write_file(&args.out, &cloud.to_csv())?;
    println!(
        "sampled {} points from {} ({} vertices, {} faces) -> {}",
        args.n,
        args.input.display(),
        mesh.n_vertices(),
        mesh.n_faces(),
        args.out.display()
    );
    Ok(())
}

fn eval_summary(metrics: &harness::EvalMetrics) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "overall accuracy = {:.2}", metrics.overall_accuracy);
    let _ = writeln!(out, "average class accuracy = {:.2}", metrics.avg_class_accuracy);
    let _ = writeln!(out, "mean stress = {}", sig6(metrics.mean_stress));
    let _ = writeln!(out, "shared edges = {:.2}", metrics.shared_edge_pct);
    out
}

fn run_train(args: TrainArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let dataset = config.load_split()?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating directory {}", args.out.display()))?;
    save_config(&args.out.join("config.json"), &config)?;

    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let output = harness::train(&config, &dataset, seed)
            .with_context(|| format!("training seed {seed}"))?;
        let seed_dir = args.out.join(format!("seed-{seed}"));
        fs::create_dir_all(&seed_dir)
            .with_context(|| format!("creating directory {}", seed_dir.display()))?;
        let ckpt = seed_dir.join("model.ckpt");
        save_checkpoint(&ckpt, &output.params)?;
        save_config(&seed_dir.join("model.ckpt.json"), &config)?;
        harness::write_metrics_jsonl(&seed_dir.join("metrics.jsonl"), &output.metrics.epochs)?;
        harness::write_run_summary(&seed_dir.join("summary.json"), &output.metrics)?;
        let m = &output.metrics.final_eval;
        println!(
            "seed {seed}: best epoch {}, test overall {:.2}, avg class {:.2}, stress {}, shared edges {:.2}",
            output.metrics.best_epoch,
            m.overall_accuracy,
            m.avg_class_accuracy,
            sig6(m.mean_stress),
            m.shared_edge_pct
        );
        runs.push(output.metrics);
    }

    let aggregate = harness::seed_average(&runs)?;
    let mut json = serde_json::to_vec_pretty(&aggregate)?;
    json.push(b'\n');
    fs::write(args.out.join("aggregate.json"), json)
        .with_context(|| format!("writing {}", args.out.join("aggregate.json").display()))?;
    println!(
        "aggregate over {} seeds: overall {:.2} [{:.2}, {:.2}], avg class {:.2}, stress {}, shared edges {:.2}",
        aggregate.n_runs,
        aggregate.mean.overall_accuracy,
        aggregate.min.overall_accuracy,
        aggregate.max.overall_accuracy,
        aggregate.mean.avg_class_accuracy,
        sig6(aggregate.mean.mean_stress),
        aggregate.mean.shared_edge_pct
    );
    Ok(())
}

fn sidecar_config(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    checkpoint.with_file_name(name)
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let params = load_checkpoint(&args.checkpoint)?;
    let config_path = args.config.clone().unwrap_or_else(|| sidecar_config(&args.checkpoint));
    let config = load_config(&config_path)
        .with_context(|| format!("loading config {} (pass --config to override)", config_path.display()))?;
    let dataset = config.load_split()?;
    let clouds = dataset.split(args.split);
    if clouds.is_empty() {
        bail!("the requested split is empty");
    }
    let metrics = harness::evaluate(&params, clouds)?;
    print!("{}", eval_summary(&metrics));
    Ok(())
}

fn run_graph(args: GraphArgs) -> Result<()> {
    let cloud = read_cloud(&args.cloud)?;
    if cloud.n_points() <= args.k {
        bail!("cloud has {} points, need more than k = {}", cloud.n_points(), args.k);
    }
    let features = match (&args.checkpoint, args.baseline) {
        (Some(ckpt), false) => {
            let params = load_checkpoint(ckpt)?;
            let (mapped, _) = model::map_features(&params.f, &cloud.input_matrix(), params.dims.mode)?;
            mapped
        }
        (None, true) => cloud.points.clone(),
        _ => unreachable!("clap group enforces exactly one source"),
    };
    let graph = knn_kdtree(&features, args.k)?;
    write_file(&args.out, &graph.to_csv())?;
    println!(
        "wrote {} edges ({} nodes, k = {}) -> {}",
        graph.n_edges(),
        graph.n_nodes(),
        args.k,
        args.out.display()
    );
    Ok(())
}

fn run_compare_graphs(args: CompareGraphsArgs) -> Result<()> {
    let read = |path: &Path| -> Result<DirectedGraph> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        DirectedGraph::from_csv(&text).with_context(|| format!("parsing {}", path.display()))
    };
    let shared = shared_edge_percentage(&read(&args.a)?, &read(&args.b)?)?;
    println!("{shared:.2}");
    Ok(())
}

fn run_stress(args: StressArgs) -> Result<()> {
    let cloud = read_matrix_csv(&args.cloud)?;
    if cloud.ncols() != 3 {
        bail!("{}: cloud must have 3 columns, found {}", args.cloud.display(), cloud.ncols());
    }
    let mapped = read_matrix_csv(&args.mapped)?;
    if mapped.nrows() != cloud.nrows() {
        bail!(
            "point count mismatch: {} cloud rows vs {} mapped rows",
            cloud.nrows(),
            mapped.nrows()
        );
    }
    let d = pairwise_distances(&cloud)?;
    let d_hat = pairwise_distances(&mapped)?;
    let value = stress(&d, &d_hat)?;
    println!("S = {}", sig6(value.s));
    println!("S^2 = {}", sig6(value.s_squared));
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    if args.step.is_nan() || args.step <= 0.0 {
        return Err(usage(format!("--step must be positive, got {}", args.step)));
    }
    let config = load_config(&args.config)?;
    let dataset = config.load_split()?;
    let cloud = dataset
        .train
        .first()
        .ok_or_else(|| anyhow!("config has an empty training split"))?;
    let label = cloud.label.ok_or_else(|| anyhow!("first training cloud has no label"))?;
    let input = cloud.input_matrix();
    let dims = config.model_dims(cloud.input_dim(), dataset.n_classes());
    // Mirrors training: the same seed yields the exact initial parameters
    // that `train` would start from.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds[0]);
    let params = ModelParams::init(dims, &mut rng)?;

    let base = model::forward(&params, &input)?;
    let logits_row = base
        .logits
        .clone()
        .into_shape_with_order((1, dims.d_classes))
        .map_err(|e| anyhow!("{e}"))?;
    let (_, dlogits_rows) = softmax_cross_entropy(&logits_row, &[label])?;
    let dlogits: Array1<f64> = dlogits_rows.row(0).to_owned();
    let needs_stress = config.gamma > 0.0 && dims.mode == GraphMode::Learned;
    let stress_grad = if needs_stress {
        Some(stress_squared_grad(&cloud.points, &base.mapped)?)
    } else {
        None
    };
    let grads = model::backward(&params, &base, &dlogits, config.gamma, stress_grad.as_ref())?;

    let flat = params.to_flat();
    let flat_grads = grads.to_flat();
    let base_graph = base.graph.clone();
    let tie_flips = std::cell::Cell::new(0usize);
    let mut scratch = params.clone();
    let loss_fn = |probe: &[f64]| -> f64 {
        scratch.copy_from_flat(probe).expect("probe matches the model shape");
        let caches = model::forward(&scratch, &input).expect("forward on probe parameters");
        if caches.graph != base_graph {
            tie_flips.set(tie_flips.get() + 1);
        }
        let logits = caches
            .logits
            .clone()
            .into_shape_with_order((1, dims.d_classes))
            .expect("logit row");
        let (task, _) = softmax_cross_entropy(&logits, &[label]).expect("finite loss");
        let s2 = if needs_stress {
            stress_squared_grad(&cloud.points, &caches.mapped).expect("stress").s_squared
        } else {
            0.0
        };
        task + config.gamma * s2
    };

    let total = flat.len();
    let max_coords = if args.max_coords == 0 { total } else { args.max_coords };
    let worst = finite_diff_check(loss_fn, &flat, &flat_grads, args.step, max_coords)?;
    let budget = max_coords.max(256).min(total);
    let stride = total.div_ceil(budget).max(1);
    let checked = total.div_ceil(stride);
    println!("checked {checked} of {total} coordinates");
    println!("max relative error = {worst:.3e}");
    println!("neighbor tie flips = {}", tie_flips.get());
    if tie_flips.get() > 0 {
        bail!("neighbor selection changed under probing; move the probe point or shrink --step");
    }
    if worst >= args.tol {
        bail!("max relative error {worst:.3e} exceeds tolerance {:.3e}", args.tol);
    }
    println!("ok");
    Ok(())
}

fn run_project(args: ProjectArgs) -> Result<()> {
    let cloud = read_cloud(&args.cloud)?;
    let params = load_checkpoint(&args.checkpoint)?;
    let (mapped, _) = model::map_features(&params.f, &cloud.input_matrix(), params.dims.mode)?;
    let projection = project(&cloud.points, &mapped)?;
    write_file(&args.out, &projection.to_csv())?;
    println!("projected {} points -> {}", cloud.n_points(), args.out.display());
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let trimmed: Vec<&str> =
        args.values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if trimmed.is_empty() {
        return Err(usage("--values must list at least one value"));
    }
    let axis = match args.axis.as_str() {
        "d_graph" => SweepAxis::DGraph(
            trimmed
                .iter()
                .map(|v| v.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| usage(format!("bad d_graph value: {e}")))?,
        ),
        "gamma" => SweepAxis::Gamma(
            trimmed
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| usage(format!("bad gamma value: {e}")))?,
        ),
        other => return Err(usage(format!("unknown axis {other:?}"))),
    };
    let table = harness::sweep(&config, &axis)?;
    print!("{}", table.to_text());
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))?;
        write_file(&dir.join("table.csv"), &table.to_csv())?;
        write_file(&dir.join("table.txt"), &table.to_text())?;
        println!("wrote {}/table.csv and table.txt", dir.display());
    }
    Ok(())
}
