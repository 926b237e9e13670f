use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{Matrix3, Vector3};

use regaccel::cloud_io::{load_cloud, save_cloud};
use regaccel::dse::{self, calibrate_quantconv_loop, explore, roofline, Core, DseConfig, Grid};
use regaccel::featnet::{FeatNetWeights, QuantFeatNet};
use regaccel::icp::icp_pt2pt;
use regaccel::lie::ApplyMode;
use regaccel::metrics::{chamfer, iso_error};
use regaccel::oracle::MomentFeatures;
use regaccel::pointlk::{self, JacobianMethod, LkOptions, RegistrationResult};
use regaccel::reagent::{self, random_states, ActorWeights, Actors, FloatActor, Head, ReAgentOptions};
use regaccel::synth::{gen_pair, trial_seed, PairSpec, Shape};
use regaccel::weights::WeightFile;
use regaccel::{FeatureExtractor, PointCloud, RigidTransform};

#[derive(Parser)]
#[command(
    name = "regaccel",
    version,
    about = "Correspondence-free point cloud registration toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded source/template pair and its ground truth.
    Gen(GenArgs),
    /// Register one pair and print the per-iteration error history as CSV.
    Register(RegisterArgs),
    /// Time registration over a sweep of cloud sizes.
    Benchmark(BenchArgs),
    /// Search the accelerator design space and emit the frontier as CSV.
    Dse(DseArgs),
    /// Create or inspect weight files.
    #[command(subcommand)]
    Weights(WeightsCommand),
}

#[derive(Args, Clone, Debug)]
struct PairArgs {
    /// Base shape used when no --base file is given.
    #[arg(long, default_value = "table")]
    shape: String,
    /// Point cloud file to subsample instead of a synthetic shape.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Points per cloud.
    #[arg(long, default_value_t = 1024)]
    n: usize,
    /// Size of the synthetic base shape (defaults to N).
    #[arg(long)]
    base_points: Option<usize>,
    /// Maximum Euler angle per axis, degrees.
    #[arg(long, default_value_t = 45.0)]
    theta: f64,
    /// Maximum translation per axis.
    #[arg(long, default_value_t = 0.5)]
    tmax: f64,
    #[arg(long, default_value_t = 0.01)]
    rstd: f64,
    #[arg(long, default_value_t = 0.05)]
    rclip: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl PairArgs {
    fn spec(&self, seed: u64, n: usize) -> PairSpec {
        PairSpec {
            n,
            theta_max: self.theta,
            t_max: self.tmax,
            r_std: self.rstd,
            r_clip: self.rclip,
            seed,
        }
    }

    fn base(&self, seed: u64, n: usize) -> Result<PointCloud> {
        match &self.base {
            Some(path) => load_cloud(path).with_context(|| format!("reading {}", path.display())),
            None => {
                let shape = Shape::from_str(&self.shape)?;
                Ok(shape.sample(self.base_points.unwrap_or(n), seed)?)
            }
        }
    }

    fn pair(&self, seed: u64, n: usize) -> Result<regaccel::synth::Pair> {
        let base = self.base(seed, n)?;
        Ok(gen_pair(&self.spec(seed, n), &base)?)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// Output directory for source.txt, template.txt and g_star.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Pointlk,
    Reagent,
    Icp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Backbone {
    Moments,
    Pointnet,
}

#[derive(Args, Clone, Debug)]
struct SolverArgs {
    #[arg(long, value_enum, default_value = "pointlk")]
    method: Method,
    #[arg(long, value_enum, default_value = "moments")]
    backbone: Backbone,
    /// forward, backward, central or five_point.
    #[arg(long, default_value = "central")]
    jacobian: String,
    /// LLT bit width for randomly generated pointnet weights.
    #[arg(long, default_value_t = 8)]
    bits: u32,
    /// Points per tile in the pointnet extractor.
    #[arg(long, default_value_t = 32)]
    tile: usize,
    /// Iterations (default 20 for pointlk, 10 for reagent, 50 for icp).
    #[arg(long)]
    iters: Option<usize>,
    /// Highest moment order for the moment backbone.
    #[arg(long, default_value_t = 3)]
    moment_order: usize,
    /// Center both clouds on their centroids before pointlk.
    #[arg(long)]
    center: bool,
    /// Weight file for the pointnet backbone and reagent actors.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Source cloud file (generated from the pair options when absent).
    #[arg(long, requires = "template")]
    source: Option<PathBuf>,
    #[arg(long, requires = "source")]
    template: Option<PathBuf>,
    /// Ground-truth transform file for loaded pairs.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Convergence threshold on the pointlk update norm.
    #[arg(long, default_value_t = pointlk::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Write the history CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Comma-separated cloud sizes.
    #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096,8192")]
    sizes: Vec<usize>,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "pointlk,reagent,icp")]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 3)]
    trials: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DseArgs {
    #[arg(long, default_value = "pointlk")]
    model: String,
    /// Key-value constants file; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Largest tile size in the grid.
    #[arg(long, default_value_t = 64)]
    max_tile: u64,
    /// Frontier CSV path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fit the QuantConv loop latency to this PointNetLK latency in ms and
    /// print the resulting config instead of searching.
    #[arg(long)]
    calibrate: Option<f64>,
    /// Print the effective constants as a config file and exit.
    #[arg(long, conflicts_with = "calibrate")]
    print_config: bool,
}

#[derive(Subcommand)]
enum WeightsCommand {
    /// Write seeded random weights (extractor plus both actor heads).
    GenRandom {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        bits: u32,
        /// Omit the actor heads.
        #[arg(long)]
        featnet_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the tensors in a weight file and check that it loads.
    Inspect { file: PathBuf },
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_transform(path: &Path, g: &RigidTransform) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let m = g.to_matrix();
    for r in 0..4 {
        writeln!(w, "{:?} {:?} {:?} {:?}", m[(r, 0)], m[(r, 1)], m[(r, 2)], m[(r, 3)])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a 3×4 or 4×4 row-major matrix.
fn read_transform(path: &Path) -> Result<RigidTransform> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .with_context(|| format!("bad number '{t}' in {}", path.display()))
        })
        .collect::<Result<_>>()?;
    if values.len() != 12 && values.len() != 16 {
        bail!("{}: expected 12 or 16 numbers, found {}", path.display(), values.len());
    }
    let at = |r: usize, c: usize| values[4 * r + c];
    let rotation = Matrix3::from_fn(at);
    Ok(RigidTransform::new(
        rotation,
        Vector3::new(at(0, 3), at(1, 3), at(2, 3)),
    ))
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let pair = args.pair.pair(args.pair.seed, args.pair.n)?;
    std::fs::create_dir_all(&args.out)?;
    save_cloud(&args.out.join("source.txt"), &pair.source)?;
    save_cloud(&args.out.join("template.txt"), &pair.template)?;
    write_transform(&args.out.join("g_star.txt"), &pair.g_star)?;
    eprintln!("wrote {} points per cloud to {}", args.pair.n, args.out.display());
    Ok(())
}

/// Loaded solver state shared across runs.
struct Solver {
    args: SolverArgs,
    extractor: Box<dyn FeatureExtractor>,
    actors: Option<(ActorWeights, ActorWeights)>,
}

impl Solver {
    fn new(args: &SolverArgs, seed: u64) -> Result<Self> {
        let file = match &args.weights {
            Some(p) => Some(WeightFile::load(p).with_context(|| format!("loading weights {}", p.display()))?),
            None => None,
        };
        let extractor: Box<dyn FeatureExtractor> = match args.backbone {
            Backbone::Moments => Box::new(MomentFeatures::new(args.moment_order)?),
            Backbone::Pointnet => {
                let w = match &file {
                    Some(f) => f.featnet()?,
                    None => FeatNetWeights::random(seed, args.bits)?,
                };
                Box::new(QuantFeatNet::new(w, args.tile))
            }
        };
        let actors = if args.method == Method::Reagent && args.backbone == Backbone::Pointnet {
            Some(match &file {
                Some(f) if f.has_actor(Head::Translation) && f.has_actor(Head::Rotation) => {
                    (f.actor(Head::Translation)?, f.actor(Head::Rotation)?)
                }
                _ => random_actors(seed, args.bits)?,
            })
        } else {
            None
        };
        Ok(Self {
            args: args.clone(),
            extractor,
            actors,
        })
    }

    fn run(
        &self,
        source: &PointCloud,
        template: &PointCloud,
        gt: Option<&RigidTransform>,
        epsilon: f64,
    ) -> Result<RegistrationResult> {
        let a = &self.args;
        Ok(match a.method {
            Method::Pointlk => {
                let opts = LkOptions {
                    max_iters: a.iters.unwrap_or(pointlk::DEFAULT_ITERS),
                    epsilon,
                    method: JacobianMethod::from_str(&a.jacobian)?,
                    ..Default::default()
                };
                if a.center {
                    pointlk::register_centered(source, template, self.extractor.as_ref(), &opts)?
                } else {
                    pointlk::register(source, template, self.extractor.as_ref(), &opts)?
                }
            }
            Method::Reagent => {
                let opts = ReAgentOptions {
                    max_iters: a.iters.unwrap_or(reagent::DEFAULT_ITERS),
                    ..Default::default()
                };
                let actors = match (&self.actors, gt) {
                    (Some((t, r)), _) => Actors::Learned {
                        translation: t,
                        rotation: r,
                    },
                    (None, Some(target)) => Actors::Expert { target: *target },
                    (None, None) => {
                        bail!("reagent with the moment backbone runs the expert policy, which needs ground truth")
                    }
                };
                reagent::register(source, template, self.extractor.as_ref(), actors, &opts)?
            }
            Method::Icp => icp_pt2pt(source, template, a.iters.unwrap_or(50), 1e-9),
        })
    }
}

fn random_actors(seed: u64, bits: u32) -> Result<(ActorWeights, ActorWeights)> {
    let labels = reagent::ActionTable::default().labels();
    let states = random_states(seed ^ 0xac7, 32, 2 * regaccel::featnet::FEATURE_DIM);
    let head = |s: u64| FloatActor::random(s, 2 * regaccel::featnet::FEATURE_DIM, labels).quantize(bits, &states);
    Ok((head(seed ^ 0x71)?, head(seed ^ 0x72)?))
}

fn cmd_register(args: &RegisterArgs) -> Result<()> {
    let (source, template, gt) = match (&args.source, &args.template) {
        (Some(s), Some(t)) => {
            let gt = args.gt.as_deref().map(read_transform).transpose()?;
            (load_cloud(s)?, load_cloud(t)?, gt)
        }
        _ => {
            let pair = args.pair.pair(args.pair.seed, args.pair.n)?;
            (pair.source, pair.template, Some(pair.g_star))
        }
    };
    let solver = Solver::new(&args.solver, args.pair.seed)?;
    let result = solver.run(&source, &template, gt.as_ref(), args.epsilon)?;

    let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
    w.write_record(["iter", "rot_err_deg", "trans_err", "chamfer", "step_norm"])?;
    for (i, (g, norm)) in result.transforms.iter().zip(&result.twist_norms).enumerate() {
        let (rot, trans) = gt
            .map(|t| iso_error(g, &t))
            .map_or((String::new(), String::new()), |(r, t)| {
                (format!("{r:.9}"), format!("{t:.9}"))
            });
        let cd = chamfer(&g.apply(&source, ApplyMode::Standard), &template);
        w.write_record([
            (i + 1).to_string(),
            rot,
            trans,
            format!("{cd:.9}"),
            format!("{norm:.9e}"),
        ])?;
    }
    w.flush()?;

    let moved = result.transform.apply(&source, ApplyMode::Standard);
    let mut summary = format!(
        "method={:?} iterations={} converged={} chamfer={:.9}",
        args.solver.method,
        result.iterations,
        result.converged,
        chamfer(&moved, &template)
    );
    if let Some(t) = gt {
        let (rot, trans) = iso_error(&result.transform, &t);
        summary.push_str(&format!(" rot_err_deg={rot:.6} trans_err={trans:.6}"));
    }
    eprintln!("{summary}");
    Ok(())
}

fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

fn cmd_benchmark(args: &BenchArgs) -> Result<()> {
    if args.sizes.is_empty() || args.trials == 0 {
        bail!("need at least one size and one trial");
    }
    let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
    w.write_record([
        "method",
        "backbone",
        "N",
        "trial",
        "seconds",
        "iterations",
        "rot_err_deg",
        "trans_err",
    ])?;
    for &method in &args.methods {
        let solver_args = SolverArgs {
            method,
            ..args.solver.clone()
        };
        let solver = Solver::new(&solver_args, args.pair.seed)?;
        let mut medians = Vec::new();
        for &n in &args.sizes {
            let mut times = Vec::new();
            for trial in 0..args.trials {
                let pair = args.pair.pair(trial_seed(args.pair.seed, trial), n)?;
                let start = Instant::now();
                // Zero threshold: every run performs the full iteration count.
                let r = solver.run(&pair.source, &pair.template, Some(&pair.g_star), 0.0)?;
                let secs = start.elapsed().as_secs_f64();
                times.push(secs);
                let (rot, trans) = iso_error(&r.transform, &pair.g_star);
                w.write_record([
                    format!("{method:?}").to_lowercase(),
                    format!("{:?}", args.solver.backbone).to_lowercase(),
                    n.to_string(),
                    trial.to_string(),
                    format!("{secs:.6}"),
                    r.iterations.to_string(),
                    format!("{rot:.6}"),
                    format!("{trans:.6}"),
                ])?;
            }
            times.sort_by(f64::total_cmp);
            medians.push(times[times.len() / 2]);
        }
        if args.sizes.len() > 1 {
            let xs: Vec<f64> = args.sizes.iter().map(|&n| n as f64).collect();
            eprintln!(
                "{method:?}: log-log slope of median time vs N = {:.3}",
                loglog_slope(&xs, &medians)
            );
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_dse(args: &DseArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => DseConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => DseConfig::default(),
    };
    if args.print_config {
        let mut out = output(args.out.as_deref())?;
        out.write_all(cfg.to_kv_string().as_bytes())?;
        out.flush()?;
        return Ok(());
    }
    if let Some(target) = args.calibrate {
        let tuned = calibrate_quantconv_loop(&cfg, target);
        let (b, pp, po, _) = dse::table2_point(Core::PointLk);
        let ms = dse::evaluate(Core::PointLk, b, pp, po, None, &tuned, &tuned.budget())
            .model
            .millis(&tuned);
        eprintln!(
            "quantconv_c_loop = {} gives {ms:.3} ms at the published PointNetLK point",
            tuned.quantconv_c_loop
        );
        let mut out = output(args.out.as_deref())?;
        out.write_all(tuned.to_kv_string().as_bytes())?;
        out.flush()?;
        return Ok(());
    }
    let core = Core::from_str(&args.model)?;
    if args.max_tile == 0 {
        bail!("--max-tile must be at least 1");
    }
    let grid = Grid {
        tiles: (1..=args.max_tile).collect(),
        ..Grid::default()
    };
    let result = explore(core, &cfg, &cfg.budget(), &grid)?;
    dse::write_frontier_csv(output(args.out.as_deref())?, &result.frontier, &cfg)?;

    let best = &result.best;
    let m = &best.model;
    let r = roofline(m.ops, m.cycles as f64, m.bytes as f64, cfg.freq_hz, cfg.bandwidth);
    eprintln!(
        "best {core}: B={} P_p={} P_o={}{} cycles={} ({:.3} ms) DSP={} BRAM={} URAM={} perf={:.1} Gops/s {:?}-bound, {} points",
        best.b,
        best.p_p,
        best.p_o,
        best.p_actor.map(|a| format!(" P_actor={a}")).unwrap_or_default(),
        m.cycles,
        m.millis(&cfg),
        m.dsp,
        m.bram,
        m.uram,
        r.perf / 1e9,
        r.bound,
        result.frontier.len()
    );
    Ok(())
}

fn cmd_weights(cmd: &WeightsCommand) -> Result<()> {
    match cmd {
        WeightsCommand::GenRandom {
            seed,
            bits,
            featnet_only,
            out,
        } => {
            let mut file = WeightFile::default();
            file.put_featnet(&FeatNetWeights::random(*seed, *bits)?)?;
            if !featnet_only {
                let (t, r) = random_actors(*seed, *bits)?;
                file.put_actor(Head::Translation, &t)?;
                file.put_actor(Head::Rotation, &r)?;
            }
            file.save(out)?;
            eprintln!("wrote {} tensors to {}", file.tensors.len(), out.display());
        }
        WeightsCommand::Inspect { file } => {
            let w = WeightFile::load(file).with_context(|| format!("reading {}", file.display()))?;
            let mut out = io::stdout().lock();
            writeln!(out, "{:<40} {:<5} {:<14} {:>10}", "name", "dtype", "dims", "elements")?;
            for t in &w.tensors {
                let dims = t.dims.iter().map(u32::to_string).collect::<Vec<_>>().join("x");
                writeln!(
                    out,
                    "{:<40} {:<5} {:<14} {:>10}",
                    t.name,
                    t.data.dtype_name(),
                    dims,
                    t.data.len()
                )?;
            }
            let counts: Vec<String> = w.dtype_counts().iter().map(|(k, v)| format!("{k}={v}")).collect();
            writeln!(
                out,
                "{} tensors; elements by dtype: {}",
                w.tensors.len(),
                counts.join(" ")
            )?;
            let featnet = w
                .featnet()
                .map(|_| "ok".to_string())
                .unwrap_or_else(|e| format!("invalid ({e})"));
            writeln!(out, "featnet: {featnet}")?;
            for head in [Head::Translation, Head::Rotation] {
                let status = if w.has_actor(head) {
                    w.actor(head)
                        .map(|_| "ok".to_string())
                        .unwrap_or_else(|e| format!("invalid ({e})"))
                } else {
                    "absent".to_string()
                };
                writeln!(out, "actor {head:?}: {status}")?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Register(a) => cmd_register(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Dse(a) => cmd_dse(a),
        Command::Weights(c) => cmd_weights(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
