use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Args;
use serde_json::{json, Value};
use sphere_distill::checkpoint::Checkpoint;
use sphere_distill::config::{
    expand_grid, parse_power, sweep_preset, GridAxis, RunConfig, SWEEP_PRESETS,
};
use sphere_distill::data::{export_csv, gen_blobs, gen_shapes, Dataset, PayloadLayout};
use sphere_distill::energy::{uniformity_metric, NeuronSet};
use sphere_distill::engine::{read_metrics, run_training, ByolModel, RunDir, RunOptions};
use sphere_distill::eval::{
    diagnose as diagnose_model, extract_representations, knn_eval, linear_eval, DiagnoseConfig,
};
use sphere_distill::oracles::{
    bruteforce_pair_loss, gradient_check, mc_uniform_uniformity, random_sphere_points,
    thomson_descent, GradTarget, PairLossKind,
};
use sphere_distill::{energy, ExecPolicy};

use crate::{svg, ConfigArgs};

pub const ORACLES: &[&str] = &["thomson", "mc-uniformity", "finite-diff", "bruteforce"];

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(sphere_distill::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Lib(sphere_distill::Error::Divergence { .. }) => ExitCode::from(2),
            _ => ExitCode::from(1),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Lib(e) => e.fmt(f),
        }
    }
}

impl From<sphere_distill::Error> for CliError {
    fn from(e: sphere_distill::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Usage(msg.into()))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

fn resolve(args: &ConfigArgs, mut cfg: RunConfig, fallback: Option<PathBuf>) -> Result<RunConfig> {
    if let Some(path) = args.config.as_ref().or(fallback.as_ref()) {
        cfg.apply_file(path)?;
    }
    // overrides swallow everything after the first unknown flag
    if let Some(flag) = args
        .overrides
        .iter()
        .find(|a| a.starts_with("--") && a[2..].split('=').next().is_some_and(|k| k.contains('-')))
    {
        return usage(format!(
            "{flag} is not a configuration key; command options go before the overrides"
        ));
    }
    cfg.apply_overrides(&args.overrides)?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

/// `config.resolved.json` of the run a checkpoint belongs to.
fn sibling_config(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint
        .ancestors()
        .skip(1)
        .take(2)
        .map(|d| d.join("config.resolved.json"))
        .find(|p| p.is_file())
}

fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let data = cfg.data_spec()?.load()?;
    Ok(data.split(cfg.test_fraction()?, cfg.seed()?)?)
}

/// Trains one configuration into `out` and writes `report.json`. A
/// divergence is recorded in the report before it is returned.
fn run_one(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<PathBuf>,
    stop_after: Option<u64>,
) -> Result<Value> {
    let (train_set, test_set) = load_splits(cfg)?;
    let tc = cfg.train_config(train_set.input_dim())?;
    let dir = RunDir::create(out)?;
    fs::write(out.join("config.resolved.json"), cfg.to_json()?)?;
    let resume = match resume {
        Some(p) if p.as_os_str() == "latest" => match dir.latest_checkpoint()? {
            Some(p) => Some(p),
            None => return usage(format!("no checkpoint to resume in {}", out.display())),
        },
        other => other,
    };
    let opts = RunOptions {
        dir: Some(dir.clone()),
        resume,
        stop_after_epoch: stop_after,
    };
    let summary = match run_training(&tc, &train_set, &opts) {
        Ok(s) => s,
        Err(e @ sphere_distill::Error::Divergence { .. }) => {
            write_json(
                &out.join("report.json"),
                &json!({"status": "diverged", "detail": e.to_string()}),
            )?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let last = read_metrics(&dir.metrics_path())?.pop();
    if summary.interrupted {
        let report =
            json!({"status": "interrupted", "steps": summary.state.schedule.step, "final": last});
        write_json(&out.join("report.json"), &report)?;
        return Ok(report);
    }
    let model = &summary.state.model;
    let eval_cfg = cfg.eval_config()?;
    let policy = tc.policy;
    let tr = extract_representations(model, &train_set, "train", policy)?;
    let te = extract_representations(model, &test_set, "test", policy)?;
    let diag_cfg = DiagnoseConfig {
        seed: cfg.seed()?,
        ..DiagnoseConfig::default()
    };
    let report = json!({
        "status": "completed",
        "steps": summary.state.schedule.step,
        "final": last,
        "linear": linear_eval(&tr, &te, &eval_cfg)?,
        "knn": knn_eval(&tr, &te, &eval_cfg, policy)?,
        "energy": diagnose_model(model, &train_set, &cfg.energy_spec()?, &diag_cfg)?.report,
    });
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

pub fn train(
    args: &ConfigArgs,
    preset: Option<&str>,
    out: &Path,
    resume: Option<PathBuf>,
    stop_after: Option<u64>,
    print_config: bool,
) -> Result<ExitCode> {
    let base = match preset {
        Some(p) => RunConfig::with_preset(p)?,
        None => RunConfig::default(),
    };
    let cfg = resolve(args, base, None)?;
    if print_config {
        print!("{}", cfg.to_text());
        return Ok(ExitCode::SUCCESS);
    }
    let report = run_one(&cfg, out, resume, stop_after)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn load_model(args: &ConfigArgs, checkpoint: &Path) -> Result<(RunConfig, ByolModel)> {
    if !checkpoint.is_file() {
        return usage(format!("checkpoint {} not found", checkpoint.display()));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let fallback = sibling_config(checkpoint);
    if args.config.is_none() && fallback.is_none() {
        return usage(format!(
            "no config.resolved.json found next to {}; pass --config",
            checkpoint.display()
        ));
    }
    let cfg = resolve(args, RunConfig::default(), fallback)?;
    let state = ckpt.restore(&ckpt.train_config()?)?;
    Ok((cfg, state.model))
}

pub fn eval(args: &ConfigArgs, checkpoint: &Path, mode: &str) -> Result<ExitCode> {
    if mode != "linear" && mode != "knn" {
        return usage(format!("unknown eval mode {mode:?} (linear, knn)"));
    }
    let (cfg, model) = load_model(args, checkpoint)?;
    let (train_set, test_set) = load_splits(&cfg)?;
    let policy = ExecPolicy::default();
    let tr = extract_representations(&model, &train_set, "train", policy)?;
    let te = extract_representations(&model, &test_set, "test", policy)?;
    let eval_cfg = cfg.eval_config()?;
    let acc = if mode == "linear" {
        linear_eval(&tr, &te, &eval_cfg)?
    } else {
        knn_eval(&tr, &te, &eval_cfg, policy)?
    };
    let mut v = serde_json::to_value(acc)?;
    v["mode"] = json!(mode);
    v["n_train"] = json!(tr.len());
    v["n_test"] = json!(te.len());
    println!("{}", serde_json::to_string(&v)?);
    Ok(ExitCode::SUCCESS)
}

pub fn diagnose(
    args: &ConfigArgs,
    checkpoint: &Path,
    out: Option<PathBuf>,
    render: bool,
) -> Result<ExitCode> {
    let (cfg, model) = load_model(args, checkpoint)?;
    let data = cfg.data_spec()?.load()?;
    let diag_cfg = DiagnoseConfig {
        seed: cfg.seed()?,
        ..DiagnoseConfig::default()
    };
    let d = diagnose_model(&model, &data, &cfg.energy_spec()?, &diag_cfg)?;
    let out = out.unwrap_or_else(|| {
        let ckpt_dir = checkpoint.parent().unwrap_or(Path::new("."));
        ckpt_dir.parent().unwrap_or(ckpt_dir).join("diagnose")
    });
    d.write(&out)?;
    if render {
        svg::circle_plot(
            &out.join("kde_circle.svg"),
            &d.circle.theta,
            &d.circle.density,
        )?;
        svg::heat_map(&out.join("kde_plane.svg"), &d.plane)?;
        svg::layer_bars(
            &out.join("layer_energy.svg"),
            &d.report.neuron_energy,
            &d.report.layer_repr_energy,
        )?;
    }
    println!("{}", serde_json::to_string(&d.report)?);
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    /// thomson, mc-uniformity, finite-diff or bruteforce
    pub name: String,
    /// Number of points
    #[arg(long)]
    pub n: Option<usize>,
    /// Sphere dimension for thomson (S^d), ambient dimension otherwise
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    /// Riesz power: 0, 1, 2, or a0, a1, a2 for the angular form
    #[arg(long, default_value = "2")]
    pub s: String,
    /// Distance mode, overriding the `a` prefix of --s
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Gaussian potential scale
    #[arg(long, default_value_t = 2.0)]
    pub t: f64,
    /// finite-diff loss, such as byol, info_nce or byol_mhe_a2
    #[arg(long, default_value = "byol")]
    pub target: String,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// bruteforce statistic: uniformity, g2, energy_euclidean or energy_angular
    #[arg(long, default_value = "uniformity")]
    pub kind: String,
}

fn power_and_mode(args: &OracleArgs) -> Result<(energy::DistanceMode, energy::RieszPower)> {
    let (mut mode, s) = parse_power(&args.s)?;
    if let Some(m) = &args.mode {
        mode = match m.as_str() {
            "euclidean" => energy::DistanceMode::Euclidean,
            "angular" => energy::DistanceMode::Angular,
            other => return usage(format!("unknown mode {other:?} (euclidean, angular)")),
        };
    }
    Ok((mode, s))
}

pub fn oracle(args: &OracleArgs) -> Result<ExitCode> {
    let result = match args.name.as_str() {
        "thomson" => {
            let (mode, s) = power_and_mode(args)?;
            let run = thomson_descent(
                args.n.unwrap_or(2),
                args.d,
                s,
                mode,
                args.seed,
                args.steps,
                args.lr,
            )?;
            let mut r = run.result(args.seed);
            r.method = format!(
                "thomson/{}",
                serde_json::to_value(mode)?.as_str().unwrap_or_default()
            );
            r
        }
        "mc-uniformity" => {
            mc_uniform_uniformity(args.d, args.t, args.n.unwrap_or(10_000), args.seed)?
        }
        "finite-diff" => gradient_check(GradTarget::parse(&args.target)?, args.seed, args.eps)?,
        "bruteforce" => {
            let n = args.n.unwrap_or(256);
            let x = random_sphere_points(n, args.d, args.seed);
            let (_, s) = power_and_mode(args)?;
            let (kind, library) = match args.kind.as_str() {
                "uniformity" => (PairLossKind::Uniformity { t: args.t }, uniformity_metric(&x, args.t)?),
                "g2" => (PairLossKind::G2 { t: args.t }, energy::gaussian_potential_g2(&x, args.t)?),
                "energy_euclidean" => (
                    PairLossKind::EnergyEuclidean { s },
                    energy::riesz_energy(&NeuronSet::new(x.clone(), "oracle")?, s)?,
                ),
                "energy_angular" => (
                    PairLossKind::EnergyAngular { s },
                    energy::angular_energy(&NeuronSet::new(x.clone(), "oracle")?, s)?,
                ),
                other => {
                    return usage(format!(
                        "unknown statistic {other:?} (uniformity, g2, energy_euclidean, energy_angular)"
                    ))
                }
            };
            let value = bruteforce_pair_loss(&x, kind)?;
            let v = json!({
                "method": format!("bruteforce/{}", args.kind),
                "seed": args.seed,
                "samples": n,
                "values": {"bruteforce": value, "library": library, "abs_diff": (value - library).abs()},
            });
            println!("{}", serde_json::to_string_pretty(&v)?);
            return Ok(ExitCode::SUCCESS);
        }
        other => {
            return usage(format!(
                "unknown oracle {other:?}; available: {}",
                ORACLES.join(", ")
            ))
        }
    };
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(ExitCode::SUCCESS)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn num(v: Option<&Value>) -> String {
    v.and_then(Value::as_f64)
        .map(|x| x.to_string())
        .unwrap_or_default()
}

pub fn sweep(
    args: &ConfigArgs,
    out: &Path,
    preset: Option<&str>,
    grid: &[String],
) -> Result<ExitCode> {
    let mut axes = Vec::new();
    let base = match preset {
        Some(name) => {
            let (base, axis) = sweep_preset(name)?;
            axes.push(axis);
            RunConfig::with_preset(base)?
        }
        None => RunConfig::default(),
    };
    for g in grid {
        axes.push(GridAxis::parse(g)?);
    }
    if axes.is_empty() {
        let names: Vec<&str> = SWEEP_PRESETS.iter().map(|p| p.0).collect();
        return usage(format!(
            "sweep grid is empty; pass --grid key=v1,v2 or --preset ({})",
            names.join(", ")
        ));
    }
    let base = resolve(args, base, None)?;
    let cells = expand_grid(&base, &axes)?;
    fs::create_dir_all(out)?;

    let mut header: Vec<String> = axes.iter().map(GridAxis::label).collect();
    header.extend(
        [
            "status",
            "steps",
            "loss",
            "loss_byol",
            "loss_uni",
            "loss_mhe",
            "linear_top1",
            "knn_top1",
            "feature_std",
            "uniformity",
            "repr_energy",
        ]
        .map(String::from),
    );
    let mut csv = header.join(",") + "\n";
    let mut diverged = 0;
    for (i, cell) in cells.iter().enumerate() {
        let name = format!("{i:03}_{}", cell.name());
        eprintln!("[{}/{}] {name}", i + 1, cells.len());
        let mut row: Vec<String> = cell.assignments.iter().map(|(_, v)| csv_field(v)).collect();
        match run_one(&cell.config, &out.join(&name), None, None) {
            Ok(r) => {
                let f = &r["final"];
                let e = &r["energy"];
                row.push("completed".into());
                row.push(r["steps"].to_string());
                for k in ["loss", "loss_byol", "loss_uni", "loss_mhe"] {
                    row.push(num(f.get(k)));
                }
                row.push(num(r["linear"].get("top1")));
                row.push(num(r["knn"].get("top1")));
                for k in ["feature_std", "uniformity", "repr_energy"] {
                    row.push(num(e.get(k)));
                }
            }
            Err(err @ CliError::Lib(sphere_distill::Error::Divergence { .. })) => {
                eprintln!("  {err}");
                diverged += 1;
                row.push("diverged".into());
                row.extend(std::iter::repeat_n(String::new(), 10));
            }
            Err(err) => return Err(err),
        }
        csv.push_str(&(row.join(",") + "\n"));
    }
    fs::write(out.join("summary.csv"), csv)?;
    println!("{}", out.join("summary.csv").display());
    Ok(if diverged > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// blobs or shapes
    pub kind: String,
    /// CSV destination; statistics go to the same stem with `.stats.json`
    #[arg(long)]
    pub out: PathBuf,
    /// Total number of rows
    #[arg(long, default_value_t = 1024)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// blobs: number of classes
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// blobs: vector dimension
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// blobs: per-coordinate noise
    #[arg(long, default_value_t = 0.05)]
    pub spread: f64,
    /// shapes: image side in pixels
    #[arg(long, default_value_t = 16)]
    pub size: usize,
}

pub fn gen_data(args: &GenDataArgs) -> Result<ExitCode> {
    let data = match args.kind.as_str() {
        "blobs" => {
            if args.classes == 0 || !args.n.is_multiple_of(args.classes) {
                return usage(format!(
                    "--n {} must be a multiple of --classes {}",
                    args.n, args.classes
                ));
            }
            gen_blobs(
                args.classes,
                args.dim,
                args.n / args.classes,
                args.spread,
                args.seed,
            )?
        }
        "shapes" => gen_shapes(args.n, args.size, args.seed)?,
        other => return usage(format!("unknown corpus {other:?} (blobs, shapes)")),
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let schema = export_csv(&data, &args.out)?;
    let ingest = match schema.layout {
        PayloadLayout::Vector { dim } => json!({"csv_layout": "vector", "csv_dim": dim}),
        PayloadLayout::Image {
            height, channels, ..
        } => {
            json!({"csv_layout": "image", "image_size": height, "image_channels": channels})
        }
    };
    let stats = json!({
        "kind": args.kind,
        "seed": args.seed,
        "rows": data.len(),
        "num_classes": data.num_classes,
        "class_counts": data.class_counts(),
        "input_dim": data.input_dim(),
        "config": ingest,
        "mean": data.stats.mean,
        "std": data.stats.std,
    });
    let stats_path = args.out.with_extension("stats.json");
    write_json(&stats_path, &stats)?;
    println!(
        "{}",
        serde_json::to_string(&json!({"csv": args.out, "stats": stats_path, "rows": data.len()}))?
    );
    Ok(ExitCode::SUCCESS)
}
