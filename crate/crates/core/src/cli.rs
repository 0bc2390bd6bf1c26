//! Command-line front end: `params`, `gradcheck`, `train`, `ablate`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapter::{save_checkpoint, MsLoRAConfig, DEFAULT_KERNELS};
use crate::autograd::{OpKind, OptimizerKind, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::budget::{table1, BackboneSpec, Table1Row};
use crate::error::Error;
use crate::gradsuite::{run_suite, SuiteOptions};
use crate::harness::{ablate, HarnessConfig, TaskKind, TrainReport};
use crate::tensor::Tensor;

pub const OUT_ENV: &str = "MSLORA_OUT";
pub const DEFAULT_OUT: &str = "mslora-out";

#[derive(Debug, Parser)]
#[command(name = "mslora", version, about = "Multi-scale low-rank adapter toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter budget of a backbone across projection group sizes.
    Params(ParamsArgs),
    /// Finite-difference gradient checks over every op and adapter variant.
    Gradcheck(GradcheckArgs),
    /// Train adapters on a frozen toy backbone.
    Train(TrainArgs),
    /// Compare adapter variants across seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $MSLORA_OUT, then ./mslora-out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override a config key, e.g. `--set adapter.rank=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Backbone spec JSON ({name, backbone_params, stages: [{width, count}]}).
    #[arg(long)]
    pub spec: PathBuf,
    /// Low-rank width D.
    #[arg(long, default_value_t = 128)]
    pub d: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8, 16])]
    pub groups: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KERNELS.to_vec())]
    pub kernels: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Scale one op's adjoint to confirm the checker catches it.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub optimizer: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Variant names, e.g. `linear,nonlinear,both` or `k3,k3-5-7`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub variants: Vec<String>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3, 4, 5])]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

/// Gradient-check settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

/// A failed command and its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config, or input files (exit 2).
    Usage(String),
    /// The run itself failed (exit 1).
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Run errors that stem from inputs are usage errors; the rest are failures.
fn classify(e: Error) -> CliError {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Format(_) | Error::Io { .. } | Error::Accounting { .. } => usage(e),
        other => CliError::Failure(other.to_string()),
    }
}

/// Output directory: the flag, then `$MSLORA_OUT`, then `./mslora-out`.
pub fn resolve_out_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failure(e.to_string()))?;
    write_file(path, &(text + "\n"))
}

/// Timestamps and timings, kept apart from the reproducible artifacts.
fn write_metadata(dir: &Path, command: &str, wall_clock_secs: f64) -> Result<(), CliError> {
    let unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = serde_json::json!({
        "command": command,
        "finished_unix_secs": unix,
        "wall_clock_secs": wall_clock_secs,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&dir.join("metadata.json"), &meta)
}

/// Applies `key=value` overrides onto a JSON object. Keys are dotted paths
/// that must already exist; values parse as JSON, falling back to a string.
pub fn apply_overrides(mut value: Value, overrides: &[String]) -> Result<Value, String> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| format!("override `{item}` is not of the form key=value"))?;
        let mut slot = &mut value;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| format!("unknown config key `{key}`"))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    }
    Ok(value)
}

/// Loads a config (defaults when no file is given) and applies overrides.
pub fn load_config<T>(path: Option<&Path>, overrides: &[String]) -> Result<T, CliError>
where
    T: Default + Serialize + DeserializeOwned,
{
    let base: Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            let parsed: T = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            serde_json::to_value(parsed).map_err(usage)?
        }
        None => serde_json::to_value(T::default()).map_err(usage)?,
    };
    let merged = apply_overrides(base, overrides).map_err(CliError::Usage)?;
    serde_json::from_value(merged).map_err(|e| usage(format!("config: {e}")))
}

fn parse<T: FromStr<Err = Error>>(s: &str) -> Result<T, CliError> {
    s.parse().map_err(classify)
}

/// Fixed-width text table of the rows that succeeded, with errors inline.
pub fn format_params_table(spec: &BackboneSpec, d: usize, rows: &[Result<Table1Row, Error>]) -> String {
    let mut out = format!(
        "{} (D = {d}, {} insertion points, backbone {} params)\n",
        spec.name,
        spec.insertion_points(),
        spec.backbone_params
    );
    out.push_str(&format!(
        "{:>3} {:>12} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8}\n",
        "G", "proj", "trans", "extras", "proj_M", "trans_M", "ratio", "ratio_M"
    ));
    for row in rows {
        match row {
            Ok(r) => out.push_str(&format!(
                "{:>3} {:>12} {:>10} {:>10} {:>8.1} {:>8.1} {:>8.3} {:>8.3}\n",
                r.groups,
                r.breakdown.proj,
                r.breakdown.trans,
                r.breakdown.extras,
                r.proj_display,
                r.trans_display,
                r.breakdown.ratio.unwrap_or(f64::NAN),
                r.display_ratio.unwrap_or(f64::NAN),
            )),
            Err(e) => out.push_str(&format!("error: {e}\n")),
        }
    }
    out
}

fn params_csv(rows: &[Table1Row]) -> String {
    let mut s = String::from("groups,proj,trans,extras,total,ratio,proj_display_m,trans_display_m,display_ratio\n");
    for r in rows {
        let b = &r.breakdown;
        s.push_str(&format!(
            "{},{},{},{},{},{},{:.1},{:.1},{}\n",
            r.groups,
            b.proj,
            b.trans,
            b.extras,
            b.total,
            b.ratio.map(|x| format!("{x:.6}")).unwrap_or_default(),
            r.proj_display,
            r.trans_display,
            r.display_ratio.map(|x| format!("{x:.3}")).unwrap_or_default(),
        ));
    }
    s
}

pub fn cmd_params(args: &ParamsArgs) -> Result<(), CliError> {
    let spec = BackboneSpec::load(&args.spec).map_err(classify)?;
    let config = MsLoRAConfig::new(1).with_rank(args.d).with_kernels(&args.kernels);
    let rows = table1(&spec, &config, &args.groups);
    print!("{}", format_params_table(&spec, args.d, &rows));
    let ok: Vec<Table1Row> = rows.into_iter().collect::<Result<_, _>>().map_err(classify)?;
    let dir = resolve_out_dir(args.out.as_deref());
    create_dir(&dir)?;
    write_file(&dir.join("params.csv"), &params_csv(&ok))?;
    write_json(
        &dir.join("params.json"),
        &serde_json::json!({ "spec": spec, "rank": args.d, "kernels": args.kernels, "rows": ok }),
    )
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let c = &args.common;
    let config: GradcheckConfig = load_config(c.config.as_deref(), &c.overrides)?;
    let fault = args.inject_fault.as_deref().map(parse::<OpKind>).transpose()?;
    let report = run_suite(&SuiteOptions {
        seed: c.seed,
        step: config.step,
        tolerance: config.tolerance,
        fault,
    })
    .map_err(classify)?;
    for r in &report.reports {
        let status = if r.passes(report.tolerance) { "ok" } else { "FAIL" };
        println!(
            "{:<32} {:>10.3e}  {:<4} {}[{}]",
            r.op, r.max_rel_error, status, r.worst_param, r.worst_index
        );
    }
    let dir = resolve_out_dir(c.out.as_deref());
    create_dir(&dir)?;
    write_json(&dir.join("gradcheck.json"), &report)?;
    write_metadata(&dir, "gradcheck", started.elapsed().as_secs_f64())?;
    if report.passed {
        println!("all {} components below {:e}", report.reports.len(), report.tolerance);
        Ok(())
    } else {
        let failed: Vec<&str> = report.failures().map(|r| r.op.as_str()).collect();
        Err(CliError::Failure(format!(
            "gradient check failed (tolerance {:e}): {}",
            report.tolerance,
            failed.join(", ")
        )))
    }
}

fn harness_config(common: &CommonArgs, task: Option<&str>, steps: Option<usize>) -> Result<HarnessConfig, CliError> {
    let mut config: HarnessConfig = load_config(common.config.as_deref(), &common.overrides)?;
    if let Some(t) = task {
        config.task = parse::<TaskKind>(t)?;
    }
    if let Some(s) = steps {
        config.steps = s;
    }
    Ok(config)
}

fn loss_csv(report: &TrainReport) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let c = &args.common;
    let mut config = harness_config(c, args.task.as_deref(), args.steps)?;
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    if let Some(o) = &args.optimizer {
        config.optimizer = parse::<OptimizerKind>(o)?;
    }
    for (i, &w) in config.widths.iter().enumerate() {
        config
            .adapter
            .for_width(w)
            .validate()
            .map_err(|e| usage(format!("adapter at stage {i} (width {w}): {e}")))?;
    }
    let (model, report) = crate::harness::run(&config, c.seed).map_err(classify)?;

    let dir = resolve_out_dir(c.out.as_deref());
    create_dir(&dir)?;
    write_json(&dir.join("train_report.json"), &report)?;
    write_file(&dir.join("loss.csv"), &loss_csv(&report))?;
    let ckpt = dir.join("checkpoint");
    for (i, (cfg, params)) in model.configs.iter().zip(&model.adapters).enumerate() {
        save_checkpoint(&ckpt.join(format!("adapters.{i}")), cfg, c.seed, params).map_err(classify)?;
    }
    let save = |name: &str, t: &Tensor| t.save(ckpt.join(name)).map_err(classify);
    save("head.weight.mslt", &model.head.weight)?;
    save("head.bias.mslt", &model.head.bias)?;
    write_metadata(&dir, "train", report.wall_clock_secs)?;

    println!(
        "task {} seed {} steps {}: final loss {:.4}, train accuracy {:.4}, {} trainable params",
        report.task,
        report.seed,
        report.steps,
        report.losses.last().copied().unwrap_or(f64::NAN),
        report.final_accuracy,
        report.trainable_params
    );
    println!(
        "backbone digest {} (unchanged: {})",
        report.digest_after,
        report.digest_before == report.digest_after
    );
    if report.digest_before != report.digest_after {
        return Err(CliError::Failure(
            "frozen backbone digest changed during training".into(),
        ));
    }
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let c = &args.common;
    let config = harness_config(c, args.task.as_deref(), args.steps)?;
    let report = ablate(&config, &args.variants, &args.seeds).map_err(classify)?;
    let dir = resolve_out_dir(c.out.as_deref());
    create_dir(&dir)?;
    write_file(&dir.join("ablation.csv"), &report.summary_csv())?;
    write_file(&dir.join("runs.csv"), &report.runs_csv())?;
    write_json(&dir.join("ablation.json"), &report)?;
    write_metadata(&dir, "ablate", started.elapsed().as_secs_f64())?;
    print!("{}", report.summary_csv());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Params(a) => cmd_params(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Train(a) => cmd_train(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_replace_existing_keys_only() {
        let v = serde_json::to_value(HarnessConfig::default()).unwrap();
        let v = apply_overrides(v, &["adapter.rank=16".into(), "task=multi-scale".into()]).unwrap();
        let c: HarnessConfig = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(c.adapter.rank, 16);
        assert_eq!(c.task, TaskKind::MultiScale);
        assert!(apply_overrides(v.clone(), &["adapter.nope=1".into()]).is_err());
        assert!(apply_overrides(v, &["steps".into()]).is_err());
    }

    #[test]
    fn config_defaults_without_file() {
        let c: GradcheckConfig = load_config(None, &[]).unwrap();
        assert_eq!(c, GradcheckConfig::default());
        let err = load_config::<GradcheckConfig>(Some(Path::new("/no/such/file.json")), &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/no/such/file.json"));
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["mslora", "params", "--spec", "swin_l.json", "--groups", "1,4"]).unwrap();
        match cli.command {
            Command::Params(p) => assert_eq!(p.groups, vec![1, 4]),
            _ => panic!("wrong subcommand"),
        }
    }
}
