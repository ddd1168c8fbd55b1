//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::adapse;
use crate::bagcore::{load_feature_store, save_feature_store, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics;
use crate::milmodel::{load_checkpoint, save_checkpoint, MilParams};
use crate::seed;
use crate::synthgen::{self, SynthSpec};
use crate::trainer::{self, TrainConfig, TrainOutcome, BEST_CHECKPOINT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const PSEACC_FILE: &str = "pseacc.csv";

#[derive(Debug, Parser)]
#[command(name = "sws-mil", version, about = "Semi-weakly supervised MIL on feature bags")]
pub struct Cli {
    /// Log progress at info level (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic feature store.
    Synth(SynthArgs),
    /// Train and write report, checkpoints and round plans.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split; prints metrics JSON.
    Eval(EvalArgs),
    /// Train and compare pseudo-label accuracy against random splitting.
    Pseacc(PseaccArgs),
    /// Dump per-instance attention for one bag.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").args(["default", "three_class"])))]
pub struct SynthArgs {
    /// `SPEC OUT`, or just `OUT` with `--default` / `--three-class`.
    #[arg(value_name = "PATH", num_args = 1..=2, required = true)]
    pub paths: Vec<PathBuf>,
    /// Use the built-in binary benchmark.
    #[arg(long)]
    pub default: bool,
    /// Use the built-in three-class benchmark.
    #[arg(long)]
    pub three_class: bool,
    /// Override a spec field, e.g. `--set seed=7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Feature store directory.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set rounds=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Also write the evaluation (metrics and per-bag predictions) here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PseaccArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// CSV with columns round,method,pseacc.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Bag id.
    #[arg(long)]
    pub bag: String,
    /// CSV with columns instance_index,attention_score,oracle_label.
    #[arg(long)]
    pub out: PathBuf,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Pseacc(a) => pseacc(a),
        Command::Heatmap(a) => heatmap(a),
    }
}

/// Parses `KEY=VALUE`; the value is read as JSON, or as a bare string.
fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not KEY=VALUE")))?;
    if key.is_empty() {
        return Err(Error::Config(format!("override {raw:?} has an empty key")));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.to_string(), value))
}

fn with_overrides<T: Serialize + DeserializeOwned>(base: Value, overrides: &[String]) -> Result<T> {
    let mut map = match base {
        Value::Object(m) => m,
        _ => return Err(Error::Config("configuration must be a JSON object".into())),
    };
    for raw in overrides {
        let (k, v) = parse_override(raw)?;
        map.insert(k, v);
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let base = match path {
        Some(p) => read_json(p)?,
        None => Value::Object(Map::new()),
    };
    let cfg: TrainConfig = with_overrides(base, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn synth(a: SynthArgs) -> Result<()> {
    let builtin = a.default || a.three_class;
    let (base, out) = match (a.paths.as_slice(), builtin) {
        ([out], true) => {
            let spec = if a.three_class {
                synthgen::default_benchmark_3class()
            } else {
                synthgen::default_benchmark()
            };
            (serde_json::to_value(spec).expect("spec serializes"), out)
        }
        ([spec, out], false) => (read_json(spec)?, out),
        _ => {
            return Err(Error::Config(
                "usage: synth SPEC OUT, or synth --default OUT".into(),
            ))
        }
    };
    let spec: SynthSpec = with_overrides(base, &a.overrides)?;
    let ds = synthgen::generate(&spec)?;
    save_feature_store(&ds, out)?;
    info!("wrote {} bags to {}", ds.bags().len(), out.display());
    Ok(())
}

fn train_common(common: &ConfigArgs) -> Result<(Dataset, TrainConfig, TrainOutcome)> {
    let cfg = load_config(common.config.as_deref(), &common.overrides)?;
    let ds = load_feature_store(&common.data)?;
    let outcome = trainer::train(&ds, &cfg)?;
    Ok((ds, cfg, outcome))
}

fn train(a: TrainArgs) -> Result<()> {
    let (ds, cfg, outcome) = train_common(&a.common)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let report = &outcome.report;
    save_checkpoint(a.out.join(BEST_CHECKPOINT), &outcome.best, cfg.seed, report.best_round)?;
    save_checkpoint(a.out.join(LAST_CHECKPOINT), &outcome.last, cfg.seed, cfg.rounds)?;
    write_json(&a.out.join(REPORT_FILE), report)?;
    for plan in &outcome.plans {
        write_json(&a.out.join("rounds").join(format!("round_{:03}.json", plan.round)), plan)?;
    }
    let rows = pseacc_rows(&ds, &cfg, &outcome)?;
    write_file(&a.out.join(PSEACC_FILE), pseacc_csv(&rows).as_bytes())?;
    if let Some(test) = &report.final_test {
        println!(
            "best round {}: test acc {:.4} auc {} f1 {:.4}",
            report.best_round,
            test.acc,
            test.auc.map_or("n/a".into(), |v| format!("{v:.4}")),
            test.f1
        );
    }
    Ok(())
}

/// One row of the pseudo-label accuracy comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct PseaccRow {
    pub round: usize,
    pub method: &'static str,
    pub pseacc: Option<f64>,
}

/// AdaPse labeled-set accuracy per round next to a random `M`-way split of
/// the same parents, each piece inheriting its parent's label.
pub fn pseacc_rows(ds: &Dataset, cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<Vec<PseaccRow>> {
    if !ds.has_oracle() {
        return Ok(Vec::new());
    }
    let parents = ds.indices(Split::Train);
    let mut rows = Vec::with_capacity(2 * outcome.plans.len());
    for plan in &outcome.plans {
        let ada = metrics::pse_acc(plan, ds)?;
        let mut rng = seed::sub_rng(cfg.seed, "random-split", plan.round as u64);
        let mut random = Vec::new();
        for &p in &parents {
            let bag = ds.bag(p);
            let m = cfg.pseudo_bags.min(bag.num_instances());
            random.extend(adapse::random_split(p, bag, m, &mut rng)?);
        }
        rows.push(PseaccRow {
            round: plan.round,
            method: "adapse",
            pseacc: ada.labeled,
        });
        rows.push(PseaccRow {
            round: plan.round,
            method: "random",
            pseacc: metrics::pse_acc_inherited(ds, &random)?,
        });
    }
    Ok(rows)
}

pub fn pseacc_csv(rows: &[PseaccRow]) -> String {
    let mut out = String::from("round,method,pseacc\n");
    for r in rows {
        let v = r.pseacc.map_or(String::new(), |v| format!("{v}"));
        out.push_str(&format!("{},{},{v}\n", r.round, r.method));
    }
    out
}

fn pseacc(a: PseaccArgs) -> Result<()> {
    let (ds, cfg, outcome) = train_common(&a.common)?;
    if !ds.has_oracle() {
        return Err(Error::Oracle("pseudo-label accuracy needs instance labels".into()));
    }
    let rows = pseacc_rows(&ds, &cfg, &outcome)?;
    write_file(&a.out, pseacc_csv(&rows).as_bytes())
}

fn load_matching(checkpoint: &Path, ds: &Dataset) -> Result<MilParams> {
    let (_, model) = load_checkpoint(checkpoint)?;
    if model.dim() != ds.dim() || model.num_classes() != ds.num_classes() {
        return Err(Error::Dimension(format!(
            "checkpoint is {}-dim/{} classes, data is {}-dim/{} classes",
            model.dim(),
            model.num_classes(),
            ds.dim(),
            ds.num_classes()
        )));
    }
    Ok(model)
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = load_feature_store(&a.data)?;
    let model = load_matching(&a.checkpoint, &ds)?;
    let evaluation = trainer::evaluate(&model, &ds, a.split)?;
    if let Some(out) = &a.out {
        write_json(out, &evaluation)?;
    }
    let text = serde_json::to_string_pretty(&evaluation.metrics).map_err(|e| Error::Format(e.to_string()))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    let ds = load_feature_store(&a.data)?;
    let model = load_matching(&a.checkpoint, &ds)?;
    let (_, bag) = ds
        .find(&a.bag)
        .ok_or_else(|| Error::Data(format!("no bag with id {:?}", a.bag)))?;
    let attention = model.forward(&bag.features())?.attention;
    let oracle = bag.oracle_instance_labels();
    let mut out = String::from("instance_index,attention_score,oracle_label\n");
    for (j, score) in attention.iter().enumerate() {
        let label = oracle.map_or(String::new(), |l| l[j].to_string());
        out.push_str(&format!("{j},{score},{label}\n"));
    }
    write_file(&a.out, out.as_bytes())
}
