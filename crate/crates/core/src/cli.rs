//! `prunekit` subcommands: rank, sensitivity, prune, eval, report, signs.
//!
//! A model path names the JSON manifest; its tensor blob lives at
//! `<manifest>.bin`. Failures print one `error[Code]: message` line to
//! stderr and exit 1; usage errors exit 2.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::format::{blob_path_for, load_dataset, load_model, save_model, Dataset, ModelGraph};
use crate::inference::evaluate;
use crate::pruner::{
    apply_plan, build_plan, plan_from_ratios, reduction_report, sign_ratio_report, PlanSource,
};
use crate::ranking::{rank_layer, FilterRanking, Method};
use crate::sensitivity::{
    full_sensitivity, parse_grid, ratios_for_threshold, sweep_layer, SensitivityEntry,
    SensitivityMap,
};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "prunekit",
    version,
    about = "Sign-split filter ranking and structural filter pruning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rank the filters of every conv layer and write the rankings as JSON.
    Rank(RankArgs),
    /// Sweep per-layer pruning ratios and record accuracy.
    Sensitivity(SensitivityArgs),
    /// Prune a model from a sensitivity file + threshold or explicit ratios.
    Prune(PruneArgs),
    /// Print model accuracy on a dataset.
    Eval(EvalArgs),
    /// Compare Params/FLOPs (and optionally accuracy) of two models.
    Report(ReportArgs),
    /// Write per-filter positive/negative weight statistics.
    Signs(SignsArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset inputs blob (N, C, H, W).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset labels blob (N).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Count a sample correct when its label is among the top-k logits.
    #[arg(long, default_value_t = 1)]
    topk: usize,
}

impl DataArgs {
    fn load(&self) -> Result<Option<Dataset>> {
        match (&self.data, &self.labels) {
            (Some(x), Some(y)) => Ok(Some(load_dataset(x, y)?)),
            (None, None) => Ok(None),
            _ => Err(Error::Usage(
                "--data and --labels must be given together".into(),
            )),
        }
    }

    fn require(&self) -> Result<Dataset> {
        self.load()?
            .ok_or_else(|| Error::Usage("--data and --labels are required".into()))
    }
}

#[derive(Debug, Args)]
struct RankArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "dscore", value_parser = parse_method)]
    method: Method,
    /// Rank only this layer.
    #[arg(long)]
    layer: Option<String>,
    /// Buffer size for dstep/dstepgm (default: every filter).
    #[arg(long)]
    buffer: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SensitivityArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "dscore", value_parser = parse_method)]
    method: Method,
    /// Ratio grid as start:stop:step.
    #[arg(long, default_value = "0.1:0.9:0.1")]
    ratios: String,
    /// Sweep only this layer.
    #[arg(long)]
    layer: Option<String>,
    /// CSV output.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON mirror of the sensitivity map.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "dscore", value_parser = parse_method)]
    method: Method,
    /// Sensitivity map (CSV, or JSON when the name ends in .json).
    #[arg(long, requires = "threshold", conflicts_with = "ratios")]
    sensitivity: Option<PathBuf>,
    /// Accuracy threshold in (0, 1].
    #[arg(long, requires = "sensitivity")]
    threshold: Option<f64>,
    /// Explicit ratios: a single value for every prunable layer, or
    /// `layer=ratio,layer=ratio`.
    #[arg(long)]
    ratios: Option<String>,
    /// Rankings JSON from `prunekit rank` to use instead of fresh rankings.
    #[arg(long)]
    rankings: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Pruned model manifest (blob written to <out>.bin).
    #[arg(long)]
    out: PathBuf,
    /// Plan JSON (default: <out>.plan.json).
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Reduction report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Original model.
    #[arg(long)]
    model: PathBuf,
    /// Pruned model.
    #[arg(long)]
    pruned: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SignsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse()
        .map_err(|e: crate::ranking::RankingError| e.to_string())
}

fn load(path: &Path) -> Result<ModelGraph> {
    Ok(load_model(path, &blob_path_for(path))?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn to_json<T: Serialize + ?Sized>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn from_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn conv_layers(g: &ModelGraph, only: Option<&str>) -> Result<Vec<String>> {
    let layers = g.conv_layers();
    match only {
        None => Ok(layers),
        Some(l) if layers.iter().any(|x| x == l) => Ok(vec![l.to_string()]),
        Some(l) => Err(Error::Usage(format!("{l:?} is not a conv2d layer"))),
    }
}

fn cmd_rank(a: &RankArgs) -> Result<()> {
    let g = load(&a.model)?;
    let rankings = conv_layers(&g, a.layer.as_deref())?
        .iter()
        .map(|l| {
            rank_layer(
                a.method,
                l,
                g.conv_weight(l).expect("conv weight"),
                a.buffer,
            )
        })
        .collect::<std::result::Result<Vec<FilterRanking>, _>>()?;
    write_text(&a.out, &to_json(&rankings))
}

fn cmd_sensitivity(a: &SensitivityArgs) -> Result<()> {
    let g = load(&a.model)?;
    let d = a.data.require()?;
    let grid = parse_grid(&a.ratios)?;
    let map = match &a.layer {
        None => full_sensitivity(&g, &d, a.method, &grid, a.data.topk)?,
        Some(layer) => {
            let points = sweep_layer(&g, &d, a.method, layer, &grid, a.data.topk)?;
            SensitivityMap {
                method: a.method,
                top_k: a.data.topk,
                baseline_accuracy: evaluate(&g, &d, a.data.topk)?.accuracy,
                ratios: grid,
                entries: points
                    .into_iter()
                    .map(|p| SensitivityEntry {
                        layer: layer.clone(),
                        ratio: p.ratio,
                        accuracy: p.accuracy,
                    })
                    .collect(),
            }
        }
    };
    let mut csv = Vec::new();
    map.write_csv(&mut csv)?;
    write_text(&a.out, std::str::from_utf8(&csv).expect("csv is utf-8"))?;
    if let Some(json) = &a.json {
        write_text(json, &to_json(&map))?;
    }
    Ok(())
}

fn read_sensitivity(path: &Path, method: Method) -> Result<SensitivityMap> {
    if path.extension().is_some_and(|e| e == "json") {
        let m: SensitivityMap = from_json(path)?;
        m.check()?;
        Ok(m)
    } else {
        Ok(SensitivityMap::read_csv(
            read_text(path)?.as_bytes(),
            method,
        )?)
    }
}

fn parse_ratio_value(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|r| (0.0..=1.0).contains(r))
        .ok_or_else(|| Error::Usage(format!("ratio {s:?} must be a number in [0, 1]")))
}

fn parse_explicit_ratios(spec: &str, g: &ModelGraph) -> Result<BTreeMap<String, f64>> {
    if !spec.contains('=') {
        let r = parse_ratio_value(spec)?;
        return Ok(g.prunable_layers().into_iter().map(|l| (l, r)).collect());
    }
    spec.split(',')
        .map(|pair| {
            let (layer, r) = pair
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("expected layer=ratio, got {pair:?}")))?;
            Ok((layer.trim().to_string(), parse_ratio_value(r)?))
        })
        .collect()
}

fn cmd_prune(a: &PruneArgs) -> Result<()> {
    let g = load(&a.model)?;
    let (ratios, source) = match (&a.sensitivity, a.threshold, &a.ratios) {
        (Some(path), Some(t), None) => {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Usage(format!("threshold {t} must be in (0, 1]")));
            }
            let map = read_sensitivity(path, a.method)?;
            (ratios_for_threshold(&map, t), PlanSource::Threshold(t))
        }
        (None, None, Some(spec)) => {
            let r = parse_explicit_ratios(spec, &g)?;
            (r.clone(), PlanSource::Ratios(r))
        }
        _ => {
            return Err(Error::Usage(
                "give either --sensitivity with --threshold, or --ratios".into(),
            ))
        }
    };
    let plan = match &a.rankings {
        Some(path) => {
            let list: Vec<FilterRanking> = from_json(path)?;
            let rankings: BTreeMap<String, FilterRanking> =
                list.into_iter().map(|r| (r.layer.clone(), r)).collect();
            build_plan(&g, a.method, &rankings, &ratios, Some(source))?
        }
        None => plan_from_ratios(&g, a.method, &ratios, Some(source))?,
    };
    for w in &plan.warnings {
        eprintln!("warning: {w}");
    }
    let pruned = apply_plan(&g, &plan)?;
    save_model(&pruned, &a.out, &blob_path_for(&a.out))?;

    let plan_path = a.plan.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".plan.json");
        PathBuf::from(s)
    });
    write_text(&plan_path, &to_json(&plan))?;

    let (before, after) = match a.data.load()? {
        Some(d) => (
            Some(evaluate(&g, &d, a.data.topk)?.accuracy),
            Some(evaluate(&pruned, &d, a.data.topk)?.accuracy),
        ),
        None => (None, None),
    };
    let report = reduction_report(&g, &pruned, before, after)?;
    if let Some(path) = &a.report {
        write_text(path, &to_json(&report))?;
    }
    print!(
        "{}",
        report.render_table(&model_label(&a.model), a.method.display_name())
    );
    Ok(())
}

fn model_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let g = load(&a.model)?;
    let d = a.data.require()?;
    let r = evaluate(&g, &d, a.data.topk)?;
    println!(
        "accuracy={} correct={} total={} topk={}",
        r.accuracy, r.correct, r.total, a.data.topk
    );
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let before = load(&a.model)?;
    let after = load(&a.pruned)?;
    let (acc_b, acc_a) = match a.data.load()? {
        Some(d) => (
            Some(evaluate(&before, &d, a.data.topk)?.accuracy),
            Some(evaluate(&after, &d, a.data.topk)?.accuracy),
        ),
        None => (None, None),
    };
    let report = reduction_report(&before, &after, acc_b, acc_a)?;
    if let Some(out) = &a.out {
        write_text(out, &to_json(&report))?;
    }
    print!(
        "{}",
        report.render_table(&model_label(&a.model), &model_label(&a.pruned))
    );
    Ok(())
}

fn cmd_signs(a: &SignsArgs) -> Result<()> {
    let g = load(&a.model)?;
    let layers = conv_layers(&g, a.layer.as_deref())?;
    let rows: Vec<_> = sign_ratio_report(&g)
        .into_iter()
        .filter(|r| layers.contains(&r.layer))
        .collect();
    write_text(&a.out, &to_json(&rows))
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Rank(a) => cmd_rank(a),
        Command::Sensitivity(a) => cmd_sensitivity(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Signs(a) => cmd_signs(a),
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(Error::Usage(msg)) => {
            eprintln!("error[Usage]: {msg}");
            2
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            1
        }
    }
}
