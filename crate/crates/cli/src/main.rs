//! `ood-audit`: evaluate, audit and repair OoD object-detection benchmarks.

mod io;
mod scores;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ood_audit::audit::{audit_type1, audit_type2, detect_outliers, OutlierMask, DEFAULT_AUDIT_CONF};
use ood_audit::calibration::{calibrate_threshold, DEFAULT_TARGET_TPR};
use ood_audit::curation::{curate_dataset, prep_finetune_manifest, read_jsonl, write_jsonl, CurationConfig, RetainedEntry};
use ood_audit::dump::{load_dump, validate_dump, write_dump};
use ood_audit::evaluation::{
    confidence_trend, count_hallucinations, detection_metrics, fpr95, inflation_report, kde_report, reduction_stats,
    write_trend_csv, DEFAULT_EVAL_CONF, DEFAULT_GRID_POINTS, DEFAULT_MATCH_IOU,
};
use ood_audit::filters::sidecar::{load_model, quantize, save_model};
use ood_audit::filters::{fit_filter, score_dump};
use ood_audit::simulator::{generate_dump, simulate_lemma1, simulate_tau_shift, write_sweep_csv, SynthConfig};
use ood_audit::{CalibrationResult, ClassMap, Dump, Error, FilterModel, FilterSpec, Result, SplitKind};
use serde::Serialize;
use serde_json::json;

use crate::io::{envelope, read_report, sink, write_json, Provenance};

#[derive(Parser)]
#[command(name = "ood-audit", version, about = "Evaluate, audit and repair OoD object-detection benchmarks")]
struct Cli {
    /// Worker threads for per-image stages (default: all cores).
    #[arg(long, global = true, env = "OOD_AUDIT_THREADS")]
    threads: Option<usize>,
    /// Write the primary output here instead of stdout.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dump against the format invariants.
    Validate(ValidateArgs),
    /// Benchmark and calibration-set audits.
    #[command(subcommand)]
    Audit(AuditCmd),
    /// Fit a filter on ID calibration detections and calibrate its threshold.
    Calibrate(CalibrateArgs),
    /// Metrics over dumps, models and score files.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Reject candidate images that contain ID objects.
    Curate(CurateArgs),
    /// Merge ID training data with proximal background images.
    PrepFinetune(PrepArgs),
    /// Synthetic experiments and data generation.
    #[command(subcommand)]
    Simulate(SimCmd),
    /// Plot-ready data.
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Args, Serialize)]
struct ValidateArgs {
    #[arg(long)]
    dump: PathBuf,
}

#[derive(Subcommand)]
enum AuditCmd {
    /// ID objects inside an OoD test split.
    Type1(AuditArgs),
    /// Unlabeled OoD objects inside an ID split.
    Type2(AuditArgs),
    /// Per-category Tukey outliers in an ID split.
    Outliers(OutlierArgs),
}

#[derive(Args, Serialize)]
struct AuditArgs {
    #[arg(long)]
    dump: PathBuf,
    /// JSON object mapping auxiliary names to ID classes.
    #[arg(long)]
    class_map: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_AUDIT_CONF)]
    conf: f64,
}

#[derive(Args, Serialize)]
struct OutlierArgs {
    #[arg(long)]
    dump: PathBuf,
    /// Filter to fit on the dump, e.g. `knn:k=10`.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    filter: Option<String>,
    /// Score with a saved model instead of fitting one.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_AUDIT_CONF)]
    conf: f64,
    #[arg(long)]
    mask_out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct CalibrateArgs {
    #[arg(long)]
    filter: String,
    #[arg(long)]
    cali: PathBuf,
    /// Exclude detections listed in this mask from calibration.
    #[arg(long)]
    outlier_mask: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_AUDIT_CONF)]
    conf: f64,
    #[arg(long, default_value_t = DEFAULT_TARGET_TPR)]
    target_tpr: f64,
    #[arg(long)]
    model_out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Count confident detections on an OoD test split.
    Hallucinations(HallucinationArgs),
    /// FPR at 95% TPR from score files or from a model and two dumps.
    Fpr95(FprArgs),
    /// mAP, precision, recall and F-score on an ID test split.
    Map(MapArgs),
    /// FPR95 with and without images flagged by a Type-1 audit.
    Inflation(InflationArgs),
    /// Relative reduction of per-split counts.
    Reduction(ReductionArgs),
    /// Mean confidence per checkpoint (CSV).
    Trend(TrendArgs),
    /// Per-detection scores of a dump (CSV).
    Scores(ScoreArgs),
}

#[derive(Args, Serialize)]
struct HallucinationArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long, requires = "calibration")]
    model: Option<PathBuf>,
    /// Output of `calibrate`.
    #[arg(long, requires = "model")]
    calibration: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_EVAL_CONF)]
    conf: f64,
}

#[derive(Args, Serialize)]
struct FprArgs {
    #[arg(long, requires = "ood_scores", conflicts_with = "model")]
    id_scores: Option<PathBuf>,
    #[arg(long, requires = "id_scores")]
    ood_scores: Option<PathBuf>,
    #[arg(long, requires_all = ["id_dump", "ood_dump"], required_unless_present = "id_scores")]
    model: Option<PathBuf>,
    #[arg(long)]
    id_dump: Option<PathBuf>,
    #[arg(long)]
    ood_dump: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_EVAL_CONF)]
    conf: f64,
}

#[derive(Args, Serialize)]
struct MapArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MATCH_IOU)]
    iou: f64,
    #[arg(long, default_value_t = DEFAULT_EVAL_CONF)]
    conf: f64,
}

#[derive(Args, Serialize)]
struct InflationArgs {
    #[arg(long)]
    dump: PathBuf,
    /// Output of `audit type1`.
    #[arg(long)]
    audit: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EVAL_CONF)]
    conf: f64,
}

#[derive(Args, Serialize)]
struct ReductionArgs {
    /// `split=count` pairs, comma separated or repeated.
    #[arg(long, value_delimiter = ',', required = true)]
    before: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    after: Vec<String>,
}

#[derive(Args, Serialize)]
struct TrendArgs {
    /// OoD test dumps in checkpoint order.
    #[arg(long, num_args = 1.., required = true)]
    dumps: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_EVAL_CONF)]
    conf: f64,
}

#[derive(Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dump: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EVAL_CONF)]
    conf: f64,
}

#[derive(Args, Serialize)]
struct CurateArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Retained manifest (JSONL).
    #[arg(long)]
    retained_out: Option<PathBuf>,
    /// Rejections with reasons (JSONL).
    #[arg(long)]
    rejected_out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct PrepArgs {
    #[arg(long)]
    id_train: PathBuf,
    /// Retained manifest from `curate`.
    #[arg(long)]
    proximal: PathBuf,
    #[arg(long)]
    lambda: f64,
}

#[derive(Subcommand)]
enum SimCmd {
    /// Monte Carlo of the expected hallucination count (CSV).
    Lemma1(Lemma1Args),
    /// Threshold and FPR95 over contamination rates (CSV).
    TauShift(TauShiftArgs),
    /// Generate a synthetic dump.
    Gen(GenArgs),
}

#[derive(Args, Serialize)]
struct Lemma1Args {
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    g: usize,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct TauShiftArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1")]
    rates: Vec<f64>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct GenArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    split: SplitKind,
    #[arg(long)]
    seed: u64,
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Kernel density curves of ID and OoD scores (CSV).
    Kde(KdeArgs),
}

#[derive(Args, Serialize)]
struct KdeArgs {
    #[arg(long)]
    id_scores: PathBuf,
    #[arg(long)]
    ood_scores: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    grid: usize,
    /// Mask applied to ID scores that carry image_id/detection columns.
    #[arg(long)]
    outlier_mask: Option<PathBuf>,
    /// Threshold markers (CSV).
    #[arg(long)]
    markers_out: Option<PathBuf>,
}

fn class_map(dump: &Dump, path: Option<&PathBuf>, prov: &mut Provenance) -> Result<ClassMap> {
    match path {
        Some(p) => {
            prov.input("class_map", p)?;
            ClassMap::load(&dump.header.class_list, p)
        }
        None => Ok(ClassMap::identity(&dump.header.class_list)),
    }
}

fn load(role: &str, path: &PathBuf, prov: &mut Provenance) -> Result<Dump> {
    prov.input(role, path)?;
    load_dump(path)
}

fn load_scored_model(path: &PathBuf, prov: &mut Provenance) -> Result<FilterModel> {
    prov.input("model", path)?;
    load_model(path)
}

fn parse_pairs(items: &[String]) -> Result<Vec<(String, u64)>> {
    items
        .iter()
        .map(|s| {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::InvalidParameter(format!("expected split=count, got `{s}`")))?;
            let n = v.trim().parse().map_err(|_| Error::InvalidParameter(format!("bad count in `{s}`")))?;
            Ok((k.trim().to_string(), n))
        })
        .collect()
}

fn read_config<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema { line: e.line(), message: e.to_string() })
}

fn score_values(model: &FilterModel, dump: &Dump, conf: f64) -> Result<Vec<f64>> {
    Ok(score_dump(model, dump, conf)?.into_iter().map(|s| s.score).collect())
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.as_ref();
    let mut prov = Provenance::default();
    match cli.command {
        Command::Validate(a) => {
            let dump = load("dump", &a.dump, &mut prov)?;
            let violations = validate_dump(&dump);
            let report = json!({ "valid": violations.is_empty(), "violations": violations, "records": dump.records.len() });
            write_json(&envelope("validate", &report, &a, &prov)?, out)
        }
        Command::Audit(AuditCmd::Type1(a)) => {
            let dump = load("dump", &a.dump, &mut prov)?;
            let report = audit_type1(&dump, &class_map(&dump, a.class_map.as_ref(), &mut prov)?, a.conf)?;
            write_json(&envelope("audit type1", &report, &a, &prov)?, out)
        }
        Command::Audit(AuditCmd::Type2(a)) => {
            let dump = load("dump", &a.dump, &mut prov)?;
            let report = audit_type2(&dump, &class_map(&dump, a.class_map.as_ref(), &mut prov)?, a.conf)?;
            write_json(&envelope("audit type2", &report, &a, &prov)?, out)
        }
        Command::Audit(AuditCmd::Outliers(a)) => {
            let dump = load("dump", &a.dump, &mut prov)?;
            let model = match (&a.filter, &a.model) {
                (_, Some(m)) => load_scored_model(m, &mut prov)?,
                (Some(f), None) => quantize(&fit_filter(f.parse::<FilterSpec>()?, &dump, None)?)?,
                (None, None) => return Err(Error::InvalidParameter("--filter or --model is required".into())),
            };
            let audit = detect_outliers(&dump, &model, a.conf)?;
            if let Some(p) = &a.mask_out {
                audit.mask.save(p)?;
            }
            let report = json!({
                "filter": model.spec().to_string(),
                "audit": audit.report,
                "fences": audit.fences,
                "mask": audit.mask,
            });
            write_json(&envelope("audit outliers", &report, &a, &prov)?, out)
        }
        Command::Calibrate(a) => {
            let spec: FilterSpec = a.filter.parse()?;
            let cali = load("cali", &a.cali, &mut prov)?;
            // score with the model exactly as it will be reloaded
            let model = quantize(&fit_filter::<f64>(spec, &cali, None)?)?;
            let scored = score_dump(&model, &cali, a.conf)?;
            let (scores, masked) = match &a.outlier_mask {
                Some(p) => {
                    prov.input("outlier_mask", p)?;
                    let mask = OutlierMask::load(p)?;
                    let kept = mask.retain_scores(&scored);
                    let masked = scored.len() - kept.len();
                    (kept, masked)
                }
                None => (scored.iter().map(|s| s.score).collect(), 0),
            };
            let calib = calibrate_threshold(&scores, a.target_tpr)?;
            save_model(&a.model_out, &model)?;
            let report = json!({
                "filter": model.spec().to_string(),
                "tau": calib.tau,
                "retention": calib.retention,
                "n_cali": calib.n_cali,
                "target_tpr": calib.target_tpr,
                "n_masked": masked,
                "model_sha256": io::sha256_file(&a.model_out)?,
            });
            write_json(&envelope("calibrate", &report, &a, &prov)?, out)
        }
        Command::Eval(cmd) => eval(cmd, out, prov),
        Command::Curate(a) => {
            let cands = load("candidates", &a.candidates, &mut prov)?;
            prov.input("config", &a.config)?;
            let config: CurationConfig = read_config(&a.config)?;
            let outcome = curate_dataset(&cands, &config)?;
            if let Some(p) = &a.retained_out {
                write_jsonl(&outcome.retained, sink(Some(p))?)?;
            }
            if let Some(p) = &a.rejected_out {
                write_jsonl(&outcome.rejected, sink(Some(p))?)?;
            }
            let report = json!({
                "candidates": cands.records.len(),
                "retained": outcome.retained.len(),
                "rejected": outcome.rejected.len(),
                "retained_ids": outcome.retained.iter().map(|r| &r.image_id).collect::<Vec<_>>(),
                "rejections": outcome.rejected,
            });
            write_json(&envelope("curate", &report, &a, &prov)?, out)
        }
        Command::PrepFinetune(a) => {
            let train = load("id_train", &a.id_train, &mut prov)?;
            prov.input("proximal", &a.proximal)?;
            let proximal: Vec<RetainedEntry> = read_jsonl(std::io::BufReader::new(std::fs::File::open(&a.proximal).map_err(Error::file(&a.proximal))?))?;
            let manifest = prep_finetune_manifest(&train, &proximal, a.lambda)?;
            write_json(&envelope("prep-finetune", &manifest, &a, &prov)?, out)
        }
        Command::Simulate(SimCmd::Lemma1(a)) => {
            let r = simulate_lemma1(a.alpha, a.g, a.trials, a.seed)?;
            let mut w = sink(out)?;
            writeln!(w, "seed,alpha,g,trials,mean,std_error,expected")?;
            writeln!(w, "{},{},{},{},{},{},{}", r.seed, r.alpha, r.g_count, r.trials, r.mean, r.std_error, r.expected)?;
            w.flush()?;
            Ok(())
        }
        Command::Simulate(SimCmd::TauShift(a)) => {
            let mut config: SynthConfig = read_config(&a.config)?;
            config.seed = a.seed;
            let rows = simulate_tau_shift(&config, &a.rates)?;
            let mut w = sink(out)?;
            write_sweep_csv(&rows, a.seed, &mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::Simulate(SimCmd::Gen(a)) => {
            let mut config: SynthConfig = read_config(&a.config)?;
            config.seed = a.seed;
            let dump = generate_dump(&config, a.split)?;
            write_dump(&dump, sink(out)?)
        }
        Command::Report(ReportCmd::Kde(a)) => {
            let id = scores::read_scores(&a.id_scores)?;
            let ood = scores::read_scores(&a.ood_scores)?;
            let mask = match &a.outlier_mask {
                Some(p) => Some(scores::mask_rows(&id, &OutlierMask::load(p)?)),
                None => None,
            };
            let id_v: Vec<f64> = id.iter().map(|r| r.score).collect();
            let ood_v: Vec<f64> = ood.iter().map(|r| r.score).collect();
            let report = kde_report(&id_v, &ood_v, a.grid, mask.as_deref())?;
            let mut w = sink(out)?;
            report.write_curves_csv(&mut w)?;
            w.flush()?;
            if let Some(p) = &a.markers_out {
                let mut m = sink(Some(p))?;
                report.write_markers_csv(&mut m)?;
                m.flush()?;
            }
            Ok(())
        }
    }
}

fn eval(cmd: EvalCmd, out: Option<&PathBuf>, mut prov: Provenance) -> Result<()> {
    match cmd {
        EvalCmd::Hallucinations(a) => {
            let dump = load("dump", &a.dump, &mut prov)?;
            let report = match (&a.model, &a.calibration) {
                (Some(m), Some(c)) => {
                    let model = load_scored_model(m, &mut prov)?;
                    prov.input("calibration", c)?;
                    let calib: CalibrationResult = read_report(c)?;
                    count_hallucinations(&dump, Some((&model, &calib)), a.conf)?
                }
                _ => count_hallucinations::<f64>(&dump, None, a.conf)?,
            };
            write_json(&envelope("eval hallucinations", &report, &a, &prov)?, out)
        }
        EvalCmd::Fpr95(a) => {
            let (id, ood) = match (&a.id_scores, &a.ood_scores, &a.model) {
                (Some(i), Some(o), _) => {
                    prov.input("id_scores", i)?;
                    prov.input("ood_scores", o)?;
                    let f = |rows: Vec<scores::ScoreRow>| rows.into_iter().map(|r| r.score).collect::<Vec<f64>>();
                    (f(scores::read_scores(i)?), f(scores::read_scores(o)?))
                }
                (_, _, Some(m)) => {
                    let model = load_scored_model(m, &mut prov)?;
                    let id_dump = load("id_dump", a.id_dump.as_ref().expect("required by clap"), &mut prov)?;
                    let ood_dump = load("ood_dump", a.ood_dump.as_ref().expect("required by clap"), &mut prov)?;
                    (score_values(&model, &id_dump, a.conf)?, score_values(&model, &ood_dump, a.conf)?)
                }
                _ => return Err(Error::InvalidParameter("give --id-scores/--ood-scores or --model".into())),
            };
            let report = json!({ "fpr95": fpr95(&id, &ood)?, "n_id": id.len(), "n_ood": ood.len() });
            write_json(&envelope("eval fpr95", &report, &a, &prov)?, out)
        }
        EvalCmd::Map(a) => {
            let dump = load("dump", &a.dump, &mut prov)?;
            let report = detection_metrics(&dump, a.iou, a.conf)?;
            write_json(&envelope("eval map", &report, &a, &prov)?, out)
        }
        EvalCmd::Inflation(a) => {
            let dump = load("dump", &a.dump, &mut prov)?;
            prov.input("audit", &a.audit)?;
            let audit = read_report(&a.audit)?;
            let model = load_scored_model(&a.model, &mut prov)?;
            prov.input("calibration", &a.calibration)?;
            let calib: CalibrationResult = read_report(&a.calibration)?;
            let report = inflation_report(&dump, &audit, &model, &calib, a.conf)?;
            write_json(&envelope("eval inflation", &report, &a, &prov)?, out)
        }
        EvalCmd::Reduction(a) => {
            let r = reduction_stats(&parse_pairs(&a.before)?, &parse_pairs(&a.after)?)?;
            let report = json!({
                "splits": r.splits.iter().map(|s| json!({
                    "split": s.split, "before": s.before, "after": s.after, "reduction_pct": s.reduction * 100.0,
                })).collect::<Vec<_>>(),
                "pooled_before": r.pooled_before,
                "pooled_after": r.pooled_after,
                "pooled_pct": r.pooled_pct(),
            });
            write_json(&envelope("eval reduction", &report, &a, &prov)?, out)
        }
        EvalCmd::Trend(a) => {
            let dumps = a.dumps.iter().map(load_dump).collect::<Result<Vec<_>>>()?;
            let points = confidence_trend(&dumps, a.conf)?;
            let mut w = sink(out)?;
            write_trend_csv(&points, &mut w)?;
            w.flush()?;
            Ok(())
        }
        EvalCmd::Scores(a) => {
            let model: FilterModel = load_model(&a.model)?;
            let dump = load_dump(&a.dump)?;
            scores::write_scores(&score_dump(&model, &dump, a.conf)?, sink(out)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", json!({ "error": { "kind": "invalid_parameter", "message": e.to_string() } }));
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}
