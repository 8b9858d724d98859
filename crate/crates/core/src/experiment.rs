//! End-to-end runs: data, partition, training, artifacts on disk, and the
//! post-hoc analyses over a finished run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{sweep_points, DataSource, ExperimentConfig, Precision, RunMode};
use crate::data::{synthesize_longtail, DatasetBundle};
use crate::error::{Error, Result};
use crate::federation::{
    predict_indices, run_centralized, run_federation, DataView, FederationOutcome, RoundRecord, Trainer,
};
use crate::imbalance::{
    client_imbalance, dynamic_coefficient, global_class_imbalance, head_tail_split, imbalance_score, ClassHistogram,
    HeadTailSplit,
};
use crate::metrics::{auc_ovr, decision_curve, softmax_rows, MetricReport};
use crate::model::{ModelParams, ModelSpec};
use crate::partition::{partition, PartitionResult};
use crate::rollout::{attention_rollout, collect_attention};
use crate::tensor::{Scalar, Tensor};

pub const CONFIG_FILE: &str = "config.toml";
pub const ROUND_LOG_FILE: &str = "round_log.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const IMBALANCE_FILE: &str = "imbalance.json";
pub const PARTITION_FILE: &str = "partition.tsv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const COMPARISON_FILE: &str = "comparison.csv";

/// Files a completed run directory must contain.
pub const RUN_ARTIFACTS: &[&str] = &[
    CONFIG_FILE,
    ROUND_LOG_FILE,
    METRICS_FILE,
    CHECKPOINT_FILE,
    IMBALANCE_FILE,
    PARTITION_FILE,
    SUMMARY_FILE,
];

pub fn load_data(cfg: &ExperimentConfig) -> Result<DatasetBundle> {
    let data = match &cfg.data {
        DataSource::Synth(s) => synthesize_longtail(s)?,
        DataSource::Path { path } => DatasetBundle::load(path)?,
    };
    if data.num_classes() != cfg.model.num_classes() {
        return Err(Error::config(format!(
            "dataset has {} classes, model.num_classes = {}",
            data.num_classes(),
            cfg.model.num_classes()
        )));
    }
    if data.sample_len() != cfg.model.input_len() {
        return Err(Error::config(format!(
            "dataset samples have shape {:?}, model expects {} values",
            data.sample_shape(),
            cfg.model.input_len()
        )));
    }
    Ok(data)
}

/// Imbalance statistics of a partition, as written to `imbalance.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSummary {
    pub class_names: Vec<String>,
    pub client_histograms: Vec<ClassHistogram>,
    pub test_histogram: ClassHistogram,
    pub client_coeffs: Vec<f64>,
    pub class_coeffs: Vec<f64>,
    /// `(N - n) / n` over the pooled client data; `null` for absent classes.
    pub scores: Vec<Option<f64>>,
    pub split: HeadTailSplit,
    pub epsilon: f64,
    pub lambda: f64,
    pub warnings: Vec<String>,
}

/// Head/tail split over pooled counts; absent classes rank as rarest.
pub fn split_for(pool: &ClassHistogram, tail_fraction: f64) -> Result<(Vec<Option<f64>>, HeadTailSplit)> {
    let total = pool.total();
    let scores: Vec<Option<f64>> = pool
        .counts()
        .iter()
        .map(|&n| (n > 0).then(|| imbalance_score(total, n)).transpose())
        .collect::<Result<_>>()?;
    let ranked: Vec<f64> = scores.iter().map(|s| s.unwrap_or(f64::INFINITY)).collect();
    Ok((scores, head_tail_split(&ranked, tail_fraction)?))
}

/// Data, partition and imbalance statistics for a config.
pub struct Plan {
    pub data: DatasetBundle,
    pub partition: PartitionResult,
    pub imbalance: ImbalanceSummary,
}

pub fn plan(cfg: &ExperimentConfig) -> Result<Plan> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let c = data.num_classes();
    let part = partition(data.labels(), c, &cfg.partition)?;
    if part.test.is_empty() {
        return Err(Error::config("partition produced an empty global test set"));
    }
    let pool = ClassHistogram::merge(&part.histograms)?;
    let (scores, split) = split_for(&pool, cfg.analysis.tail_fraction)?;
    let client_coeffs = part
        .histograms
        .iter()
        .map(|h| if h.total() == 0 { Ok(0.0) } else { client_imbalance(h, cfg.loss.epsilon) })
        .collect::<Result<Vec<_>>>()?;
    let imbalance = ImbalanceSummary {
        class_names: data.class_names().to_vec(),
        client_histograms: part.histograms.clone(),
        test_histogram: ClassHistogram::from_labels(part.test.iter().map(|&i| data.labels()[i]), c)?,
        client_coeffs,
        class_coeffs: global_class_imbalance(&part.histograms, cfg.loss.epsilon)?,
        scores,
        split,
        epsilon: cfg.loss.epsilon,
        lambda: cfg.loss.lambda,
        warnings: part.warnings.clone(),
    };
    Ok(Plan {
        data,
        partition: part,
        imbalance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub mode: RunMode,
    pub loss: String,
    pub model: String,
    pub num_params: usize,
    pub rounds: usize,
    pub test_size: usize,
    /// Global-test metrics of the final model.
    pub test: MetricReport,
    pub tail_classes: Vec<usize>,
    /// Mean recall over the tail classes.
    pub tail_recall: f64,
    pub final_gamma: f64,
    pub dry_run: bool,
}

fn write_metrics_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "round",
        "accuracy",
        "precision",
        "recall",
        "f1",
        "specificity",
        "auc",
        "tail_grad_norm",
        "head_grad_norm",
        "gamma",
        "train_loss",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        let m = &r.metrics;
        w.write_record([
            r.round.to_string(),
            m.accuracy.to_string(),
            m.precision.to_string(),
            m.recall.to_string(),
            m.f1.to_string(),
            m.specificity.to_string(),
            opt(m.auc),
            opt(r.grad_norms.tail),
            opt(r.grad_norms.head),
            r.gamma.to_string(),
            r.train_loss.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::contract(format!("csv: {other:?}")),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::contract(e.to_string()))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn write_round_log(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::contract(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn tail_recall(report: &MetricReport, split: &HeadTailSplit) -> f64 {
    if split.tail.is_empty() {
        return f64::NAN;
    }
    split.tail.iter().map(|&c| report.per_class[c].recall).sum::<f64>() / split.tail.len() as f64
}

/// Writes the config echo, partition manifest and imbalance report.
fn write_plan(cfg: &ExperimentConfig, plan: &Plan) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    fs::write(cfg.out_dir.join(PARTITION_FILE), plan.partition.manifest())?;
    write_json(&cfg.out_dir.join(IMBALANCE_FILE), &plan.imbalance)
}

/// Validates, partitions and (unless `dry_run`) trains, writing every
/// artifact into `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dry_run: bool) -> Result<RunSummary> {
    let plan = plan(cfg)?;
    write_plan(cfg, &plan)?;
    if dry_run {
        return Ok(RunSummary {
            name: cfg.name.clone(),
            mode: cfg.mode,
            loss: cfg.loss.kind.label().into(),
            model: cfg.model.label().into(),
            num_params: cfg.model.param_count(),
            rounds: 0,
            test_size: plan.partition.test.len(),
            test: MetricReport {
                accuracy: f64::NAN,
                precision: f64::NAN,
                recall: f64::NAN,
                f1: f64::NAN,
                specificity: f64::NAN,
                auc: None,
                per_class: Vec::new(),
                flags: vec!["dry run: no training".into()],
            },
            tail_classes: plan.imbalance.split.tail.clone(),
            tail_recall: f64::NAN,
            final_gamma: cfg.loss.gamma,
            dry_run: true,
        });
    }
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, &plan),
        Precision::F64 => train_typed::<f64>(cfg, &plan),
    }
}

/// Trains per `cfg` on a prepared plan and returns the outcome without
/// touching the file system.
pub fn train_plan<T: Scalar>(cfg: &ExperimentConfig, plan: &Plan) -> Result<FederationOutcome<T>> {
    let features = plan.data.features_as::<T>();
    let view = DataView::new(&features, plan.data.labels(), plan.data.sample_len())?;
    let tr = Trainer {
        model: &cfg.model,
        loss: &cfg.loss,
        fed: &cfg.federation,
        data: view,
        split: &plan.imbalance.split,
    };
    let init = crate::federation::init_params::<T>(&cfg.model, &cfg.loss, cfg.federation.seed)?;
    match cfg.mode {
        RunMode::Federated => run_federation(&tr, init, &plan.partition.clients, &plan.partition.test),
        RunMode::Centralized => {
            let mut pool: Vec<usize> = plan.partition.clients.concat();
            pool.sort_unstable();
            run_centralized(&tr, init, &pool)
        }
    }
}

fn test_report<T: Scalar>(model: &ModelSpec, params: &ModelParams<T>, data: &DatasetBundle, test: &[usize]) -> Result<(Tensor<T>, MetricReport)> {
    let features = data.features_as::<T>();
    let view = DataView::new(&features, data.labels(), data.sample_len())?;
    let logits = predict_indices(model, params, &view, test)?;
    let labels: Vec<usize> = test.iter().map(|&i| data.labels()[i]).collect();
    let report = MetricReport::from_logits(&logits, &labels)?;
    Ok((logits, report))
}

fn train_typed<T: Scalar>(cfg: &ExperimentConfig, plan: &Plan) -> Result<RunSummary> {
    let out = train_plan::<T>(cfg, plan)?;
    let dir = &cfg.out_dir;
    write_round_log(&dir.join(ROUND_LOG_FILE), &out.records)?;
    write_metrics_csv(&dir.join(METRICS_FILE), &out.records)?;
    out.params.save(&dir.join(CHECKPOINT_FILE))?;
    let (_, test) = test_report(&cfg.model, &out.params, &plan.data, &plan.partition.test)?;
    let summary = RunSummary {
        name: cfg.name.clone(),
        mode: cfg.mode,
        loss: cfg.loss.kind.label().into(),
        model: cfg.model.label().into(),
        num_params: out.params.num_scalars(),
        rounds: out.records.len(),
        test_size: plan.partition.test.len(),
        tail_classes: plan.imbalance.split.tail.clone(),
        tail_recall: tail_recall(&test, &plan.imbalance.split),
        final_gamma: crate::federation::gamma_value(&out.params, &cfg.loss),
        test,
        dry_run: false,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Runs every point of a preset sweep under `base.out_dir/<label>` and
/// writes a comparison table at `base.out_dir/comparison.csv`.
pub fn run_sweep(base: &ExperimentConfig, sweep: &str, dry_run: bool) -> Result<Vec<(String, RunSummary)>> {
    let points = sweep_points(sweep)?;
    let mut configs = Vec::with_capacity(points.len());
    for p in &points {
        let mut c = base.clone();
        for o in &p.overrides {
            c.apply_override(o)?;
        }
        c.name = p.label.clone();
        c.out_dir = base.out_dir.join(&p.label);
        c.validate()?;
        configs.push(c);
    }
    let mut rows = Vec::with_capacity(configs.len());
    for c in &configs {
        rows.push((c.name.clone(), run_experiment(c, dry_run)?));
    }
    fs::create_dir_all(&base.out_dir)?;
    let mut w = csv::Writer::from_path(base.out_dir.join(COMPARISON_FILE)).map_err(csv_err)?;
    w.write_record(["setting", "accuracy", "precision", "recall", "f1", "specificity", "auc", "tail_recall"])
        .map_err(csv_err)?;
    for (label, s) in &rows {
        let t = &s.test;
        w.write_record([
            label.clone(),
            t.accuracy.to_string(),
            t.precision.to_string(),
            t.recall.to_string(),
            t.f1.to_string(),
            t.specificity.to_string(),
            t.auc.map(|a| a.to_string()).unwrap_or_default(),
            s.tail_recall.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Reads a `partition.tsv` manifest back into client and test index lists.
pub fn read_partition_manifest(path: &Path) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let text = fs::read_to_string(path)?;
    let file = path.display().to_string();
    let mut clients: Vec<Vec<usize>> = Vec::new();
    let mut test = Vec::new();
    let mut offset = 0;
    for line in text.lines() {
        let bad = |m: String| Error::Ingest {
            file: file.clone(),
            offset,
            message: m,
        };
        let (idx, owner) = line
            .split_once('\t')
            .ok_or_else(|| bad(format!("expected index<TAB>assignment, got {line:?}")))?;
        let idx: usize = idx.parse().map_err(|_| bad(format!("bad index {idx:?}")))?;
        if owner == "test" {
            test.push(idx);
        } else {
            let j: usize = owner
                .strip_prefix("client-")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("bad assignment {owner:?}")))?;
            if clients.len() <= j {
                clients.resize(j + 1, Vec::new());
            }
            clients[j].push(idx);
        }
        offset += line.len() + 1;
    }
    Ok((clients, test))
}

fn missing_artifacts(dir: &Path) -> Vec<&'static str> {
    RUN_ARTIFACTS.iter().copied().filter(|f| !dir.join(f).is_file()).collect()
}

fn require_run(dir: &Path) -> Result<()> {
    let missing = missing_artifacts(dir);
    if missing.is_empty() {
        return Ok(());
    }
    Err(Error::contract(format!(
        "{} is not a completed run directory: missing {}; expected {}",
        dir.display(),
        missing.join(", "),
        RUN_ARTIFACTS.join(", ")
    )))
}

/// A completed run loaded back from disk.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub data: DatasetBundle,
    pub test: Vec<usize>,
    pub imbalance: ImbalanceSummary,
    pub records: Vec<RoundRecord>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    require_run(dir)?;
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let data = load_data(&config)?;
    let (_, test) = read_partition_manifest(&dir.join(PARTITION_FILE))?;
    let imbalance: ImbalanceSummary = serde_json::from_str(&fs::read_to_string(dir.join(IMBALANCE_FILE))?)
        .map_err(|e| Error::contract(format!("{}: {e}", IMBALANCE_FILE)))?;
    let records = fs::read_to_string(dir.join(ROUND_LOG_FILE))?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::contract(format!("{ROUND_LOG_FILE}: {e}"))))
        .collect::<Result<Vec<RoundRecord>>>()?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        config,
        data,
        test,
        imbalance,
        records,
    })
}

/// Re-evaluates a run's checkpoint on its global test set.
pub fn evaluate_run(dir: &Path) -> Result<MetricReport> {
    let run = load_run(dir)?;
    match run.config.precision {
        Precision::F32 => evaluate_typed::<f32>(&run).map(|(_, r)| r),
        Precision::F64 => evaluate_typed::<f64>(&run).map(|(_, r)| r),
    }
}

fn evaluate_typed<T: Scalar>(run: &LoadedRun) -> Result<(Vec<Vec<f64>>, MetricReport)> {
    let params = ModelParams::<T>::load(&run.dir.join(CHECKPOINT_FILE))?;
    let (logits, report) = test_report(&run.config.model, &params, &run.data, &run.test)?;
    Ok((softmax_rows(&logits), report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub runs: Vec<String>,
    pub dca_rows: usize,
    pub roc_rows: usize,
    pub grad_norm_rows: usize,
    pub rollout_masks: usize,
}

pub const DCA_FILE: &str = "dca.csv";
pub const ROC_FILE: &str = "roc.csv";
pub const GRAD_NORMS_FILE: &str = "grad_norms.csv";
pub const ROLLOUT_DIR: &str = "rollout";

/// Run directories under `dir`: itself if it is a run, else its
/// immediate subdirectories that are runs (a sweep), in name order.
pub fn discover_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(CONFIG_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::contract(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CONFIG_FILE).is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(Error::contract(format!(
            "{} holds no run directories; expected {}",
            dir.display(),
            RUN_ARTIFACTS.join(", ")
        )));
    }
    Ok(runs)
}

/// Writes `dca.csv`, `roc.csv` and `grad_norms.csv` (and rollout masks
/// for ViT runs) into `dir`, covering every run found there.
pub fn analyze(dir: &Path) -> Result<AnalysisSummary> {
    let runs = discover_runs(dir)?;
    let mut dca = csv::Writer::from_path(dir.join(DCA_FILE)).map_err(csv_err)?;
    let mut roc = csv::Writer::from_path(dir.join(ROC_FILE)).map_err(csv_err)?;
    let mut gn = csv::Writer::from_path(dir.join(GRAD_NORMS_FILE)).map_err(csv_err)?;
    let mut summary = AnalysisSummary {
        runs: Vec::new(),
        dca_rows: 0,
        roc_rows: 0,
        grad_norm_rows: 0,
        rollout_masks: 0,
    };
    let mut header_done = false;
    roc.write_record(["model", "class", "point", "fpr", "tpr"]).map_err(csv_err)?;
    gn.write_record(["model", "round", "tail_grad_norm", "head_grad_norm"]).map_err(csv_err)?;
    for run_dir in &runs {
        let run = load_run(run_dir)?;
        let model = run.config.name.clone();
        let c = run.config.model.num_classes();
        let (probs, _) = match run.config.precision {
            Precision::F32 => evaluate_typed::<f32>(&run)?,
            Precision::F64 => evaluate_typed::<f64>(&run)?,
        };
        let labels: Vec<usize> = run.test.iter().map(|&i| run.data.labels()[i]).collect();
        let thresholds = &run.config.analysis.thresholds;

        // one row per (model, threshold): macro one-vs-rest net benefit,
        // the treat-all reference, and the per-class curves
        if !header_done {
            let mut h = vec!["model".to_string(), "threshold".into(), "net_benefit".into(), "treat_all".into(), "treat_none".into()];
            h.extend((0..c).map(|k| format!("net_benefit_class_{k}")));
            dca.write_record(&h).map_err(csv_err)?;
            header_done = true;
        }
        let mut per_class = Vec::with_capacity(c);
        let mut treat_all = Vec::with_capacity(c);
        for k in 0..c {
            let s: Vec<f64> = probs.iter().map(|r| r[k]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            per_class.push(decision_curve(&s, &pos, thresholds)?);
            treat_all.push(decision_curve(&vec![1.0; s.len()], &pos, thresholds)?);
        }
        for (ti, &t) in thresholds.iter().enumerate() {
            let nb: Vec<f64> = per_class.iter().map(|rows| rows[ti].net_benefit).collect();
            let all = treat_all.iter().map(|rows| rows[ti].net_benefit).sum::<f64>() / c as f64;
            let mut rec = vec![
                model.clone(),
                t.to_string(),
                (nb.iter().sum::<f64>() / c as f64).to_string(),
                all.to_string(),
                "0".into(),
            ];
            rec.extend(nb.iter().map(f64::to_string));
            dca.write_record(&rec).map_err(csv_err)?;
            summary.dca_rows += 1;
        }

        let auc = auc_ovr(&probs, &labels, c)?;
        for (k, pts) in auc.roc.iter().enumerate() {
            for (i, (fpr, tpr)) in pts.iter().enumerate() {
                roc.write_record([model.clone(), k.to_string(), i.to_string(), fpr.to_string(), tpr.to_string()])
                    .map_err(csv_err)?;
                summary.roc_rows += 1;
            }
        }

        for r in &run.records {
            let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            gn.write_record([model.clone(), r.round.to_string(), o(r.grad_norms.tail), o(r.grad_norms.head)])
                .map_err(csv_err)?;
            summary.grad_norm_rows += 1;
        }

        if let ModelSpec::Vit(_) = run.config.model {
            summary.rollout_masks += match run.config.precision {
                Precision::F32 => write_rollouts::<f32>(&run)?,
                Precision::F64 => write_rollouts::<f64>(&run)?,
            };
        }
        summary.runs.push(model);
    }
    dca.flush()?;
    roc.flush()?;
    gn.flush()?;
    Ok(summary)
}

fn write_rollouts<T: Scalar>(run: &LoadedRun) -> Result<usize> {
    let ModelSpec::Vit(vit) = &run.config.model else { return Ok(0) };
    let params = ModelParams::<T>::load(&run.dir.join(CHECKPOINT_FILE))?;
    let out = run.dir.join(ROLLOUT_DIR);
    fs::create_dir_all(&out)?;
    let cfg = &run.config;
    let clients = &run.imbalance.client_coeffs;
    let mean_ck = clients.iter().sum::<f64>() / clients.len().max(1) as f64;
    let gamma = T::of(crate::federation::gamma_value(&params, &cfg.loss));
    let mut n = 0;
    for &i in run.test.iter().take(cfg.analysis.rollout_samples) {
        let label = run.data.labels()[i];
        let coeff = dynamic_coefficient(mean_ck, &run.imbalance.class_coeffs, label, cfg.loss.lambda)?;
        let image: Vec<T> = run.data.sample(i).iter().map(|&v| T::of(v)).collect();
        let layers = collect_attention(vit, &params, &image, label, &cfg.loss, coeff, gamma)?;
        let mask = attention_rollout(&layers)?;
        let t = Tensor::new(vec![mask.len()], mask)?;
        fs::write(out.join(format!("sample-{i}.bin")), t.encode())?;
        n += 1;
    }
    Ok(n)
}
