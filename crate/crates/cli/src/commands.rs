//! Subcommand implementations. Each writes its artifacts under `out` and
//! returns the main report.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tabnsa::data::{load_csv, prepare, transfer_split, DatasetSplit, PreprocessState, RawTable, Task};
use tabnsa::hyperopt::{refit_best, run_search, SearchOptions, SearchResult, TrialRecord};
use tabnsa::metrics::{evaluate, EvalReport};
use tabnsa::model::flops::FLOP_COMPONENTS;
use tabnsa::model::{count_flops, count_params, load_checkpoint, save_checkpoint, FlopReport, Fusion, Model};
use tabnsa::nsa::NsaConfig;
use tabnsa::training::{train, OptimizerKind, TrainConfig, TrainHistory};

use crate::config::RunConfig;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(tabnsa::Error::from)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Provenance of one command invocation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_path: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub config: RunConfig,
    pub files: Vec<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

impl RunManifest {
    pub fn start(command: &str, config_path: Option<&Path>, csv: Option<&Path>, out: &Path, config: &RunConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_path: config_path.map(Path::to_path_buf),
            csv: csv.map(Path::to_path_buf),
            seeds: config.seeds.clone(),
            out: out.to_path_buf(),
            config: config.clone(),
            files: Vec::new(),
            started_unix: unix_now(),
            finished_unix: 0.0,
        }
    }

    pub fn finish(mut self, files: Vec<String>) -> Result<()> {
        self.files = files;
        self.finished_unix = unix_now();
        write_json(&self.out.join("manifest.json"), &self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub runs: usize,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len();
    if n == 0 {
        return Aggregate { mean: 0.0, std: 0.0, runs: 0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Aggregate { mean, std, runs: n }
}

pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Classification { num_classes: 2 } => "auc",
        Task::Classification { .. } => "macro_f1",
        Task::Regression => "inverse_rmse",
    }
}

pub fn load_table(cfg: &RunConfig, csv: &Path) -> Result<RawTable> {
    Ok(load_csv(csv, cfg.target()?, &HashMap::new())?)
}

/// One seed's train-and-test outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub task: Task,
    pub metric: String,
    pub test_metric: f64,
    pub test: EvalReport,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub params: usize,
    pub model: tabnsa::model::ModelConfig,
    pub train: TrainConfig,
}

pub struct SeedRun {
    pub report: SeedReport,
    pub model: Model,
    pub preprocess: PreprocessState,
    pub history: TrainHistory,
}

/// Split with `seed`, fit preprocessing and model, evaluate on test.
pub fn run_seed(cfg: &RunConfig, raw: &RawTable, seed: u64) -> Result<SeedRun> {
    let (split, preprocess) = prepare(raw, seed, cfg.task)?;
    let task = split.train.1.task();
    let model_cfg = cfg.model.build(split.n_features(), task);
    let mut model = Model::new(model_cfg.clone(), seed)?;
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let history = train(&mut model, &split, &train_cfg)?;
    let (x, y) = split.test();
    let test = evaluate(&model.predict(&x.to_tensor()), y)?;
    let report = SeedReport {
        seed,
        task,
        metric: metric_name(task).to_string(),
        test_metric: test.primary(task),
        test,
        best_epoch: history.best_epoch,
        epochs_run: history.epochs.len(),
        params: model.num_params(),
        model: model_cfg,
        train: train_cfg,
    };
    Ok(SeedRun { report, model, preprocess, history })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub metric: String,
    pub per_seed: BTreeMap<u64, f64>,
    pub aggregate: Aggregate,
}

pub fn cmd_train(cfg: &RunConfig, config_path: Option<&Path>, csv: &Path, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let manifest = RunManifest::start("train", config_path, Some(csv), out, cfg);
    let raw = load_table(cfg, csv)?;
    let mut files = Vec::new();
    let mut per_seed = BTreeMap::new();
    let mut metric = String::new();
    for &seed in &cfg.seeds {
        let run = run_seed(cfg, &raw, seed)?;
        let dir = format!("seed_{seed}");
        let d = out.join(&dir);
        std::fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
        save_checkpoint(d.join("checkpoint.bin"), &run.model, Some(&run.preprocess))?;
        write_text(&d.join("history.jsonl"), &run.history.to_jsonl()?)?;
        write_json(&d.join("report.json"), &run.report)?;
        for f in ["checkpoint.bin", "history.jsonl", "report.json"] {
            files.push(format!("{dir}/{f}"));
        }
        log::info!("seed {seed}: test {} = {:.4}", run.report.metric, run.report.test_metric);
        metric = run.report.metric.clone();
        per_seed.insert(seed, run.report.test_metric);
    }
    let values: Vec<f64> = per_seed.values().copied().collect();
    let summary = TrainSummary { metric, aggregate: aggregate(&values), per_seed };
    write_json(&out.join("summary.json"), &summary)?;
    files.push("summary.json".into());
    manifest.finish(files)?;
    Ok(summary)
}

pub fn cmd_eval(checkpoint: &Path, csv: &Path, out: Option<&Path>) -> Result<EvalReport> {
    let ck = load_checkpoint(checkpoint)?;
    let prep = ck
        .preprocess
        .ok_or_else(|| CliError::Usage(format!("{} carries no preprocessing state", checkpoint.display())))?;
    let raw = load_csv(csv, &prep.target_name, &HashMap::new())?;
    let (x, y) = prep.apply(&raw)?;
    let report = evaluate(&ck.model.predict(&x.to_tensor()), &y)?;
    if let Some(out) = out {
        write_json(&out.join("eval.json"), &report)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefitRun {
    pub seed: u64,
    pub test_metric: f64,
    pub test: EvalReport,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneReport {
    pub metric: String,
    pub best_trial: TrialRecord,
    pub trials: usize,
    pub refit: Vec<RefitRun>,
    pub aggregate: Aggregate,
    pub params: usize,
    /// Per-sample inference FLOPs of the chosen configuration.
    pub flops: FlopReport,
}

fn search_options(cfg: &RunConfig, split: &DatasetSplit, log_path: Option<PathBuf>) -> SearchOptions {
    let task = split.train.1.task();
    let mut opts = SearchOptions::new(cfg.model.build(split.n_features(), task), cfg.train.clone());
    opts.log_path = log_path;
    opts
}

/// Search on `split`, then refit the best trial once per seed.
fn tune_and_refit(cfg: &RunConfig, split: &DatasetSplit, log_path: Option<PathBuf>) -> Result<(SearchResult, TuneReport)> {
    let opts = search_options(cfg, split, log_path);
    let search = run_search(split, &cfg.space, cfg.budget, cfg.seeds[0], &opts)?;
    let report = refit_all(cfg, &search.best, split, &SearchOptions { log_path: None, ..opts }, search.trials.len())?;
    Ok((search, report))
}

fn refit_all(cfg: &RunConfig, best: &TrialRecord, split: &DatasetSplit, opts: &SearchOptions, trials: usize) -> Result<TuneReport> {
    let mut refit = Vec::new();
    let mut last = None;
    for &seed in &cfg.seeds {
        let r = refit_best(best, split, opts, seed)?;
        refit.push(RefitRun {
            seed,
            test_metric: r.test_metric,
            test: r.test.clone(),
            best_epoch: r.history.best_epoch,
        });
        last = Some(r);
    }
    let last = last.expect("at least one seed");
    let values: Vec<f64> = refit.iter().map(|r| r.test_metric).collect();
    Ok(TuneReport {
        metric: metric_name(last.model.task).to_string(),
        best_trial: best.clone(),
        trials,
        aggregate: aggregate(&values),
        refit,
        params: last.params,
        flops: last.flops,
    })
}

pub fn sensitivity_csv(search: &SearchResult) -> String {
    let mut s = String::from("trial,val_metric,best_so_far\n");
    for (t, best) in search.trials.iter().zip(&search.best_so_far) {
        writeln!(s, "{},{},{}", t.trial_id + 1, t.val_metric, best).expect("writing to a String cannot fail");
    }
    s
}

pub fn cmd_tune(cfg: &RunConfig, config_path: Option<&Path>, csv: &Path, out: &Path) -> Result<TuneReport> {
    cfg.validate()?;
    let manifest = RunManifest::start("tune", config_path, Some(csv), out, cfg);
    let raw = load_table(cfg, csv)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let (split, _) = prepare(&raw, cfg.seeds[0], cfg.task)?;
    let (search, report) = tune_and_refit(cfg, &split, Some(out.join("trials.jsonl")))?;
    write_text(&out.join("sensitivity.csv"), &sensitivity_csv(&search))?;
    write_json(&out.join("best_config.json"), &cfg.with_trial(&search.best))?;
    write_json(&out.join("tune_report.json"), &report)?;
    manifest.finish(
        ["trials.jsonl", "sensitivity.csv", "best_config.json", "tune_report.json"]
            .map(String::from)
            .to_vec(),
    )?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferDirection {
    pub source: String,
    pub target: String,
    pub source_features: Vec<String>,
    pub target_features: Vec<String>,
    pub tuned_nsa: NsaConfig,
    pub applied_nsa: NsaConfig,
    pub report: TuneReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferReport {
    pub overlap: f64,
    pub shared_features: Vec<String>,
    pub directions: Vec<TransferDirection>,
}

fn feature_names(t: &RawTable) -> Vec<String> {
    t.feature_columns().map(|c| c.name.clone()).collect()
}

pub fn cmd_transfer(cfg: &RunConfig, config_path: Option<&Path>, csv: &Path, out: &Path) -> Result<TransferReport> {
    cfg.validate()?;
    let manifest = RunManifest::start("transfer", config_path, Some(csv), out, cfg);
    let raw = load_table(cfg, csv)?;
    let seed = cfg.seeds[0];
    let (set1, set2) = transfer_split(&raw, cfg.overlap, seed)?;
    let (f1, f2) = (feature_names(&set1), feature_names(&set2));
    let shared: Vec<String> = f1.iter().filter(|f| f2.contains(f)).cloned().collect();
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;

    let mut directions = Vec::new();
    let mut files = Vec::new();
    for (src_name, src, dst_name, dst) in [("set1", &set1, "set2", &set2), ("set2", &set2, "set1", &set1)] {
        let (src_split, _) = prepare(src, seed, cfg.task)?;
        let log = format!("trials_{src_name}.jsonl");
        let opts = search_options(cfg, &src_split, Some(out.join(&log)));
        let search = run_search(&src_split, &cfg.space, cfg.budget, seed, &opts)?;
        files.push(log);

        let (dst_split, _) = prepare(dst, seed, cfg.task)?;
        let dst_opts = search_options(cfg, &dst_split, None);
        let report = refit_all(cfg, &search.best, &dst_split, &dst_opts, search.trials.len())?;
        let applied = report_nsa(&search.best, &dst_opts);
        if applied != search.best.nsa {
            return Err(CliError::Runtime(format!(
                "{dst_name} did not receive the NSA configuration tuned on {src_name}"
            )));
        }
        directions.push(TransferDirection {
            source: src_name.into(),
            target: dst_name.into(),
            source_features: feature_names(src),
            target_features: feature_names(dst),
            tuned_nsa: search.best.nsa.clone(),
            applied_nsa: applied,
            report,
        });
    }
    let report = TransferReport { overlap: cfg.overlap, shared_features: shared, directions };
    write_json(&out.join("transfer.json"), &report)?;
    files.push("transfer.json".into());
    manifest.finish(files)?;
    Ok(report)
}

fn report_nsa(best: &TrialRecord, opts: &SearchOptions) -> NsaConfig {
    best.apply(&opts.model, &opts.train).0.nsa
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AblationAxis {
    Fusion,
    Blocks,
    Optimizer,
    SparseParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub setting: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

/// Settings swept for one axis, each a modified copy of the baseline.
pub fn ablation_settings(base: &RunConfig, axis: AblationAxis) -> Vec<(String, String, RunConfig)> {
    let mut out = Vec::new();
    let name = |a: AblationAxis| {
        match a {
            AblationAxis::Fusion => "fusion",
            AblationAxis::Blocks => "blocks",
            AblationAxis::Optimizer => "optimizer",
            AblationAxis::SparseParams => "sparse_params",
        }
        .to_string()
    };
    match axis {
        AblationAxis::Fusion => {
            for f in Fusion::ALL {
                let mut c = base.clone();
                c.model.fusion = f;
                out.push((name(axis), f.code().to_string(), c));
            }
        }
        AblationAxis::Blocks => {
            for l in 1..=4 {
                let mut c = base.clone();
                c.model.num_blocks = l;
                out.push((name(axis), l.to_string(), c));
            }
        }
        AblationAxis::Optimizer => {
            for o in [OptimizerKind::Adamw, OptimizerKind::Lbfgs] {
                let mut c = base.clone();
                c.train.optimizer = o;
                out.push((name(axis), o.to_string(), c));
            }
        }
        AblationAxis::SparseParams => {
            let nsa = &base.model.nsa;
            let mut push = |param: &str, v: usize, f: &dyn Fn(&mut NsaConfig)| {
                let mut c = base.clone();
                f(&mut c.model.nsa);
                let n = &mut c.model.nsa;
                n.compress_stride = gcd(n.compress_block, n.select_block);
                if n.validate().is_ok() {
                    out.push((param.to_string(), v.to_string(), c));
                }
            };
            for v in [1, 2, 4, 8] {
                push("window", v, &|n| n.window = v);
            }
            for v in [4, 8, 16] {
                push("compress_block", v, &|n| n.compress_block = v);
            }
            for v in [2, 4, 8, 16].into_iter().filter(|&v| v <= nsa.compress_block) {
                push("select_block", v, &|n| n.select_block = v);
            }
            for v in 1..=4 {
                push("num_selected", v, &|n| n.num_selected = v);
            }
        }
    }
    out
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("axis,setting,metric,mean,std,runs\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{},{}", r.axis, r.setting, r.metric, r.mean, r.std, r.values.len())
            .expect("writing to a String cannot fail");
    }
    s
}

pub fn cmd_ablate(cfg: &RunConfig, config_path: Option<&Path>, csv: &Path, axis: AblationAxis, out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let manifest = RunManifest::start("ablate", config_path, Some(csv), out, cfg);
    let raw = load_table(cfg, csv)?;
    let mut rows = Vec::new();
    for (axis_name, setting, c) in ablation_settings(cfg, axis) {
        let mut values = Vec::new();
        let mut metric = String::new();
        for &seed in &c.seeds {
            let run = run_seed(&c, &raw, seed)?;
            metric = run.report.metric;
            values.push(run.report.test_metric);
        }
        let agg = aggregate(&values);
        log::info!("{axis_name}={setting}: {metric} {:.4} ± {:.4}", agg.mean, agg.std);
        rows.push(AblationRow { axis: axis_name, setting, metric, mean: agg.mean, std: agg.std, values });
    }
    let stem = format!("ablation_{}", serde_json::to_value(axis).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default());
    write_text(&out.join(format!("{stem}.csv")), &ablation_csv(&rows))?;
    write_json(&out.join(format!("{stem}.json")), &rows)?;
    manifest.finish(vec![format!("{stem}.csv"), format!("{stem}.json")])?;
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlopsOutput {
    pub tokens: usize,
    pub params: usize,
    pub param_items: BTreeMap<String, usize>,
    pub flops: FlopReport,
    /// `dense_attention_computation / attention_computation`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense_ratio: Option<f64>,
}

pub fn cmd_flops(cfg: &RunConfig, csv: Option<&Path>, compare_dense: bool, out: Option<&Path>) -> Result<(FlopsOutput, String)> {
    cfg.validate()?;
    let (tokens, task) = match csv {
        Some(csv) => {
            let raw = load_table(cfg, csv)?;
            let (split, _) = prepare(&raw, cfg.seeds[0], cfg.task)?;
            (split.n_features(), split.train.1.task())
        }
        None => {
            let tokens = cfg
                .tokens
                .ok_or_else(|| CliError::Usage("flops needs --csv or \"tokens\" in the config".into()))?;
            let task = match cfg.classes {
                Some(c) if c >= 2 => Task::Classification { num_classes: c },
                Some(c) => return Err(CliError::Usage(format!("classes: {c} is fewer than 2"))),
                None => Task::Regression,
            };
            (tokens, task)
        }
    };
    let model = cfg.model.build(tokens, task);
    let flops = count_flops(&model, 1)?;
    let pc = count_params(&model)?;
    let dense_ratio = compare_dense.then(|| flops.dense_attention_computation as f64 / flops.attention_computation.max(1) as f64);
    let output = FlopsOutput {
        tokens,
        params: pc.total,
        param_items: pc.items.into_iter().collect(),
        flops,
        dense_ratio,
    };

    let mut table = String::new();
    let w = |s: &mut String, k: &str, v: String| writeln!(s, "{k:<28}{v:>16}").expect("writing to a String cannot fail");
    w(&mut table, "component", "FLOPs".into());
    for k in FLOP_COMPONENTS {
        w(&mut table, k, output.flops.components.get(k).copied().unwrap_or(0).to_string());
    }
    w(&mut table, "total", output.flops.total.to_string());
    w(&mut table, "attention computation", output.flops.attention_computation.to_string());
    if let Some(r) = dense_ratio {
        w(&mut table, "dense attention computation", output.flops.dense_attention_computation.to_string());
        w(&mut table, "dense / sparse", format!("{r:.3}"));
    }
    w(&mut table, "parameters", output.params.to_string());
    if let Some(out) = out {
        write_json(&out.join("flops.json"), &output)?;
    }
    Ok((output, table))
}
