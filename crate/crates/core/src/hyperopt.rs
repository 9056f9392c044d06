//! Random search over NSA and optimizer hyperparameters, scored on the
//! validation split.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{count_flops, count_params, FlopReport, Model, ModelConfig};
use crate::nsa::{gcd, NsaConfig};
use crate::training::{train, TrainConfig, TrainHistory};

/// Inclusive integer range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub lo: usize,
    pub hi: usize,
}

impl IntRange {
    pub const fn new(lo: usize, hi: usize) -> Self {
        IntRange { lo, hi }
    }

    pub const fn point(v: usize) -> Self {
        IntRange { lo: v, hi: v }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        rng.random_range(self.lo..=self.hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub head_dim: IntRange,
    pub heads: IntRange,
    pub window: IntRange,
    pub compress_block: IntRange,
    /// Upper end is further capped by the sampled compression block.
    pub select_block: IntRange,
    pub num_selected: IntRange,
    /// Log-uniform bounds.
    pub lr: (f64, f64),
    pub batch_size: IntRange,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            head_dim: IntRange::new(8, 46),
            heads: IntRange::new(1, 8),
            window: IntRange::new(1, 8),
            compress_block: IntRange::new(4, 16),
            select_block: IntRange::new(2, 16),
            num_selected: IntRange::new(1, 4),
            lr: (1e-4, 1e-3),
            batch_size: IntRange::new(32, 128),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("head_dim", self.head_dim),
            ("heads", self.heads),
            ("window", self.window),
            ("compress_block", self.compress_block),
            ("select_block", self.select_block),
            ("num_selected", self.num_selected),
            ("batch_size", self.batch_size),
        ];
        for (name, r) in ranges {
            if r.lo == 0 || r.lo > r.hi {
                return Err(Error::Config(format!(
                    "space.{name}: need 1 <= lo <= hi, got [{}, {}]",
                    r.lo, r.hi
                )));
            }
        }
        if self.select_block.lo < 2 {
            return Err(Error::Config("space.select_block.lo must be at least 2".into()));
        }
        if self.select_block.lo > self.compress_block.lo {
            return Err(Error::Config(
                "space.select_block.lo must not exceed space.compress_block.lo".into(),
            ));
        }
        let (a, b) = self.lr;
        if !(a > 0.0 && a <= b && b < 1.0) {
            return Err(Error::Config(format!("space.lr: need 0 < lo <= hi < 1, got ({a}, {b})")));
        }
        Ok(())
    }
}

/// Draws one configuration. The compression stride is `gcd(l, l')` so that
/// both block sizes are multiples of it.
pub fn sample_config<R: Rng>(space: &SearchSpace, rng: &mut R) -> (NsaConfig, TrainConfig) {
    let head_dim = space.head_dim.sample(rng);
    let heads = space.heads.sample(rng);
    let window = space.window.sample(rng);
    let compress_block = space.compress_block.sample(rng);
    let select_block = IntRange::new(space.select_block.lo, space.select_block.hi.min(compress_block)).sample(rng);
    let num_selected = space.num_selected.sample(rng);
    let (lo, hi) = space.lr;
    let lr = if lo == hi {
        lo
    } else {
        (rng.random_range(lo.ln()..hi.ln())).exp()
    };
    let batch_size = space.batch_size.sample(rng);
    let nsa = NsaConfig {
        dim: heads * head_dim,
        heads,
        head_dim,
        window,
        compress_block,
        compress_stride: gcd(compress_block, select_block),
        select_block,
        num_selected,
        causal: false,
    };
    let train = TrainConfig {
        lr,
        batch_size,
        ..TrainConfig::default()
    };
    (nsa, train)
}

/// Per-trial seed, independent of execution order.
pub fn trial_seed(seed: u64, trial_id: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ (trial_id as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub seed: u64,
    pub nsa: NsaConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub val_metric: f64,
    pub epochs: usize,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    /// Applies the sampled values to templates, keeping every other field.
    pub fn apply(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        m.nsa = NsaConfig {
            causal: model.nsa.causal,
            ..self.nsa.clone()
        };
        let t = TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
            ..train.clone()
        };
        (m, t)
    }

    /// Same draw and outcome, ignoring wall time.
    pub fn same_outcome(&self, other: &TrialRecord) -> bool {
        TrialRecord { wall_seconds: 0.0, ..self.clone() } == TrialRecord { wall_seconds: 0.0, ..other.clone() }
    }
}

/// Fixed parts of every trial.
#[derive(Clone, Debug)]
pub struct SearchOptions {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Append-only JSON-lines log; completed trials found there are reused.
    pub log_path: Option<PathBuf>,
    /// Worker cap; `None` reads `TABNSA_THREADS`, falling back to all cores.
    pub threads: Option<usize>,
}

impl SearchOptions {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        SearchOptions {
            model,
            train,
            log_path: None,
            threads: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub best: TrialRecord,
    /// Ordered by trial id.
    pub trials: Vec<TrialRecord>,
    /// Running maximum of the validation metric.
    pub best_so_far: Vec<f64>,
}

pub fn best_so_far(trials: &[TrialRecord]) -> Vec<f64> {
    let mut best = f64::NEG_INFINITY;
    trials
        .iter()
        .map(|t| {
            best = best.max(t.val_metric);
            best
        })
        .collect()
}

/// Highest metric; the earliest trial wins ties.
pub fn select_best(trials: &[TrialRecord]) -> Option<&TrialRecord> {
    let mut best: Option<&TrialRecord> = None;
    for t in trials {
        if best.is_none_or(|b| t.val_metric > b.val_metric || (t.val_metric == b.val_metric && t.trial_id < b.trial_id)) {
            best = Some(t);
        }
    }
    best
}

/// Worker count from `TABNSA_THREADS`, if set to a positive integer.
pub fn env_threads() -> Option<usize> {
    std::env::var("TABNSA_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Samples, trains and scores a single trial. Failures score 0.
pub fn run_trial(data: &DatasetSplit, space: &SearchSpace, opts: &SearchOptions, seed: u64, trial_id: usize) -> TrialRecord {
    let tseed = trial_seed(seed, trial_id);
    let mut rng = ChaCha8Rng::seed_from_u64(tseed);
    let (nsa, train_cfg) = sample_config(space, &mut rng);
    let mut record = TrialRecord {
        trial_id,
        seed: tseed,
        nsa,
        lr: train_cfg.lr,
        batch_size: train_cfg.batch_size,
        val_metric: 0.0,
        epochs: 0,
        wall_seconds: 0.0,
        error: None,
    };
    let start = Instant::now();
    let (model_cfg, train_cfg) = record.apply(&opts.model, &opts.train);
    let outcome = Model::new(model_cfg, tseed).and_then(|mut model| {
        let history = train(&mut model, data, &train_cfg)?;
        let (x, y) = &data.val;
        let report = evaluate(&model.predict(&x.to_tensor()), y)?;
        Ok((history, report.primary(y.task())))
    });
    match outcome {
        Ok((history, metric)) if metric.is_finite() => {
            record.val_metric = metric.clamp(0.0, 1.0);
            record.epochs = history.epochs.len();
        }
        Ok(_) => record.error = Some("non-finite validation metric".into()),
        Err(e) => record.error = Some(e.to_string()),
    }
    record.wall_seconds = start.elapsed().as_secs_f64();
    record
}

/// Runs `budget` independent trials, in parallel, and picks the best by
/// validation metric.
pub fn run_search(data: &DatasetSplit, space: &SearchSpace, budget: usize, seed: u64, opts: &SearchOptions) -> Result<SearchResult> {
    if budget == 0 {
        return Err(Error::Config("search budget must be at least 1".into()));
    }
    space.validate()?;
    opts.train.validate()?;

    let mut done: BTreeMap<usize, TrialRecord> = BTreeMap::new();
    let log = match &opts.log_path {
        Some(path) => {
            for rec in read_trial_log(path)? {
                if rec.trial_id < budget && rec.seed == trial_seed(seed, rec.trial_id) {
                    done.insert(rec.trial_id, rec);
                }
            }
            drop_torn_tail(path)?;
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            Some(Mutex::new(file))
        }
        None => None,
    };
    if !done.is_empty() {
        log::info!("resuming search: {} of {budget} trials already logged", done.len());
    }

    let todo: Vec<usize> = (0..budget).filter(|i| !done.contains_key(i)).collect();
    let run = |id: usize| -> Result<TrialRecord> {
        let rec = run_trial(data, space, opts, seed, id);
        log::info!(
            "trial {id}: metric {:.4} ({:.1}s){}",
            rec.val_metric,
            rec.wall_seconds,
            rec.error.as_deref().map(|e| format!(" failed: {e}")).unwrap_or_default()
        );
        if let Some(file) = &log {
            let mut line = serde_json::to_vec(&rec)?;
            line.push(b'\n');
            let mut f = file.lock().expect("trial log lock poisoned");
            f.write_all(&line).and_then(|_| f.flush()).map_err(|e| Error::Io {
                path: opts.log_path.clone().unwrap_or_default(),
                source: e,
            })?;
        }
        Ok(rec)
    };
    let threads = opts.threads.or_else(env_threads).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let fresh: Vec<TrialRecord> = pool.install(|| todo.par_iter().map(|&id| run(id)).collect::<Result<_>>())?;
    for rec in fresh {
        done.insert(rec.trial_id, rec);
    }

    let trials: Vec<TrialRecord> = done.into_values().collect();
    let best = select_best(&trials).expect("budget >= 1").clone();
    Ok(SearchResult {
        best_so_far: best_so_far(&trials),
        best,
        trials,
    })
}

// Cuts an unterminated last line so appended records start on a fresh line.
fn drop_torn_tail(path: &Path) -> Result<()> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.last().is_none_or(|&b| b == b'\n') {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    OpenOptions::new()
        .write(true)
        .open(path)
        .and_then(|f| f.set_len(keep as u64))
        .map_err(|e| Error::io(path, e))
}

/// Reads a trial log, skipping a torn final line.
pub fn read_trial_log(path: &Path) -> Result<Vec<TrialRecord>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TrialRecord>(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => log::warn!("ignoring incomplete last line of {}", path.display()),
            Err(e) => {
                return Err(Error::Parse {
                    line: (i + 1) as u64,
                    message: format!("{}: {e}", path.display()),
                })
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefitReport {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub test: EvalReport,
    pub test_metric: f64,
    pub params: usize,
    /// Per-sample inference FLOPs.
    pub flops: FlopReport,
    pub history: TrainHistory,
}

/// Retrains the chosen configuration from a fresh initialization and
/// evaluates it on the test split, which is read exactly once.
pub fn refit_best(best: &TrialRecord, data: &DatasetSplit, opts: &SearchOptions, seed: u64) -> Result<RefitReport> {
    let (model_cfg, mut train_cfg) = best.apply(&opts.model, &opts.train);
    train_cfg.seed = seed;
    let mut model = Model::new(model_cfg.clone(), seed)?;
    let history = train(&mut model, data, &train_cfg)?;
    let (x, y) = data.test();
    let test = evaluate(&model.predict(&x.to_tensor()), y)?;
    let test_metric = test.primary(y.task());
    Ok(RefitReport {
        seed,
        params: count_params(&model_cfg)?.total,
        flops: count_flops(&model_cfg, 1)?,
        model: model_cfg,
        train: train_cfg,
        test,
        test_metric,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{prepare, synthetic::two_gaussians, TaskHint};

    #[test]
    fn degenerate_space_gives_that_config() {
        let space = SearchSpace {
            head_dim: IntRange::point(8),
            heads: IntRange::point(2),
            window: IntRange::point(3),
            compress_block: IntRange::point(6),
            select_block: IntRange::point(4),
            num_selected: IntRange::point(2),
            lr: (5e-4, 5e-4),
            batch_size: IntRange::point(40),
        };
        let (nsa, t) = sample_config(&space, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!((nsa.dim, nsa.heads, nsa.head_dim, nsa.window), (16, 2, 8, 3));
        assert_eq!((nsa.compress_block, nsa.compress_stride, nsa.select_block, nsa.num_selected), (6, 2, 4, 2));
        assert_eq!((t.lr, t.batch_size), (5e-4, 40));
    }

    #[test]
    fn conditional_select_block_and_log_uniform_lr() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (nsa, _) = sample_config(&space, &mut rng);
            assert!(nsa.select_block <= nsa.compress_block);
            assert_eq!(nsa.compress_block % nsa.compress_stride, 0);
            assert_eq!(nsa.select_block % nsa.compress_stride, 0);
            nsa.validate().unwrap();
        }
        let mut lrs: Vec<f64> = (0..10_000).map(|_| sample_config(&space, &mut rng).1.lr).collect();
        lrs.sort_by(f64::total_cmp);
        let median = lrs[5000];
        assert!((2.5e-4..=4.5e-4).contains(&median), "median {median}");
    }

    #[test]
    fn trial_seeds_differ_and_are_stable() {
        assert_eq!(trial_seed(3, 7), trial_seed(3, 7));
        assert_ne!(trial_seed(3, 7), trial_seed(3, 8));
        assert_ne!(trial_seed(3, 7), trial_seed(4, 7));
    }

    fn rec(id: usize, m: f64) -> TrialRecord {
        TrialRecord {
            trial_id: id,
            seed: 0,
            nsa: NsaConfig::default(),
            lr: 1e-3,
            batch_size: 32,
            val_metric: m,
            epochs: 1,
            wall_seconds: 0.0,
            error: None,
        }
    }

    #[test]
    fn ties_go_to_earlier_trial() {
        let trials = [rec(0, 0.5), rec(1, 0.9), rec(2, 0.9), rec(3, 0.2)];
        assert_eq!(select_best(&trials).unwrap().trial_id, 1);
        assert_eq!(best_so_far(&trials), vec![0.5, 0.9, 0.9, 0.9]);
    }

    #[test]
    fn search_then_refit_touches_test_once() {
        let raw = two_gaussians(80, 4, 2);
        let (split, _) = prepare(&raw, 2, TaskHint::Auto).unwrap();
        let space = SearchSpace {
            head_dim: IntRange::new(4, 6),
            heads: IntRange::new(1, 2),
            batch_size: IntRange::new(16, 32),
            ..SearchSpace::default()
        };
        let mut model = ModelConfig::new(4, split.train.1.task());
        model.hidden_head = 8;
        let train = TrainConfig { max_epochs: 5, ..TrainConfig::default() };
        let opts = SearchOptions { threads: Some(2), ..SearchOptions::new(model, train) };
        let res = run_search(&split, &space, 3, 11, &opts).unwrap();
        assert_eq!(res.trials.len(), 3);
        assert_eq!(split.test_reads(), 0);
        let one = run_trial(&split, &space, &opts, 11, 1);
        assert!(one.same_outcome(&res.trials[1]));
        let report = refit_best(&res.best, &split, &opts, 0).unwrap();
        assert_eq!(split.test_reads(), 1);
        assert!(report.params > 0 && report.flops.total > 0);
    }
}
