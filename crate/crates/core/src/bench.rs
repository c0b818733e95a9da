//! Experiment harness: Scenario I per-carrier accuracy, Scenario II
//! accuracy against a full-SCF baseline classifier, the BPSK/4FSK pair task,
//! and attention compute accounting.
//!
//! The full-SCF reference is a pooled MLP: the 64×64 grid is 2×2
//! mean-pooled to 32×32, flattened, passed through one 256-unit ReLU layer
//! and a logistic output, and trained with cross-entropy by plain SGD. It is
//! a stand-in for a convolutional classifier, not a reproduction of one.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attnnet::{dot, init_params_with, logistic, Dense, ModelParams};
use crate::cyclo::{GridCell, ScfConfig, ScfGrid, CELLS_PER_SIDE};
use crate::detector::{attention_trace, detect_all, AttentionPoint, DetectMode, DetectionReport};
use crate::error::{Error, Result};
use crate::par::{self, ExecMode};
use crate::reinforce::{prepare, train_from, EpochStats, Prepared, TrainConfig, EVAL_SEED};
use crate::rng::{derive_seed, rng_from};
use crate::sigsynth::{generate_dataset_with, Dataset, ModulationScheme, Scenario, SynthConfig};

pub const BASELINE_NOTE: &str =
    "baseline: pooled MLP on the full 64x64 SCF (2x2 mean pool, 1024-256-1), substituted for a convolutional network";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub pool: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            pool: 2,
            hidden: 256,
            epochs: 30,
            lr: 0.05,
            batch_size: 16,
        }
    }
}

/// Which policy mode scores the attention method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Greedy,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub scenario: Scenario,
    pub n_train: usize,
    pub n_test: usize,
    /// One full run (dataset and training) per seed; headline numbers are
    /// medians over runs.
    pub seeds: Vec<u64>,
    pub eval_mode: EvalMode,
    pub synth: SynthConfig,
    pub scf: ScfConfig,
    pub train: TrainConfig,
    pub baseline: Option<BaselineConfig>,
}

/// Desk-scale training settings suited to a scenario.
pub fn desk_config(scenario: Scenario) -> TrainConfig {
    match scenario {
        Scenario::II => TrainConfig::desk_scale_congested(),
        _ => TrainConfig::desk_scale(),
    }
}

impl BenchConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            n_train: 800,
            n_test: 200,
            seeds: vec![1],
            eval_mode: EvalMode::Greedy,
            synth: SynthConfig::default(),
            scf: ScfConfig::default(),
            train: TrainConfig::default(),
            baseline: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::param("at least one seed is required"));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::param("train and test counts must be positive"));
        }
        if self.scf.window_n > self.synth.window_n {
            return Err(Error::param("SCF window exceeds the synthesized window"));
        }
        self.scf.validate()?;
        self.train.validate()
    }

    /// SHA-256 of the canonical JSON form. Together with the embedded
    /// config it pins datasets, training and evaluation exactly.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("bench config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn detect_mode(&self, seed: u64) -> DetectMode {
        match self.eval_mode {
            EvalMode::Greedy => DetectMode::Greedy(EVAL_SEED),
            EvalMode::Stochastic => DetectMode::Stochastic(derive_seed(seed, &[0x5445])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub overall_accuracy: f64,
    /// Keyed by carrier in whole Hz.
    pub per_carrier_accuracy: BTreeMap<u64, f64>,
    pub baseline_accuracy: Option<f64>,
    pub mean_bins_fraction: f64,
    pub mean_cell_fraction: f64,
    pub max_bins_per_decision: usize,
    pub curve: Vec<EpochStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: Scenario,
    pub per_carrier_accuracy: BTreeMap<u64, f64>,
    pub overall_accuracy: f64,
    pub baseline_accuracy: Option<f64>,
    /// Mean patch bins per decision over full-grid bins.
    pub mean_bins_fraction: f64,
    /// Mean distinct attended cells per decision over all cells.
    pub mean_cell_fraction: f64,
    pub max_bins_per_decision: usize,
    pub baseline_bins_per_decision: usize,
    pub config_digest: String,
    pub note: String,
    pub runs: Vec<RunResult>,
    pub config: BenchConfig,
}

/// Everything produced by one seeded run, for callers that need more than
/// the summary numbers.
pub struct SeedRun {
    pub result: RunResult,
    pub params: ModelParams,
    pub dataset: Dataset,
    pub train: Prepared,
    pub test: Prepared,
    pub reports: Vec<DetectionReport>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Accuracy per carrier: a record counts toward every carrier used by any
/// signal in its scene.
pub fn per_carrier_accuracy(dataset: &Dataset, correct: &[bool]) -> BTreeMap<u64, f64> {
    let mut tally: BTreeMap<u64, (usize, usize)> = dataset
        .synth
        .carriers_hz
        .iter()
        .map(|&c| (c.round() as u64, (0, 0)))
        .collect();
    for (rec, &ok) in dataset.test.iter().zip(correct) {
        for c in rec.carriers_hz() {
            let e = tally.entry(c.round() as u64).or_default();
            e.0 += usize::from(ok);
            e.1 += 1;
        }
    }
    tally
        .into_iter()
        .map(|(c, (k, n))| (c, if n == 0 { f64::NAN } else { k as f64 / n as f64 }))
        .collect()
}

/// Generates, trains and evaluates one seed.
pub fn run_seed(config: &BenchConfig, seed: u64, exec: ExecMode, on_epoch: impl FnMut(&EpochStats)) -> Result<SeedRun> {
    config.validate()?;
    let dataset = generate_dataset_with(config.scenario, &config.synth, config.n_train, config.n_test, seed)?;
    let train_set = prepare(&dataset.train, &config.synth, &config.scf, exec)?;
    let test_set = prepare(&dataset.test, &config.synth, &config.scf, exec)?;
    let tc = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let outcome = train_from(init_params_with(tc.dims, seed), &train_set, Some(&test_set), &tc, exec, on_epoch)?;
    let reports = detect_all(&outcome.params, &test_set.samples(), &tc, config.detect_mode(seed), exec);
    let correct: Vec<bool> = reports.iter().zip(&test_set.labels).map(|(r, &y)| r.decision == y).collect();
    let n = correct.len() as f64;
    let baseline_accuracy = config
        .baseline
        .as_ref()
        .map(|b| baseline_full_scf(&train_set, &test_set, b, seed, exec));
    let result = RunResult {
        seed,
        overall_accuracy: correct.iter().filter(|&&c| c).count() as f64 / n,
        per_carrier_accuracy: per_carrier_accuracy(&dataset, &correct),
        baseline_accuracy,
        mean_bins_fraction: reports.iter().map(|r| r.bins_fraction()).sum::<f64>() / n,
        mean_cell_fraction: reports.iter().map(|r| r.cell_fraction()).sum::<f64>() / n,
        max_bins_per_decision: reports.iter().map(|r| r.scf_bins_computed).max().unwrap_or(0),
        curve: outcome.curve,
    };
    Ok(SeedRun {
        result,
        params: outcome.params,
        dataset,
        train: train_set,
        test: test_set,
        reports,
    })
}

/// Runs every seed in order and summarizes with medians.
pub fn run_bench(config: &BenchConfig, exec: ExecMode, mut on_epoch: impl FnMut(u64, &EpochStats)) -> Result<BenchReport> {
    config.validate()?;
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        runs.push(run_seed(config, seed, exec, |s| on_epoch(seed, s))?.result);
    }
    Ok(summarize(config, runs))
}

pub fn summarize(config: &BenchConfig, runs: Vec<RunResult>) -> BenchReport {
    let med = |f: &dyn Fn(&RunResult) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    let carriers: Vec<u64> = runs
        .first()
        .map(|r| r.per_carrier_accuracy.keys().copied().collect())
        .unwrap_or_default();
    let per_carrier_accuracy = carriers
        .iter()
        .map(|c| (*c, med(&|r| r.per_carrier_accuracy.get(c).copied().unwrap_or(f64::NAN))))
        .collect();
    let baseline_accuracy = config
        .baseline
        .as_ref()
        .map(|_| med(&|r| r.baseline_accuracy.unwrap_or(f64::NAN)));
    BenchReport {
        scenario: config.scenario,
        per_carrier_accuracy,
        overall_accuracy: med(&|r| r.overall_accuracy),
        baseline_accuracy,
        mean_bins_fraction: med(&|r| r.mean_bins_fraction),
        mean_cell_fraction: med(&|r| r.mean_cell_fraction),
        max_bins_per_decision: runs.iter().map(|r| r.max_bins_per_decision).max().unwrap_or(0),
        baseline_bins_per_decision: config.scf.bins(),
        config_digest: config.digest(),
        note: BASELINE_NOTE.to_string(),
        runs,
        config: config.clone(),
    }
}

pub fn run_scenario_i(config: &BenchConfig, exec: ExecMode) -> Result<BenchReport> {
    let c = BenchConfig {
        scenario: Scenario::I,
        ..config.clone()
    };
    run_bench(&c, exec, |_, _| {})
}

/// Scenario II always includes the baseline comparison.
pub fn run_scenario_ii(config: &BenchConfig, exec: ExecMode) -> Result<BenchReport> {
    run_scenario_ii_with(config, exec, |_, _| {})
}

pub fn run_scenario_ii_with(config: &BenchConfig, exec: ExecMode, on_epoch: impl FnMut(u64, &EpochStats)) -> Result<BenchReport> {
    let c = BenchConfig {
        scenario: Scenario::II,
        baseline: Some(config.baseline.clone().unwrap_or_default()),
        ..config.clone()
    };
    run_bench(&c, exec, on_epoch)
}

/// The BPSK versus 4FSK task at a fixed 300 MHz carrier.
pub const PAIR_TASK: Scenario = Scenario::Pair {
    positive: ModulationScheme::Bpsk,
    negative: ModulationScheme::Fsk4,
    carrier_hz: 300e6,
};

/// BPSK versus 4FSK at 300 MHz; returns the first seed's run.
pub fn classify_pair_task(config: &BenchConfig, exec: ExecMode) -> Result<SeedRun> {
    classify_pair_task_with(config, exec, |_| {})
}

pub fn classify_pair_task_with(config: &BenchConfig, exec: ExecMode, on_epoch: impl FnMut(&EpochStats)) -> Result<SeedRun> {
    let c = BenchConfig {
        scenario: PAIR_TASK,
        ..config.clone()
    };
    run_seed(&c, c.seeds[0], exec, on_epoch)
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario            {}", self.scenario);
        let _ = writeln!(s, "runs                {}", self.runs.len());
        let _ = writeln!(s, "overall accuracy    {:.4}", self.overall_accuracy);
        for (c, a) in &self.per_carrier_accuracy {
            let _ = writeln!(s, "  {:>5.0} MHz         {:.4}", *c as f64 / 1e6, a);
        }
        if let Some(b) = self.baseline_accuracy {
            let _ = writeln!(s, "baseline accuracy   {b:.4}");
            let _ = writeln!(s, "difference          {:+.4}", self.overall_accuracy - b);
        }
        let _ = writeln!(
            s,
            "SCF bins/decision   max {} of {} (mean fraction {:.5})",
            self.max_bins_per_decision, self.baseline_bins_per_decision, self.mean_bins_fraction
        );
        let _ = writeln!(s, "mean cell fraction  {:.5} (5/64 = {:.5})", self.mean_cell_fraction, 5.0 / 64.0);
        let _ = writeln!(s, "config digest       {}", self.config_digest);
        let _ = writeln!(s, "{}", self.note);
        s
    }

    /// `carrier_mhz,accuracy`.
    pub fn per_carrier_csv(&self) -> String {
        let mut s = String::from("carrier_mhz,accuracy\n");
        for (c, a) in &self.per_carrier_accuracy {
            let _ = writeln!(s, "{},{}", *c as f64 / 1e6, a);
        }
        s
    }

    /// One row per run plus a `median` row.
    pub fn runs_csv(&self) -> String {
        let carriers: Vec<u64> = self.per_carrier_accuracy.keys().copied().collect();
        let mut s = String::from("seed,overall_accuracy,baseline_accuracy,mean_bins_fraction,mean_cell_fraction,max_bins");
        for c in &carriers {
            let _ = write!(s, ",acc_{}mhz", *c as f64 / 1e6);
        }
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.runs {
            let _ = write!(
                s,
                "{},{},{},{},{},{}",
                r.seed,
                r.overall_accuracy,
                opt(r.baseline_accuracy),
                r.mean_bins_fraction,
                r.mean_cell_fraction,
                r.max_bins_per_decision
            );
            for c in &carriers {
                let _ = write!(s, ",{}", opt(r.per_carrier_accuracy.get(c).copied()));
            }
            s.push('\n');
        }
        let _ = write!(
            s,
            "median,{},{},{},{},{}",
            self.overall_accuracy,
            opt(self.baseline_accuracy),
            self.mean_bins_fraction,
            self.mean_cell_fraction,
            self.max_bins_per_decision
        );
        for c in &carriers {
            let _ = write!(s, ",{}", self.per_carrier_accuracy[c]);
        }
        s.push('\n');
        s
    }
}

/// Mean of the two class-mean grids.
pub fn class_mean_grid(set: &Prepared) -> Result<ScfGrid> {
    let pick = |label: bool| -> Vec<ScfGrid> {
        set.grids
            .iter()
            .zip(&set.labels)
            .filter(|(_, &l)| l == label)
            .map(|(g, _)| g.clone())
            .collect()
    };
    let pos = ScfGrid::mean_of(&pick(true))?;
    let neg = ScfGrid::mean_of(&pick(false))?;
    ScfGrid::mean_of(&[pos, neg])
}

/// The `k` cells with the largest block energy.
pub fn top_energy_cells(grid: &ScfGrid, k: usize) -> Vec<GridCell> {
    grid.cells_by_energy().into_iter().take(k).map(|(c, _)| c).collect()
}

/// Fraction of attended points inside `cells`.
pub fn attention_relevance(points: &[AttentionPoint], cells: &[GridCell]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    points.iter().filter(|p| cells.contains(&p.cell)).count() as f64 / points.len() as f64
}

/// Attention trace of `params` over `set` and its relevance against the
/// top-8 cells of the class-mean grid.
pub fn relevance_of(params: &ModelParams, set: &Prepared, config: &TrainConfig, mode: DetectMode, exec: ExecMode) -> Result<(f64, Vec<AttentionPoint>, Vec<GridCell>)> {
    let top = top_energy_cells(&class_mean_grid(set)?, 8);
    let pts = attention_trace(params, &set.samples(), config, mode, exec);
    Ok((attention_relevance(&pts, &top), pts, top))
}

/// Chi-square statistic of attended-cell counts against a uniform
/// distribution over all cells (63 degrees of freedom).
pub fn uniformity_chi_square(points: &[AttentionPoint]) -> f64 {
    let cells = CELLS_PER_SIDE * CELLS_PER_SIDE;
    let mut counts = vec![0usize; cells];
    for p in points {
        counts[p.cell.index()] += 1;
    }
    let expected = points.len() as f64 / cells as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

/// Full-SCF reference classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledMlp {
    pub pool: usize,
    pub hidden: Dense,
    pub output: Dense,
}

impl PooledMlp {
    pub fn new(n_alpha: usize, n_f: usize, config: &BaselineConfig, seed: u64) -> Self {
        let inputs = (n_alpha / config.pool) * (n_f / config.pool);
        let mut rng = rng_from(derive_seed(seed, &[0x4d4c50]));
        Self {
            pool: config.pool,
            hidden: Dense::glorot(inputs, config.hidden, &mut rng),
            output: Dense::glorot(config.hidden, 1, &mut rng),
        }
    }

    /// `pool × pool` mean pooling, row-major.
    pub fn features(&self, grid: &ScfGrid) -> Vec<f64> {
        let p = self.pool;
        let (ra, rf) = (grid.n_alpha / p, grid.n_f / p);
        let mut out = Vec::with_capacity(ra * rf);
        for i in 0..ra {
            for j in 0..rf {
                let mut acc = 0.0;
                for di in 0..p {
                    for dj in 0..p {
                        acc += grid.get(i * p + di, j * p + dj);
                    }
                }
                out.push(acc / (p * p) as f64);
            }
        }
        out
    }

    fn hidden_act(&self, x: &[f64]) -> Vec<f64> {
        self.hidden.forward(x).into_iter().map(|v| v.max(0.0)).collect()
    }

    pub fn prob(&self, grid: &ScfGrid) -> f64 {
        let a = self.hidden_act(&self.features(grid));
        logistic(self.output.bias[0] + dot(self.output.row(0), &a))
    }

    pub fn accuracy(&self, set: &Prepared, exec: ExecMode) -> f64 {
        let samples = set.samples();
        let ok = par::map(exec, &samples, |s| (self.prob(s.grid) > 0.5) == s.label);
        ok.iter().filter(|&&c| c).count() as f64 / ok.len().max(1) as f64
    }

    /// Cross-entropy SGD over shuffled mini-batches.
    pub fn fit(&mut self, set: &Prepared, config: &BaselineConfig, seed: u64, exec: ExecMode) {
        let feats: Vec<Vec<f64>> = par::map(exec, &set.grids, |g| self.features(g));
        let mut order: Vec<usize> = (0..set.len()).collect();
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng_from(derive_seed(seed, &[0x4250, epoch as u64])));
            for chunk in order.chunks(config.batch_size) {
                let scale = 1.0 / chunk.len() as f64;
                let per = par::map(exec, chunk, |&i| {
                    let x = &feats[i];
                    let a = self.hidden_act(x);
                    let p = logistic(self.output.bias[0] + dot(self.output.row(0), &a));
                    let d_logit = scale * (p - if set.labels[i] { 1.0 } else { 0.0 });
                    let mut da = vec![0.0; a.len()];
                    self.output.add_input_grad(&[d_logit], &mut da);
                    let dz: Vec<f64> = da.iter().zip(&a).map(|(d, v)| if *v > 0.0 { *d } else { 0.0 }).collect();
                    (a, d_logit, dz)
                });
                let mut g_hidden = Dense::zeros(self.hidden.in_dim, self.hidden.out_dim);
                let mut g_out = Dense::zeros(self.output.in_dim, 1);
                let xs: Vec<&[f64]> = chunk.iter().map(|&i| feats[i].as_slice()).collect();
                let dzs: Vec<&[f64]> = per.iter().map(|p| p.2.as_slice()).collect();
                g_hidden.accumulate(&xs, &dzs);
                let acts: Vec<&[f64]> = per.iter().map(|p| p.0.as_slice()).collect();
                let dls: Vec<[f64; 1]> = per.iter().map(|p| [p.1]).collect();
                g_out.accumulate(&acts, &dls);
                for (layer, g) in [(&mut self.hidden, &g_hidden), (&mut self.output, &g_out)] {
                    for (w, d) in layer.weight.iter_mut().zip(&g.weight) {
                        *w -= config.lr * d;
                    }
                    for (b, d) in layer.bias.iter_mut().zip(&g.bias) {
                        *b -= config.lr * d;
                    }
                }
            }
        }
    }
}

/// Trains the reference classifier on `train` and returns its accuracy on
/// `test`.
pub fn baseline_full_scf(train: &Prepared, test: &Prepared, config: &BaselineConfig, seed: u64, exec: ExecMode) -> f64 {
    let Some(first) = train.grids.first() else {
        return f64::NAN;
    };
    let mut model = PooledMlp::new(first.n_alpha, first.n_f, config, seed);
    model.fit(train, config, seed, exec);
    model.accuracy(test, exec)
}
