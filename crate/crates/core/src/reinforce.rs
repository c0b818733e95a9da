//! Policy-gradient training: stochastic episode rollouts, terminal rewards,
//! a score-function gradient estimate with a learned baseline, and plain SGD.
//!
//! An episode runs `T` glimpses. The first location is uniform over
//! `[−1, 1]²` (or a configured fixed point); every later location is drawn
//! from `N(loc_mean_{t−1}, σ²I)`, clamped to the square and snapped to its
//! [`GridCell`]. The only reward is `r_T = 1` for a correct final decision.
//!
//! Per episode the minimized loss is
//!
//! ```text
//! −Σ_{t<T} log N(l_{t+1}; μ_t, σ²)·(R_t − b_t)   (R_t − b_t held constant)
//! + (1/T)·Σ_t (R_t − b_t)²                        (R_t held constant)
//! + BCE(class_prob_T, y)
//! ```
//!
//! averaged over `M` rollouts per record and over the mini-batch. The
//! log-density is taken at the raw draw before clamping.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attnnet::{backprop_episode, init_params_with, step, HeadGrad, HiddenState, ModelDims, ModelParams, StepTrace};
use crate::cyclo::{scf_full_fast, GridCell, GridSource, PatchCache, PatchSource, ScfConfig, ScfGrid, ScfPatch};
use crate::error::{Error, Result};
use crate::par::{self, ExecMode};
use crate::rng::{derive_seed, rng_from, Rng};
use crate::sigsynth::{DatasetRecord, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps_t: usize,
    pub mc_samples_m: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// When set, the step size falls linearly from `lr` in the first epoch
    /// to this value in the last.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_final: Option<f64>,
    pub loc_sigma: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Fixed first location instead of the uniform draw.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_loc: Option<[f64; 2]>,
    pub dims: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps_t: 5,
            mc_samples_m: 10,
            batch_size: 16,
            lr: 1e-3,
            lr_final: None,
            loc_sigma: 0.15,
            epochs: 200,
            seed: 0,
            init_loc: None,
            dims: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    /// Settings the benchmark runs use: a narrower location policy, a
    /// larger annealed step size and fewer rollouts and epochs than the
    /// defaults, so an 800-record run finishes in minutes on one core.
    pub fn desk_scale() -> Self {
        Self {
            mc_samples_m: 4,
            lr: 5e-3,
            lr_final: Some(5e-4),
            loc_sigma: 0.08,
            epochs: 100,
            ..Self::default()
        }
    }

    /// Desk-scale settings for congested scenes, where one glimpse of the
    /// occupied band already separates noise-only windows from the rest and
    /// a narrow policy settles on that shortcut. A wider policy, more epochs
    /// and an annealed step size let it learn the multi-cell scan instead.
    pub fn desk_scale_congested() -> Self {
        Self {
            mc_samples_m: 4,
            lr: 5e-3,
            lr_final: Some(5e-4),
            loc_sigma: 0.15,
            epochs: 300,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_t == 0 {
            return Err(Error::param("steps_t must be at least 1"));
        }
        if self.mc_samples_m == 0 {
            return Err(Error::param("mc_samples_m must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be at least 1"));
        }
        if !(self.loc_sigma > 0.0 && self.loc_sigma.is_finite()) {
            return Err(Error::param("loc_sigma must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr must be finite and non-negative"));
        }
        if let Some(l) = self.lr_final {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::param("lr_final must be finite and non-negative"));
            }
        }
        if let Some(l) = self.init_loc {
            if l.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::param("init_loc must lie in [-1, 1]^2"));
            }
        }
        Ok(())
    }

    /// Step size used throughout `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_final {
            Some(end) if self.epochs > 1 => {
                let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
                self.lr + (end - self.lr) * t
            }
            Some(end) => end,
            None => self.lr,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::format("train config", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    /// Draw before clamping; the log-density is evaluated here.
    pub sampled_loc: [f64; 2],
    /// Clamped location actually attended and fed to the location encoder.
    pub loc: [f64; 2],
    pub cell: GridCell,
    pub patch: ScfPatch,
    /// Mean of the next location, emitted after this step.
    pub loc_mean: [f64; 2],
    pub baseline: f64,
    pub class_prob: f64,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub steps: Vec<EpisodeStep>,
    pub class_prob: f64,
    pub predicted: bool,
    pub label: bool,
    pub rewards: Vec<f64>,
    pub returns: Vec<f64>,
    pub bins_computed: usize,
    pub traces: Vec<StepTrace>,
}

impl Episode {
    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }

    pub fn attended_cells(&self) -> Vec<GridCell> {
        self.steps.iter().map(|s| s.cell).collect()
    }
}

/// How locations are chosen. In both modes the first location is uniform
/// over the square (drawn from the given generator) unless `init_loc` is set.
pub enum Policy<'r> {
    /// Later locations are Gaussian draws around the emitted mean.
    Sample(&'r mut Rng),
    /// Later locations are the emitted mean itself.
    Greedy(&'r mut Rng),
}

/// Runs one episode against `source` and assigns rewards.
pub fn rollout_on(params: &ModelParams, source: &mut dyn PatchSource, label: bool, config: &TrainConfig, mut policy: Policy<'_>) -> Episode {
    let t_max = config.steps_t;
    let mut h = HiddenState::zero(params.dims.hidden);
    let mut steps = Vec::with_capacity(t_max);
    let mut traces = Vec::with_capacity(t_max);
    let mut prev_mean: Option<[f64; 2]> = None;
    for _ in 0..t_max {
        let sampled = match (&mut policy, prev_mean) {
            (Policy::Sample(rng) | Policy::Greedy(rng), None) => config
                .init_loc
                .unwrap_or_else(|| [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]),
            (Policy::Sample(rng), Some(mu)) => {
                let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                [mu[0] + config.loc_sigma * z[0], mu[1] + config.loc_sigma * z[1]]
            }
            (Policy::Greedy(_), Some(mu)) => mu,
        };
        let loc = [sampled[0].clamp(-1.0, 1.0), sampled[1].clamp(-1.0, 1.0)];
        let cell = GridCell::from_location(loc);
        let patch = source.patch(cell);
        let (h_next, trace) = step(params, &h, &patch.values, loc);
        h = h_next;
        prev_mean = Some(trace.out.loc_mean);
        steps.push(EpisodeStep {
            sampled_loc: sampled,
            loc,
            cell,
            patch,
            loc_mean: trace.out.loc_mean,
            baseline: trace.out.baseline,
            class_prob: trace.out.class_prob,
        });
        traces.push(trace);
    }
    let class_prob = steps.last().map_or(0.5, |s| s.class_prob);
    let mut ep = Episode {
        steps,
        class_prob,
        predicted: class_prob > 0.5,
        label,
        rewards: Vec::new(),
        returns: Vec::new(),
        bins_computed: source.bins_computed(),
        traces,
    };
    reward(&mut ep);
    ep
}

/// Stochastic rollout of one dataset record, with patches evaluated on
/// demand by the direct route.
pub fn rollout(params: &ModelParams, record: &DatasetRecord, synth: &SynthConfig, scf: &ScfConfig, config: &TrainConfig, seed: u64) -> Result<Episode> {
    let signal = record.signal(synth)?;
    let mut source = PatchCache::new(&signal, scf)?;
    let mut rng = rng_from(seed);
    Ok(rollout_on(params, &mut source, record.label, config, Policy::Sample(&mut rng)))
}

/// Terminal reward: `r_T = 1` iff the decision is correct; `R_t = Σ_{τ≥t} r_τ`.
pub fn reward(episode: &mut Episode) {
    let t = episode.steps.len();
    let mut r = vec![0.0; t];
    if let Some(last) = r.last_mut() {
        *last = if episode.correct() { 1.0 } else { 0.0 };
    }
    let mut acc = 0.0;
    let mut returns = vec![0.0; t];
    for i in (0..t).rev() {
        acc += r[i];
        returns[i] = acc;
    }
    episode.rewards = r;
    episode.returns = returns;
}

/// Which loss terms contribute to a gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub reinforce: bool,
    pub baseline: bool,
    pub classification: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        reinforce: true,
        baseline: true,
        classification: true,
    };
}

fn bce(p: f64, y: bool) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Head-output gradients of one episode's loss, scaled by `weight`.
pub fn episode_head_grads(episode: &Episode, config: &TrainConfig, terms: LossTerms, weight: f64) -> Vec<HeadGrad> {
    let t_max = episode.steps.len();
    let inv_var = 1.0 / (config.loc_sigma * config.loc_sigma);
    (0..t_max)
        .map(|t| {
            let s = &episode.steps[t];
            let adv = episode.returns[t] - s.baseline;
            let mut g = HeadGrad::default();
            if terms.reinforce && t + 1 < t_max {
                let next = episode.steps[t + 1].sampled_loc;
                for k in 0..2 {
                    g.d_loc_mean[k] = -weight * adv * (next[k] - s.loc_mean[k]) * inv_var;
                }
            }
            if terms.baseline {
                g.d_baseline = -weight * 2.0 * adv / t_max as f64;
            }
            if terms.classification && t + 1 == t_max {
                let y = if episode.label { 1.0 } else { 0.0 };
                g.d_class_logit = weight * (s.class_prob - y);
            }
            g
        })
        .collect()
}

/// Loss whose gradient [`episode_head_grads`] computes, re-evaluated under
/// `params` with the episode's actions, patches and advantage weights frozen.
pub fn frozen_action_loss(params: &ModelParams, episode: &Episode, config: &TrainConfig, terms: LossTerms) -> f64 {
    let t_max = episode.steps.len();
    let var = config.loc_sigma * config.loc_sigma;
    let mut h = HiddenState::zero(params.dims.hidden);
    let mut loss = 0.0;
    for t in 0..t_max {
        let s = &episode.steps[t];
        let (h_next, tr) = step(params, &h, &s.patch.values, s.loc);
        h = h_next;
        let r = episode.returns[t];
        if terms.reinforce && t + 1 < t_max {
            let adv = r - s.baseline;
            let next = episode.steps[t + 1].sampled_loc;
            let sq: f64 = (0..2).map(|k| (next[k] - tr.out.loc_mean[k]).powi(2)).sum();
            let log_density = -sq / (2.0 * var) - (2.0 * std::f64::consts::PI * var).ln();
            loss -= log_density * adv;
        }
        if terms.baseline {
            loss += (r - tr.out.baseline).powi(2) / t_max as f64;
        }
        if terms.classification && t + 1 == t_max {
            loss += bce(tr.out.class_prob, episode.label);
        }
    }
    loss
}

/// Gradient of the training loss plus diagnostics.
#[derive(Debug, Clone)]
pub struct GradEstimate {
    pub grad: ModelParams,
    pub mean_reward: f64,
    pub baseline_mse: f64,
    pub class_loss: f64,
    pub episodes: usize,
}

impl GradEstimate {
    pub fn is_finite(&self) -> bool {
        self.grad.is_finite() && self.baseline_mse.is_finite() && self.class_loss.is_finite()
    }

    pub fn loss(&self) -> f64 {
        self.baseline_mse + self.class_loss
    }
}

/// One training example: a precomputed grid and its label.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub grid: &'a ScfGrid,
    pub label: bool,
}

struct Partial {
    grad: ModelParams,
    reward: f64,
    mse: f64,
    bce: f64,
}

/// `M` rollouts per sample, gradients averaged over rollouts and batch.
/// Each sample's rollouts are seeded from `(seed, position, i)` and the
/// per-sample sums are reduced in batch order.
pub fn grad_estimate_on(params: &ModelParams, batch: &[Sample<'_>], config: &TrainConfig, terms: LossTerms, seed: u64, exec: ExecMode) -> Result<GradEstimate> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    config.validate()?;
    let m = config.mc_samples_m;
    let weight = 1.0 / (m * batch.len()) as f64;
    let indexed: Vec<(usize, Sample<'_>)> = batch.iter().copied().enumerate().collect();
    let partials = par::map(exec, &indexed, |&(pos, sample)| {
        let mut part = Partial {
            grad: params.zeros_like(),
            reward: 0.0,
            mse: 0.0,
            bce: 0.0,
        };
        for i in 0..m {
            let mut rng = rng_from(derive_seed(seed, &[pos as u64, i as u64]));
            let mut source = GridSource::new(sample.grid);
            let ep = rollout_on(params, &mut source, sample.label, config, Policy::Sample(&mut rng));
            let hg = episode_head_grads(&ep, config, terms, weight);
            backprop_episode(params, &ep.traces, &hg, &mut part.grad);
            part.reward += ep.returns[0];
            part.mse += ep
                .steps
                .iter()
                .zip(&ep.returns)
                .map(|(s, r)| (r - s.baseline).powi(2))
                .sum::<f64>()
                / ep.steps.len() as f64;
            part.bce += bce(ep.class_prob, ep.label);
        }
        part
    });
    let mut total = params.zeros_like();
    let (mut reward, mut mse, mut ce) = (0.0, 0.0, 0.0);
    for p in &partials {
        total.add_scaled(&p.grad, 1.0)?;
        reward += p.reward;
        mse += p.mse;
        ce += p.bce;
    }
    let n = (m * batch.len()) as f64;
    Ok(GradEstimate {
        grad: total,
        mean_reward: reward / n,
        baseline_mse: mse / n,
        class_loss: ce / n,
        episodes: m * batch.len(),
    })
}

/// Record-level entry point: grids are computed from the records first.
pub fn grad_estimate(params: &ModelParams, batch: &[DatasetRecord], synth: &SynthConfig, scf: &ScfConfig, config: &TrainConfig, seed: u64) -> Result<GradEstimate> {
    let prepared = prepare(batch, synth, scf, ExecMode::default())?;
    grad_estimate_on(params, &prepared.samples(), config, LossTerms::ALL, seed, ExecMode::default())
}

/// `θ − lr·∇θ`.
pub fn sgd_update(params: &ModelParams, grad: &ModelParams, lr: f64) -> Result<ModelParams> {
    let mut next = params.clone();
    next.add_scaled(grad, -lr)?;
    Ok(next)
}

/// Grids and labels for a list of records.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub grids: Vec<ScfGrid>,
    pub labels: Vec<bool>,
}

impl Prepared {
    pub fn samples(&self) -> Vec<Sample<'_>> {
        self.grids
            .iter()
            .zip(&self.labels)
            .map(|(grid, &label)| Sample { grid, label })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Synthesizes every record and computes its full grid by the FFT route.
pub fn prepare(records: &[DatasetRecord], synth: &SynthConfig, scf: &ScfConfig, exec: ExecMode) -> Result<Prepared> {
    let grids = par::map(exec, records, |r| -> Result<ScfGrid> { scf_full_fast(&r.signal(synth)?, scf) })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        grids,
        labels: records.iter().map(|r| r.label).collect(),
    })
}

/// Seed of the first-location draw for sample `i` in greedy evaluation.
pub fn greedy_start_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, &[0x4752, i as u64])
}

/// Greedy-policy accuracy over prepared samples; sample `i` starts from
/// [`greedy_start_seed`]`(seed, i)`.
pub fn greedy_accuracy(params: &ModelParams, samples: &[Sample<'_>], config: &TrainConfig, seed: u64, exec: ExecMode) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let indexed: Vec<(usize, Sample<'_>)> = samples.iter().copied().enumerate().collect();
    let correct = par::map(exec, &indexed, |&(i, s)| {
        let mut source = GridSource::new(s.grid);
        let mut rng = rng_from(greedy_start_seed(seed, i));
        rollout_on(params, &mut source, s.label, config, Policy::Greedy(&mut rng)).correct()
    });
    correct.iter().filter(|&&c| c).count() as f64 / samples.len() as f64
}

/// Start seed of the per-epoch greedy evaluations.
pub const EVAL_SEED: u64 = 0x4556_414c;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_reward: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub curve: Vec<EpochStats>,
}

/// Curve as CSV with header `epoch,mean_reward,train_acc,test_acc,loss`.
pub fn curve_csv(curve: &[EpochStats]) -> String {
    let mut s = String::from("epoch,mean_reward,train_acc,test_acc,loss\n");
    for e in curve {
        let test = e.test_acc.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.mean_reward, e.train_acc, test, e.loss);
    }
    s
}

/// Trains from `init_params(seed)`.
pub fn train(train_set: &Prepared, test_set: Option<&Prepared>, config: &TrainConfig, exec: ExecMode) -> Result<TrainOutcome> {
    train_from(init_params_with(config.dims, config.seed), train_set, test_set, config, exec, |_| {})
}

/// Shuffled mini-batch SGD for `config.epochs` epochs. After each epoch the
/// greedy accuracy on the training (and optional test) set is recorded and
/// `on_epoch` is called. A non-finite gradient or loss aborts with
/// [`Error::Diverged`] carrying the parameters from before that epoch.
pub fn train_from(
    init: ModelParams,
    train_set: &Prepared,
    test_set: Option<&Prepared>,
    config: &TrainConfig,
    exec: ExecMode,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    config.validate()?;
    init.check_dims()?;
    if train_set.is_empty() {
        return Err(Error::param("empty training set"));
    }
    let samples = train_set.samples();
    let test_samples = test_set.map(|t| t.samples());
    let mut params = init;
    let mut curve = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        let last_good = params.clone();
        let diverged = |reason: String, last_good: ModelParams| Error::Diverged {
            epoch,
            reason,
            last_good: Box::new(last_good),
        };
        order.shuffle(&mut rng_from(derive_seed(config.seed, &[0x4550, epoch as u64])));
        let lr = config.lr_at(epoch);
        let (mut reward, mut loss, mut episodes) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Sample<'_>> = chunk.iter().map(|&i| samples[i]).collect();
            let seed = derive_seed(config.seed, &[0x4241, epoch as u64, b as u64]);
            let est = grad_estimate_on(&params, &batch, config, LossTerms::ALL, seed, exec)?;
            if !est.is_finite() {
                return Err(diverged(format!("non-finite gradient in batch {b}"), last_good));
            }
            params = sgd_update(&params, &est.grad, lr)?;
            if !params.is_finite() {
                return Err(diverged(format!("non-finite parameters after batch {b}"), last_good));
            }
            reward += est.mean_reward * est.episodes as f64;
            loss += est.loss() * est.episodes as f64;
            episodes += est.episodes;
        }
        let stats = EpochStats {
            epoch,
            mean_reward: reward / episodes as f64,
            train_acc: greedy_accuracy(&params, &samples, config, EVAL_SEED, exec),
            test_acc: test_samples.as_ref().map(|t| greedy_accuracy(&params, t, config, EVAL_SEED, exec)),
            loss: loss / episodes as f64,
        };
        on_epoch(&stats);
        curve.push(stats);
    }
    Ok(TrainOutcome { params, curve })
}
