//! Inference: run a trained policy on one received window, evaluating the
//! SCF only at attended cells, and report the decision with compute counts.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attnnet::ModelParams;
use crate::cyclo::{GridCell, GridSource, PatchCache, PatchSource, ScfConfig, CELLS_PER_SIDE, PATCH_LEN};
use crate::error::Result;
use crate::par::{self, ExecMode};
use crate::reinforce::{greedy_start_seed, rollout_on, Episode, Policy, Sample, TrainConfig};
use crate::rng::{derive_seed, rng_from};
use crate::sigsynth::IqSignal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectMode {
    /// Sampled locations, as in training.
    Stochastic(u64),
    /// Mean locations after a first location drawn from the seed (or the
    /// configured fixed start).
    Greedy(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub decision: bool,
    pub class_prob: f64,
    pub attended_cells: Vec<GridCell>,
    /// Clamped continuous `[f, α]` location of every step.
    pub attended_locations: Vec<[f64; 2]>,
    /// Patch bins evaluated: 16 per distinct attended cell.
    pub scf_bins_computed: usize,
    /// Bins of the α=0 row evaluated once for patch normalization.
    pub normalization_bins: usize,
    pub full_grid_bins: usize,
}

impl DetectionReport {
    pub fn patches_computed(&self) -> usize {
        self.scf_bins_computed / PATCH_LEN
    }

    /// Distinct attended cells over all grid cells.
    pub fn cell_fraction(&self) -> f64 {
        self.patches_computed() as f64 / (CELLS_PER_SIDE * CELLS_PER_SIDE) as f64
    }

    pub fn bins_fraction(&self) -> f64 {
        self.scf_bins_computed as f64 / self.full_grid_bins as f64
    }

    fn from_episode(ep: &Episode, normalization_bins: usize, full_grid_bins: usize) -> Self {
        Self {
            decision: ep.predicted,
            class_prob: ep.class_prob,
            attended_cells: ep.attended_cells(),
            attended_locations: ep.steps.iter().map(|s| s.loc).collect(),
            scf_bins_computed: ep.bins_computed,
            normalization_bins,
            full_grid_bins,
        }
    }
}

fn run(params: &ModelParams, source: &mut dyn PatchSource, config: &TrainConfig, mode: DetectMode) -> Episode {
    // The label only affects rewards, which detection never reads.
    match mode {
        DetectMode::Greedy(seed) => {
            let mut rng = rng_from(seed);
            rollout_on(params, source, false, config, Policy::Greedy(&mut rng))
        }
        DetectMode::Stochastic(seed) => {
            let mut rng = rng_from(seed);
            rollout_on(params, source, false, config, Policy::Sample(&mut rng))
        }
    }
}

/// Detects on a raw window, evaluating patches on demand by the direct route.
pub fn detect(params: &ModelParams, signal: &IqSignal, scf: &ScfConfig, config: &TrainConfig, mode: DetectMode) -> Result<DetectionReport> {
    let mut cache = PatchCache::new(signal, scf)?;
    let ep = run(params, &mut cache, config, mode);
    Ok(DetectionReport::from_episode(&ep, cache.normalization_bins(), scf.bins()))
}

/// Detects against any patch source; `normalization_bins` is reported as 0.
pub fn detect_on(params: &ModelParams, source: &mut dyn PatchSource, config: &TrainConfig, mode: DetectMode) -> DetectionReport {
    let ep = run(params, source, config, mode);
    DetectionReport::from_episode(&ep, 0, ScfConfig::default().bins())
}

/// Mode of episode `i` in a batch evaluation. Greedy episodes use the same
/// start seeds as the greedy accuracy reported during training.
pub fn episode_mode(mode: DetectMode, i: usize) -> DetectMode {
    match mode {
        DetectMode::Greedy(seed) => DetectMode::Greedy(greedy_start_seed(seed, i)),
        DetectMode::Stochastic(seed) => DetectMode::Stochastic(derive_seed(seed, &[0x4445, i as u64])),
    }
}

/// Detections over precomputed grids, in input order.
pub fn detect_all(params: &ModelParams, samples: &[Sample<'_>], config: &TrainConfig, mode: DetectMode, exec: ExecMode) -> Vec<DetectionReport> {
    let indexed: Vec<(usize, &Sample<'_>)> = samples.iter().enumerate().collect();
    par::map(exec, &indexed, |&(i, s)| {
        let mut source = GridSource::new(s.grid);
        let full = s.grid.n_alpha * s.grid.n_f;
        let mut r = detect_on(params, &mut source, config, episode_mode(mode, i));
        r.full_grid_bins = full;
        r
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionPoint {
    pub episode: usize,
    pub step: usize,
    pub f: f64,
    pub alpha: f64,
    pub cell: GridCell,
}

/// Every attended location over a dataset, `T` points per record.
pub fn attention_trace(params: &ModelParams, samples: &[Sample<'_>], config: &TrainConfig, mode: DetectMode, exec: ExecMode) -> Vec<AttentionPoint> {
    detect_all(params, samples, config, mode, exec)
        .iter()
        .enumerate()
        .flat_map(|(episode, r)| {
            r.attended_locations
                .iter()
                .zip(&r.attended_cells)
                .enumerate()
                .map(move |(step, (loc, &cell))| AttentionPoint {
                    episode,
                    step,
                    f: loc[0],
                    alpha: loc[1],
                    cell,
                })
        })
        .collect()
}

/// `episode,step,f,alpha,cell_row,cell_col` with normalized coordinates.
pub fn scatter_csv(points: &[AttentionPoint]) -> String {
    let mut s = String::from("episode,step,f,alpha,cell_row,cell_col\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{},{},{}", p.episode, p.step, p.f, p.alpha, p.cell.row, p.cell.col);
    }
    s
}

/// `record_id,label,decision,class_prob,cells,bins_computed`; cells are
/// `row:col` joined by `;`.
pub fn reports_csv(rows: &[(usize, bool, &DetectionReport)]) -> String {
    let mut s = String::from("record_id,label,decision,class_prob,cells,bins_computed\n");
    for (id, label, r) in rows {
        let cells: Vec<String> = r.attended_cells.iter().map(|c| format!("{}:{}", c.row, c.col)).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            id,
            u8::from(*label),
            u8::from(r.decision),
            r.class_prob,
            cells.join(";"),
            r.scf_bins_computed
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attnnet::{init_params_with, ModelDims};
    use crate::reinforce::rollout;
    use crate::sigsynth::{generate_dataset_with, Scenario, SynthConfig};

    fn small() -> (SynthConfig, ScfConfig, TrainConfig) {
        let synth = SynthConfig {
            window_n: 4096,
            ..SynthConfig::default()
        };
        let scf = ScfConfig {
            window_n: 4096,
            ..ScfConfig::default()
        };
        let cfg = TrainConfig {
            dims: ModelDims {
                value: 8,
                location: 8,
                fused: 8,
                hidden: 8,
                ..ModelDims::default()
            },
            ..TrainConfig::default()
        };
        (synth, scf, cfg)
    }

    #[test]
    fn greedy_detection_is_reproducible_and_bounded() {
        let (synth, scf, cfg) = small();
        let ds = generate_dataset_with(Scenario::I, &synth, 2, 1, 5).unwrap();
        let signal = ds.train[0].signal(&synth).unwrap();
        let params = init_params_with(cfg.dims, 1);
        let a = detect(&params, &signal, &scf, &cfg, DetectMode::Greedy(4)).unwrap();
        let b = detect(&params, &signal, &scf, &cfg, DetectMode::Greedy(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.attended_cells.len(), 5);
        assert_eq!(a.full_grid_bins, 4096);
        assert_eq!(a.normalization_bins, 64);
        let distinct: std::collections::BTreeSet<_> = a.attended_cells.iter().collect();
        assert_eq!(a.scf_bins_computed, 16 * distinct.len());
        assert!(a.scf_bins_computed <= 80);
        assert!(a.cell_fraction() <= 5.0 / 64.0);
    }

    #[test]
    fn stochastic_detection_matches_the_training_rollout() {
        let (synth, scf, cfg) = small();
        let ds = generate_dataset_with(Scenario::I, &synth, 4, 1, 6).unwrap();
        let params = init_params_with(cfg.dims, 2);
        for (i, rec) in ds.train.iter().enumerate() {
            let signal = rec.signal(&synth).unwrap();
            let r = detect(&params, &signal, &scf, &cfg, DetectMode::Stochastic(i as u64)).unwrap();
            let ep = rollout(&params, rec, &synth, &scf, &cfg, i as u64).unwrap();
            assert_eq!(r.class_prob, ep.class_prob);
            assert_eq!(r.decision, ep.class_prob > 0.5);
            assert_eq!(r.attended_cells, ep.attended_cells());
        }
    }

    #[test]
    fn trace_has_t_points_per_record_and_exports() {
        let (synth, scf, cfg) = small();
        let ds = generate_dataset_with(Scenario::I, &synth, 3, 1, 7).unwrap();
        let prepared = crate::reinforce::prepare(&ds.train, &synth, &scf, ExecMode::Sequential).unwrap();
        let params = init_params_with(cfg.dims, 3);
        let pts = attention_trace(&params, &prepared.samples(), &cfg, DetectMode::Stochastic(1), ExecMode::Sequential);
        assert_eq!(pts.len(), 15);
        assert!(pts.iter().all(|p| GridCell::from_location([p.f, p.alpha]) == p.cell));
        assert_eq!(scatter_csv(&pts).lines().count(), 16);
        let reports = detect_all(&params, &prepared.samples(), &cfg, DetectMode::Greedy(0), ExecMode::Sequential);
        let rows: Vec<_> = reports.iter().enumerate().map(|(i, r)| (i, prepared.labels[i], r)).collect();
        let csv = reports_csv(&rows);
        assert!(csv.starts_with("record_id,label,decision,class_prob,cells,bins_computed\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
