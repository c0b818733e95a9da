//! Cyclic autocorrelation and spectral correlation estimators.
//!
//! The cyclic autocorrelation at angular cyclic frequency `α` and integer
//! lag `l` is estimated over a finite window of `N` samples as
//!
//! ```text
//! R(α, l) = (1/N) Σₙ x[n]·x*[n−l]·e^{−jαn} · e^{+jαl/2}
//! ```
//!
//! where the trailing factor re-centres the asymmetric lag product so the
//! estimate matches the symmetric `x[n+l/2]·x*[n−l/2]` form. The spectral
//! correlation is its truncated lag-domain transform
//! `S(α, f) = Σ_{|l|≤L} R(α, l)·e^{−jfl}`.
//!
//! Grids live on an `(α, f)` lattice: `α_k = k·Δα` over `[0, 2π)` and
//! `f_j = −π + j·Δf` over `[−π, π)`. The lattice is tiled by an 8×8
//! arrangement of [`GridCell`]s; a [`ScfPatch`] holds the 4×4 lattice points
//! at every second bin of one cell.
//!
//! Two evaluation routes exist. The direct route evaluates the sums as
//! written and is the reference. [`scf_full_fast`] folds the lag products
//! modulo the α-lattice period and uses one small FFT per lag; it is only
//! available when the α lattice divides 2π evenly.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigsynth::IqSignal;

/// Cells per side of the attention lattice.
pub const CELLS_PER_SIDE: usize = 8;
/// Sample points per side of a patch.
pub const PATCH_SIDE: usize = 4;
pub const PATCH_LEN: usize = PATCH_SIDE * PATCH_SIDE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScfConfig {
    pub window_n: usize,
    pub f_resolution: f64,
    pub alpha_resolution: f64,
    pub max_lag: usize,
    /// Wrap lag products around the window instead of zero-padding.
    #[serde(default)]
    pub circular: bool,
}

impl Default for ScfConfig {
    fn default() -> Self {
        Self {
            window_n: 25_600,
            f_resolution: PI / 32.0,
            alpha_resolution: PI / 32.0,
            max_lag: 12,
            circular: false,
        }
    }
}

impl ScfConfig {
    pub fn n_f(&self) -> usize {
        (2.0 * PI / self.f_resolution).round() as usize
    }

    pub fn n_alpha(&self) -> usize {
        (2.0 * PI / self.alpha_resolution).round() as usize
    }

    pub fn bins(&self) -> usize {
        self.n_f() * self.n_alpha()
    }

    pub fn f_axis(&self) -> Vec<f64> {
        (0..self.n_f()).map(|j| -PI + j as f64 * self.f_resolution).collect()
    }

    pub fn alpha_axis(&self) -> Vec<f64> {
        (0..self.n_alpha()).map(|k| k as f64 * self.alpha_resolution).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_n == 0 {
            return Err(Error::param("SCF window must be positive"));
        }
        if self.max_lag >= self.window_n {
            return Err(Error::param("max_lag must be below the window length"));
        }
        for (name, res) in [("f", self.f_resolution), ("alpha", self.alpha_resolution)] {
            if !(res > 0.0 && res <= PI) {
                return Err(Error::param(format!("{name} resolution {res} out of range")));
            }
            let bins = (2.0 * PI / res).round() as usize;
            if ((2.0 * PI / res) - bins as f64).abs() > 1e-9 {
                return Err(Error::param(format!("{name} resolution must divide 2π")));
            }
            if bins % (CELLS_PER_SIDE * PATCH_SIDE) != 0 {
                return Err(Error::param(format!(
                    "{name} grid of {bins} bins does not tile into {CELLS_PER_SIDE}x{CELLS_PER_SIDE} cells of {PATCH_SIDE}x{PATCH_SIDE} points"
                )));
            }
        }
        Ok(())
    }

    fn cell_rows(&self) -> usize {
        self.n_alpha() / CELLS_PER_SIDE
    }

    fn cell_cols(&self) -> usize {
        self.n_f() / CELLS_PER_SIDE
    }
}

/// One block of the 8×8 attention lattice. `row` indexes α, `col` indexes f.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
}

impl GridCell {
    pub fn new(row: usize, col: usize) -> Result<Self> {
        if row >= CELLS_PER_SIDE || col >= CELLS_PER_SIDE {
            return Err(Error::param(format!("cell ({row}, {col}) outside the lattice")));
        }
        Ok(Self { row, col })
    }

    /// Cell containing a normalized location `[f, α] ∈ [−1, 1]²`.
    pub fn from_location(loc: [f64; 2]) -> Self {
        let idx = |v: f64| -> usize {
            let u = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * CELLS_PER_SIDE as f64).floor();
            (u as usize).min(CELLS_PER_SIDE - 1)
        };
        Self {
            row: idx(loc[1]),
            col: idx(loc[0]),
        }
    }

    /// Normalized `[f, α]` coordinates of the cell centre.
    pub fn center(&self) -> [f64; 2] {
        let c = |i: usize| (i as f64 + 0.5) / CELLS_PER_SIDE as f64 * 2.0 - 1.0;
        [c(self.col), c(self.row)]
    }

    pub fn index(&self) -> usize {
        self.row * CELLS_PER_SIDE + self.col
    }

    pub fn all() -> impl Iterator<Item = GridCell> {
        (0..CELLS_PER_SIDE * CELLS_PER_SIDE).map(|i| GridCell {
            row: i / CELLS_PER_SIDE,
            col: i % CELLS_PER_SIDE,
        })
    }

    /// `(α bin, f bin)` lattice indices sampled by this cell's patch.
    pub fn sample_bins(&self, config: &ScfConfig) -> ([usize; PATCH_SIDE], [usize; PATCH_SIDE]) {
        let (rh, cw) = (config.cell_rows(), config.cell_cols());
        let (rs, cs) = (rh / PATCH_SIDE, cw / PATCH_SIDE);
        (
            std::array::from_fn(|i| self.row * rh + i * rs),
            std::array::from_fn(|i| self.col * cw + i * cs),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScfPatch {
    /// Row-major over (α, f).
    pub values: [f64; PATCH_LEN],
    pub cell: GridCell,
}

impl ScfPatch {
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Normalized SCF magnitudes over the full lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ScfGrid {
    /// Row-major `[α][f]`.
    pub magnitudes: Vec<f64>,
    pub n_alpha: usize,
    pub n_f: usize,
    pub alpha_axis: Vec<f64>,
    pub f_axis: Vec<f64>,
    /// Divisor applied to raw magnitudes (the α=0 row maximum, or 1).
    pub scale: f64,
}

impl ScfGrid {
    pub fn get(&self, alpha_bin: usize, f_bin: usize) -> f64 {
        self.magnitudes[alpha_bin * self.n_f + f_bin]
    }

    pub fn row(&self, alpha_bin: usize) -> &[f64] {
        &self.magnitudes[alpha_bin * self.n_f..(alpha_bin + 1) * self.n_f]
    }

    /// Unnormalized magnitude.
    pub fn raw(&self, alpha_bin: usize, f_bin: usize) -> f64 {
        self.get(alpha_bin, f_bin) * self.scale
    }

    fn config_like(&self) -> ScfConfig {
        ScfConfig {
            f_resolution: 2.0 * PI / self.n_f as f64,
            alpha_resolution: 2.0 * PI / self.n_alpha as f64,
            ..ScfConfig::default()
        }
    }

    /// The 16 lattice values a patch at `cell` would hold.
    pub fn patch(&self, cell: GridCell) -> ScfPatch {
        let (rows, cols) = cell.sample_bins(&self.config_like());
        let mut values = [0.0; PATCH_LEN];
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                values[i * PATCH_SIDE + j] = self.get(r, c);
            }
        }
        ScfPatch { values, cell }
    }

    /// Sum of squared magnitudes over every bin of a cell's block.
    pub fn cell_energy(&self, cell: GridCell) -> f64 {
        let rh = self.n_alpha / CELLS_PER_SIDE;
        let cw = self.n_f / CELLS_PER_SIDE;
        let mut e = 0.0;
        for r in cell.row * rh..(cell.row + 1) * rh {
            for c in cell.col * cw..(cell.col + 1) * cw {
                e += self.get(r, c).powi(2);
            }
        }
        e
    }

    pub fn total_energy(&self) -> f64 {
        self.magnitudes.iter().map(|v| v * v).sum()
    }

    /// Elementwise mean of equally shaped grids.
    pub fn mean_of(grids: &[ScfGrid]) -> Result<ScfGrid> {
        let first = grids.first().ok_or_else(|| Error::param("no grids to average"))?;
        let mut acc = vec![0.0; first.magnitudes.len()];
        for g in grids {
            if g.n_alpha != first.n_alpha || g.n_f != first.n_f {
                return Err(Error::param("grid shapes differ"));
            }
            for (a, v) in acc.iter_mut().zip(&g.magnitudes) {
                *a += v;
            }
        }
        let n = grids.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(ScfGrid {
            magnitudes: acc,
            scale: 1.0,
            ..first.clone()
        })
    }

    /// Cells sorted by descending block energy.
    pub fn cells_by_energy(&self) -> Vec<(GridCell, f64)> {
        let mut cells: Vec<(GridCell, f64)> =
            GridCell::all().map(|c| (c, self.cell_energy(c))).collect();
        cells.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cells
    }

    /// `(α bin, f bin)` of the largest magnitude among rows with α ≠ 0.
    pub fn peak_off_zero_alpha(&self) -> (usize, usize) {
        let mut best = (1, 0, f64::NEG_INFINITY);
        for r in 1..self.n_alpha {
            for c in 0..self.n_f {
                let v = self.get(r, c);
                if v > best.2 {
                    best = (r, c, v);
                }
            }
        }
        (best.0, best.1)
    }

    /// One line per α bin, comma separated over f.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.magnitudes.len() * 20);
        for r in 0..self.n_alpha {
            let line: Vec<String> = self.row(r).iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Binary 8-bit PGM, one row per α bin, linear in magnitude with the
    /// grid maximum at 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let peak = self.magnitudes.iter().cloned().fold(0.0f64, f64::max);
        let mut out = format!("P5\n{} {}\n255\n", self.n_f, self.n_alpha).into_bytes();
        out.extend(self.magnitudes.iter().map(|&v| {
            if peak > 0.0 {
                (v / peak * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
        out
    }
}

fn window<'a>(signal: &'a IqSignal, config: &ScfConfig) -> &'a [Complex64] {
    let n = config.window_n.min(signal.len());
    &signal.samples[..n]
}

fn rotated(x: &[Complex64], alpha: f64) -> Vec<Complex64> {
    x.iter()
        .enumerate()
        .map(|(n, v)| {
            let (s, c) = (-alpha * n as f64).sin_cos();
            v * Complex64::new(c, s)
        })
        .collect()
}

/// `(1/N) Σₙ y[n]·x*[n−l]` with zero or circular boundary.
fn lag_sum(y: &[Complex64], x: &[Complex64], lag: i64, circular: bool) -> Complex64 {
    let n = x.len() as i64;
    let mut acc = Complex64::new(0.0, 0.0);
    if circular {
        for i in 0..n {
            let k = (i - lag).rem_euclid(n);
            acc += y[i as usize] * x[k as usize].conj();
        }
    } else {
        let lo = lag.max(0);
        let hi = (n + lag).min(n);
        for i in lo..hi {
            acc += y[i as usize] * x[(i - lag) as usize].conj();
        }
    }
    acc / n as f64
}

fn caf_lags(x: &[Complex64], alpha: f64, lags: RangeInclusive<i64>, circular: bool) -> Vec<Complex64> {
    if x.is_empty() {
        return lags.map(|_| Complex64::new(0.0, 0.0)).collect();
    }
    let y = rotated(x, alpha);
    lags.map(|l| {
        let (s, c) = (alpha * l as f64 / 2.0).sin_cos();
        lag_sum(&y, x, l, circular) * Complex64::new(c, s)
    })
    .collect()
}

/// Cyclic autocorrelation over the whole signal at angular cyclic
/// frequency `alpha`, for each lag in `lags`. Samples outside the signal
/// are zero.
pub fn caf(signal: &IqSignal, alpha: f64, lags: RangeInclusive<i64>) -> Vec<Complex64> {
    caf_lags(&signal.samples, alpha, lags, false)
}

/// Lag-domain transform of a CAF row indexed `l + max_lag`.
fn lag_dft(row: &[Complex64], f: f64) -> Complex64 {
    let max_lag = (row.len() / 2) as i64;
    row.iter()
        .enumerate()
        .map(|(i, r)| {
            let l = i as i64 - max_lag;
            let (s, c) = (-f * l as f64).sin_cos();
            r * Complex64::new(c, s)
        })
        .sum()
}

/// Spectral correlation at one `(α, f)` point over the whole signal.
pub fn scf_point(signal: &IqSignal, alpha: f64, f: f64, max_lag: usize) -> Complex64 {
    let l = max_lag as i64;
    lag_dft(&caf(signal, alpha, -l..=l), f)
}

/// Direct-route evaluator bound to one window. Computes the normalization
/// row once and then individual patches or rows on request.
pub struct ScfEvaluator<'a> {
    x: &'a [Complex64],
    config: ScfConfig,
    alpha_axis: Vec<f64>,
    f_axis: Vec<f64>,
    scale: Option<f64>,
}

impl<'a> ScfEvaluator<'a> {
    pub fn new(signal: &'a IqSignal, config: &ScfConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            x: window(signal, config),
            config: config.clone(),
            alpha_axis: config.alpha_axis(),
            f_axis: config.f_axis(),
            scale: None,
        })
    }

    fn caf_row(&self, alpha: f64) -> Vec<Complex64> {
        let l = self.config.max_lag as i64;
        caf_lags(self.x, alpha, -l..=l, self.config.circular)
    }

    /// Raw complex SCF values of α bin `k` at the given f bins.
    fn raw_row(&self, k: usize, f_bins: &[usize]) -> Vec<Complex64> {
        let row = self.caf_row(self.alpha_axis[k]);
        f_bins.iter().map(|&j| lag_dft(&row, self.f_axis[j])).collect()
    }

    /// Normalization divisor: max |S| over the α=0 row, or 1 for a silent
    /// window.
    pub fn scale(&mut self) -> f64 {
        if let Some(s) = self.scale {
            return s;
        }
        let all: Vec<usize> = (0..self.config.n_f()).collect();
        let peak = self
            .raw_row(0, &all)
            .iter()
            .map(|v| v.norm())
            .fold(0.0f64, f64::max);
        let s = if peak > 0.0 { peak } else { 1.0 };
        self.scale = Some(s);
        s
    }

    pub fn patch(&mut self, cell: GridCell) -> ScfPatch {
        let scale = self.scale();
        let (rows, cols) = cell.sample_bins(&self.config);
        let mut values = [0.0; PATCH_LEN];
        for (i, &k) in rows.iter().enumerate() {
            for (j, v) in self.raw_row(k, &cols).iter().enumerate() {
                values[i * PATCH_SIDE + j] = v.norm() / scale;
            }
        }
        ScfPatch { values, cell }
    }

    /// Unnormalized complex SCF over the whole lattice.
    pub fn raw_grid(&self) -> Vec<Complex64> {
        let all: Vec<usize> = (0..self.config.n_f()).collect();
        (0..self.config.n_alpha())
            .flat_map(|k| self.raw_row(k, &all))
            .collect()
    }

    pub fn full(&mut self) -> ScfGrid {
        let scale = self.scale();
        let raw = self.raw_grid();
        grid_from_raw(&raw, &self.config, scale)
    }
}

fn grid_from_raw(raw: &[Complex64], config: &ScfConfig, scale: f64) -> ScfGrid {
    ScfGrid {
        magnitudes: raw.iter().map(|v| v.norm() / scale).collect(),
        n_alpha: config.n_alpha(),
        n_f: config.n_f(),
        alpha_axis: config.alpha_axis(),
        f_axis: config.f_axis(),
        scale,
    }
}

fn scale_from_raw(raw: &[Complex64], n_f: usize) -> f64 {
    let peak = raw[..n_f].iter().map(|v| v.norm()).fold(0.0f64, f64::max);
    if peak > 0.0 {
        peak
    } else {
        1.0
    }
}

/// Patch at `cell`: 16 direct SCF evaluations plus the normalization row.
pub fn scf_patch(signal: &IqSignal, cell: GridCell, config: &ScfConfig) -> Result<ScfPatch> {
    Ok(ScfEvaluator::new(signal, config)?.patch(cell))
}

/// Full normalized grid by the direct route.
pub fn scf_full(signal: &IqSignal, config: &ScfConfig) -> Result<ScfGrid> {
    Ok(ScfEvaluator::new(signal, config)?.full())
}

/// Unnormalized complex SCF by the direct route, row-major `[α][f]`.
pub fn scf_raw(signal: &IqSignal, config: &ScfConfig) -> Result<Vec<Complex64>> {
    Ok(ScfEvaluator::new(signal, config)?.raw_grid())
}

/// Unnormalized complex SCF by the folded-FFT route.
pub fn scf_raw_fast(signal: &IqSignal, config: &ScfConfig) -> Result<Vec<Complex64>> {
    config.validate()?;
    let x = window(signal, config);
    let (n_alpha, n_f) = (config.n_alpha(), config.n_f());
    let max_lag = config.max_lag as i64;
    let n = x.len() as i64;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_alpha);
    let alpha_axis = config.alpha_axis();
    let f_axis = config.f_axis();

    // caf[k][l + L]
    let width = (2 * max_lag + 1) as usize;
    let mut cafs = vec![Complex64::new(0.0, 0.0); n_alpha * width];
    let mut folded = vec![Complex64::new(0.0, 0.0); n_alpha];
    for (li, lag) in (-max_lag..=max_lag).enumerate() {
        folded.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        if n > 0 {
            let (lo, hi) = if config.circular {
                (0, n)
            } else {
                (lag.max(0), (n + lag).min(n))
            };
            for i in lo..hi {
                let k = (i - lag).rem_euclid(n) as usize;
                folded[(i as usize) % n_alpha] += x[i as usize] * x[k].conj();
            }
        }
        fft.process(&mut folded);
        for (k, v) in folded.iter().enumerate() {
            let (s, c) = (alpha_axis[k] * lag as f64 / 2.0).sin_cos();
            let norm = if n > 0 { n as f64 } else { 1.0 };
            cafs[k * width + li] = v / norm * Complex64::new(c, s);
        }
    }
    let mut raw = Vec::with_capacity(n_alpha * n_f);
    for k in 0..n_alpha {
        let row = &cafs[k * width..(k + 1) * width];
        raw.extend(f_axis.iter().map(|&f| lag_dft(row, f)));
    }
    Ok(raw)
}

/// Full normalized grid by the folded-FFT route.
pub fn scf_full_fast(signal: &IqSignal, config: &ScfConfig) -> Result<ScfGrid> {
    let raw = scf_raw_fast(signal, config)?;
    let scale = scale_from_raw(&raw, config.n_f());
    Ok(grid_from_raw(&raw, config, scale))
}

/// Lag-windowed autocorrelation PSD estimate on the f lattice. Uses the
/// Hermitian symmetry of the lag sequence, so the result is real (and may
/// dip below zero under the rectangular lag window).
pub fn psd(signal: &IqSignal, config: &ScfConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let x = window(signal, config);
    let n = x.len();
    if n == 0 {
        return Ok(vec![0.0; config.n_f()]);
    }
    let acf: Vec<Complex64> = (0..=config.max_lag as i64)
        .map(|l| lag_sum(x, x, l, config.circular))
        .collect();
    Ok(config
        .f_axis()
        .iter()
        .map(|&f| {
            acf[0].re
                + 2.0
                    * acf
                        .iter()
                        .enumerate()
                        .skip(1)
                        .map(|(l, r)| (r * Complex64::from_polar(1.0, -f * l as f64)).re)
                        .sum::<f64>()
        })
        .collect())
}

/// Per-window patch cache that counts SCF bin evaluations.
pub struct PatchCache<'a> {
    evaluator: ScfEvaluator<'a>,
    cache: HashMap<GridCell, ScfPatch>,
    bins_computed: usize,
}

impl<'a> PatchCache<'a> {
    pub fn new(signal: &'a IqSignal, config: &ScfConfig) -> Result<Self> {
        Ok(Self {
            evaluator: ScfEvaluator::new(signal, config)?,
            cache: HashMap::new(),
            bins_computed: 0,
        })
    }

    pub fn get(&mut self, cell: GridCell) -> ScfPatch {
        if let Some(p) = self.cache.get(&cell) {
            return p.clone();
        }
        let p = self.evaluator.patch(cell);
        self.bins_computed += PATCH_LEN;
        self.cache.insert(cell, p.clone());
        p
    }

    pub fn bins_computed(&self) -> usize {
        self.bins_computed
    }

    pub fn unique_cells(&self) -> usize {
        self.cache.len()
    }

    /// Bins spent on the α=0 normalization row (0 until the first patch).
    pub fn normalization_bins(&self) -> usize {
        if self.evaluator.scale.is_some() {
            self.evaluator.config.n_f()
        } else {
            0
        }
    }
}

/// Supplies glimpses to an episode and counts the SCF bins it evaluated.
pub trait PatchSource {
    fn patch(&mut self, cell: GridCell) -> ScfPatch;
    /// Patch bins evaluated so far, 16 per distinct cell.
    fn bins_computed(&self) -> usize;
}

impl PatchSource for PatchCache<'_> {
    fn patch(&mut self, cell: GridCell) -> ScfPatch {
        self.get(cell)
    }

    fn bins_computed(&self) -> usize {
        self.bins_computed
    }
}

/// Reads patches out of a precomputed grid while accounting for them as if
/// they were evaluated on demand.
pub struct GridSource<'a> {
    grid: &'a ScfGrid,
    seen: u64,
}

impl<'a> GridSource<'a> {
    pub fn new(grid: &'a ScfGrid) -> Self {
        Self { grid, seen: 0 }
    }
}

impl PatchSource for GridSource<'_> {
    fn patch(&mut self, cell: GridCell) -> ScfPatch {
        self.seen |= 1 << cell.index();
        self.grid.patch(cell)
    }

    fn bins_computed(&self) -> usize {
        self.seen.count_ones() as usize * PATCH_LEN
    }
}

/// Renders a grid summary table used by the CLI.
pub fn describe(grid: &ScfGrid) -> String {
    let (r, c) = grid.peak_off_zero_alpha();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "grid {}x{}  peak α≠0 at α={:.4} rad, f={:.4} rad (value {:.4})",
        grid.n_alpha,
        grid.n_f,
        grid.alpha_axis[r],
        grid.f_axis[c],
        grid.get(r, c)
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigsynth::{add_awgn, modulate, ModulationScheme, SignalSpec};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn tone(w0: f64, n: usize) -> IqSignal {
        IqSignal::new(
            (0..n).map(|i| Complex64::from_polar(1.0, w0 * i as f64)).collect(),
            1.0,
        )
    }

    fn small_config() -> ScfConfig {
        ScfConfig {
            window_n: 2048,
            max_lag: 8,
            ..ScfConfig::default()
        }
    }

    #[test]
    fn caf_of_zero_signal_is_zero() {
        let x = IqSignal::zeros(256, 1.0);
        assert!(caf(&x, 0.7, -5..=5).iter().all(|v| v.norm() == 0.0));
        assert_eq!(scf_point(&x, 0.3, 0.1, 4), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn caf_of_tone_at_zero_alpha() {
        let n = 1000;
        let w0 = 0.37;
        let x = tone(w0, n);
        let lags = -7..=7;
        for (l, v) in lags.clone().zip(caf(&x, 0.0, lags)) {
            let expected = Complex64::from_polar(1.0 - (l as f64).abs() / n as f64, w0 * l as f64);
            assert!((v - expected).norm() < 1e-12, "lag {l}: {v} vs {expected}");
        }
    }

    #[test]
    fn zero_signal_patch_and_psd() {
        let x = IqSignal::zeros(4096, 1.0);
        let cfg = small_config();
        let p = scf_patch(&x, GridCell::new(3, 5).unwrap(), &cfg).unwrap();
        assert_eq!(p.values, [0.0; PATCH_LEN]);
        assert!(psd(&x, &cfg).unwrap().iter().all(|&v| v == 0.0));
        assert!(scf_full(&x, &cfg).unwrap().to_pgm()[13..].iter().all(|&b| b == 0));
    }

    #[test]
    fn psd_of_bin_centred_tone_peaks_at_that_bin() {
        let cfg = small_config();
        let axis = cfg.f_axis();
        for j in [3usize, 20, 32, 50] {
            let p = psd(&tone(axis[j], 2048), &cfg).unwrap();
            let arg = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(arg, j);
        }
    }

    #[test]
    fn patch_is_subsample_of_full_grid() {
        let spec = SignalSpec::new(ModulationScheme::Bpsk, 200e6, 4);
        let x = add_awgn(&modulate(&spec, 1.28e9, 2048).unwrap(), 5.0, 2).unwrap();
        let cfg = small_config();
        let grid = scf_full(&x, &cfg).unwrap();
        for cell in [GridCell::new(0, 0).unwrap(), GridCell::new(2, 4).unwrap(), GridCell::new(7, 7).unwrap()] {
            let p = scf_patch(&x, cell, &cfg).unwrap();
            assert_eq!(p, grid.patch(cell));
        }
    }

    #[test]
    fn fast_route_matches_direct_route() {
        let spec = SignalSpec::new(ModulationScheme::Fsk4, 300e6, 8);
        let x = add_awgn(&modulate(&spec, 1.28e9, 3000).unwrap(), 0.0, 1).unwrap();
        for circular in [false, true] {
            let cfg = ScfConfig {
                window_n: 3000,
                max_lag: 6,
                circular,
                ..ScfConfig::default()
            };
            let a = scf_raw(&x, &cfg).unwrap();
            let b = scf_raw_fast(&x, &cfg).unwrap();
            let peak = a.iter().map(|v| v.norm()).fold(0.0, f64::max);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).norm() <= 1e-9 * peak);
            }
        }
    }

    #[test]
    fn location_to_cell_mapping() {
        assert_eq!(GridCell::from_location([-1.0, -1.0]), GridCell { row: 0, col: 0 });
        assert_eq!(GridCell::from_location([1.0, 1.0]), GridCell { row: 7, col: 7 });
        assert_eq!(GridCell::from_location([0.0, -0.9]), GridCell { row: 0, col: 4 });
        for cell in GridCell::all() {
            assert_eq!(GridCell::from_location(cell.center()), cell);
        }
        assert!(GridCell::new(8, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ScfConfig::default().validate().is_ok());
        let bad = ScfConfig {
            f_resolution: PI / 20.0,
            ..ScfConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ScfConfig {
            max_lag: 30_000,
            ..ScfConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(ScfConfig::default().bins(), 4096);
    }

    fn noise(n: usize, seed: u64) -> IqSignal {
        let mut rng = crate::rng::rng_from(seed);
        IqSignal::new(
            (0..n)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect(),
            1.0,
        )
    }

    // 512 is a multiple of the 64 α bins, so e^{-jαn} is periodic in the window.
    fn circular_config() -> ScfConfig {
        ScfConfig {
            window_n: 512,
            max_lag: 5,
            circular: true,
            ..ScfConfig::default()
        }
    }

    fn peak(v: &[Complex64]) -> f64 {
        v.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn scaling_is_quadratic_in_amplitude(
            seed in 0u64..10_000,
            re in -3.0f64..3.0,
            im in -3.0f64..3.0,
        ) {
            let c = Complex64::new(re, im);
            prop_assume!(c.norm() > 1e-3);
            let x = noise(512, seed);
            let cx = IqSignal::new(x.samples.iter().map(|v| v * c).collect(), 1.0);
            let cfg = circular_config();
            let a = scf_raw(&x, &cfg).unwrap();
            let b = scf_raw(&cx, &cfg).unwrap();
            let tol = 1e-12 * peak(&b);
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u * c.norm_sqr() - v).norm() <= tol);
            }
        }

        #[test]
        fn circular_shift_keeps_magnitudes(seed in 0u64..10_000, shift in 1usize..512) {
            let x = noise(512, seed);
            let mut shifted = x.samples.clone();
            shifted.rotate_left(shift);
            let y = IqSignal::new(shifted, 1.0);
            let cfg = circular_config();
            let a = scf_raw_fast(&x, &cfg).unwrap();
            let b = scf_raw_fast(&y, &cfg).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u.norm() - v.norm()).abs() <= 1e-9);
            }
        }

        #[test]
        fn zero_alpha_row_is_the_psd(seed in 0u64..10_000, circular in any::<bool>()) {
            let x = noise(700, seed);
            let cfg = ScfConfig { window_n: 700, max_lag: 7, circular, ..ScfConfig::default() };
            let raw = scf_raw(&x, &cfg).unwrap();
            let p = psd(&x, &cfg).unwrap();
            let tol = 1e-12 * peak(&raw[..cfg.n_f()]);
            for (z, v) in raw[..cfg.n_f()].iter().zip(&p) {
                prop_assert!((z.re - v).abs() <= tol && z.im.abs() <= tol);
            }
        }
    }
}
