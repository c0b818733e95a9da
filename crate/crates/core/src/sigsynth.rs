//! Modulated signal synthesis, wideband scene composition and labeled
//! datasets.
//!
//! Scenes are real-valued passband windows (the imaginary part of every
//! sample is zero) at RF sample rate. A real carrier is what gives BPSK its
//! conjugate cyclic feature at twice the carrier frequency; the analytic
//! form of the same waveform is available through [`modulate_analytic`].

use std::f64::consts::{FRAC_PI_4, PI, SQRT_2};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// Default RF sample rate. Puts 100/200/300/400 MHz carriers and their
/// doubles exactly on the π/32 frequency lattice.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 1.28e9;
pub const DEFAULT_WINDOW_N: usize = 25_600;
pub const DEFAULT_SYMBOL_RATE_HZ: f64 = 10e6;
pub const DEFAULT_SNR_DB: f64 = 5.0;
pub const CARRIERS_HZ: [f64; 4] = [100e6, 200e6, 300e6, 400e6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModulationScheme {
    Bpsk,
    Qpsk,
    Fsk2,
    Fsk4,
}

impl ModulationScheme {
    pub const ALL: [ModulationScheme; 4] = [Self::Bpsk, Self::Qpsk, Self::Fsk2, Self::Fsk4];
    /// Schemes that may appear as background (non-target) signals.
    pub const BACKGROUND: [ModulationScheme; 3] = [Self::Qpsk, Self::Fsk2, Self::Fsk4];

    /// Number of distinct symbols (constellation points or tones).
    pub fn order(self) -> usize {
        match self {
            Self::Bpsk | Self::Fsk2 => 2,
            Self::Qpsk | Self::Fsk4 => 4,
        }
    }

    pub fn is_fsk(self) -> bool {
        matches!(self, Self::Fsk2 | Self::Fsk4)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Bpsk => "BPSK",
            Self::Qpsk => "QPSK",
            Self::Fsk2 => "2FSK",
            Self::Fsk4 => "4FSK",
        }
    }

    /// Unit-magnitude constellation point for PSK symbol `k`.
    fn psk_point(self, k: usize) -> Complex64 {
        match self {
            Self::Bpsk => {
                if k % 2 == 0 {
                    Complex64::new(1.0, 0.0)
                } else {
                    Complex64::new(-1.0, 0.0)
                }
            }
            Self::Qpsk => Complex64::from_polar(1.0, FRAC_PI_4 + (k % 4) as f64 * PI / 2.0),
            _ => unreachable!("psk_point on FSK scheme"),
        }
    }

    /// Tone offset (in units of the symbol rate) for FSK symbol `k`.
    /// Adjacent tones are one symbol rate apart (modulation index 1).
    fn fsk_offset(self, k: usize) -> f64 {
        let m = self.order();
        (2.0 * (k % m) as f64 - (m as f64 - 1.0)) / 2.0
    }
}

impl fmt::Display for ModulationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModulationScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BPSK" => Ok(Self::Bpsk),
            "QPSK" => Ok(Self::Qpsk),
            "2FSK" | "FSK2" => Ok(Self::Fsk2),
            "4FSK" | "FSK4" => Ok(Self::Fsk4),
            _ => Err(Error::param(format!("unknown modulation scheme {s:?}"))),
        }
    }
}

/// Serde adapter for dB values that may be infinite (noiseless).
mod db_value {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("bad dB value {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub scheme: ModulationScheme,
    pub carrier_hz: f64,
    pub symbol_rate_hz: f64,
    /// Power relative to the scene's noise floor, in dB.
    #[serde(with = "db_value")]
    pub snr_db: f64,
    pub seed: u64,
}

impl SignalSpec {
    pub fn new(scheme: ModulationScheme, carrier_hz: f64, seed: u64) -> Self {
        Self {
            scheme,
            carrier_hz,
            symbol_rate_hz: DEFAULT_SYMBOL_RATE_HZ,
            snr_db: DEFAULT_SNR_DB,
            seed,
        }
    }

    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        if !(sample_rate_hz > 0.0) {
            return Err(Error::param(format!("sample rate {sample_rate_hz} must be positive")));
        }
        if !(self.carrier_hz > 0.0 && self.carrier_hz < sample_rate_hz / 2.0) {
            return Err(Error::param(format!(
                "carrier {} Hz outside (0, {}) Hz",
                self.carrier_hz,
                sample_rate_hz / 2.0
            )));
        }
        if !(self.symbol_rate_hz > 0.0 && self.symbol_rate_hz < self.carrier_hz) {
            return Err(Error::param(format!(
                "symbol rate {} Hz must be in (0, carrier)",
                self.symbol_rate_hz
            )));
        }
        Ok(())
    }
}

/// A window of complex samples.
#[derive(Debug, Clone, PartialEq)]
pub struct IqSignal {
    pub samples: Vec<Complex64>,
    pub sample_rate_hz: f64,
}

impl IqSignal {
    pub fn new(samples: Vec<Complex64>, sample_rate_hz: f64) -> Self {
        Self {
            samples,
            sample_rate_hz,
        }
    }

    pub fn zeros(n: usize, sample_rate_hz: f64) -> Self {
        Self::new(vec![Complex64::new(0.0, 0.0); n], sample_rate_hz)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }

    /// True when every sample has a zero imaginary part.
    pub fn is_real(&self) -> bool {
        self.samples.iter().all(|s| s.im == 0.0)
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self::new(
            self.samples.iter().map(|s| s * gain).collect(),
            self.sample_rate_hz,
        )
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }
}

/// Waveform built from explicit symbol indices, cycled if shorter than the
/// number of symbols in the window. Carrier phase and symbol timing are
/// taken from `spec.seed`.
pub fn analytic_from_symbols(
    spec: &SignalSpec,
    sample_rate_hz: f64,
    n: usize,
    symbols: &[usize],
) -> Result<IqSignal> {
    if n == 0 {
        return Err(Error::param("window length must be positive"));
    }
    if symbols.is_empty() {
        return Err(Error::param("symbol stream is empty"));
    }
    spec.validate(sample_rate_hz)?;

    let mut rng = rng_from(derive_seed(spec.seed, &[0x5157]));
    let phase0: f64 = rng.random::<f64>() * 2.0 * PI;
    let samples_per_symbol = sample_rate_hz / spec.symbol_rate_hz;
    let timing: f64 = rng.random::<f64>() * samples_per_symbol;

    let w_c = 2.0 * PI * spec.carrier_hz / sample_rate_hz;
    let symbol_at = |i: usize| -> usize {
        let k = ((i as f64 + timing) / samples_per_symbol).floor() as usize;
        symbols[k % symbols.len()]
    };

    let samples = if spec.scheme.is_fsk() {
        let dw = 2.0 * PI * spec.symbol_rate_hz / sample_rate_hz;
        let mut excess = 0.0f64;
        (0..n)
            .map(|i| {
                let s = Complex64::from_polar(1.0, w_c * i as f64 + phase0 + excess);
                excess += dw * spec.scheme.fsk_offset(symbol_at(i));
                excess %= 2.0 * PI;
                s
            })
            .collect()
    } else {
        (0..n)
            .map(|i| {
                spec.scheme.psk_point(symbol_at(i))
                    * Complex64::from_polar(1.0, w_c * i as f64 + phase0)
            })
            .collect()
    };
    Ok(IqSignal::new(samples, sample_rate_hz))
}

fn random_symbols(spec: &SignalSpec, sample_rate_hz: f64, n: usize) -> Vec<usize> {
    let count = (n as f64 * spec.symbol_rate_hz / sample_rate_hz).ceil() as usize + 2;
    let mut rng = rng_from(derive_seed(spec.seed, &[0x5359]));
    let order = spec.scheme.order();
    (0..count).map(|_| rng.random_range(0..order)).collect()
}

/// Unit-power analytic (complex exponential carrier) waveform.
pub fn modulate_analytic(spec: &SignalSpec, sample_rate_hz: f64, n: usize) -> Result<IqSignal> {
    spec.validate(sample_rate_hz)?;
    let symbols = random_symbols(spec, sample_rate_hz, n.max(1));
    analytic_from_symbols(spec, sample_rate_hz, n, &symbols)
}

/// Unit-power real passband waveform, `√2·Re` of the analytic form.
pub fn modulate(spec: &SignalSpec, sample_rate_hz: f64, n: usize) -> Result<IqSignal> {
    let analytic = modulate_analytic(spec, sample_rate_hz, n)?;
    Ok(to_real(&analytic))
}

pub fn to_real(signal: &IqSignal) -> IqSignal {
    IqSignal::new(
        signal
            .samples
            .iter()
            .map(|s| Complex64::new(SQRT_2 * s.re, 0.0))
            .collect(),
        signal.sample_rate_hz,
    )
}

/// Adds white Gaussian noise of variance `power` in place. Real signals get
/// real noise; complex signals get circularly symmetric noise.
fn add_noise_power(samples: &mut [Complex64], real: bool, power: f64, seed: u64) {
    if power <= 0.0 {
        return;
    }
    let mut rng = rng_from(seed);
    if real {
        let sd = power.sqrt();
        for s in samples.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            s.re += sd * z;
        }
    } else {
        let sd = (power / 2.0).sqrt();
        for s in samples.iter_mut() {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            *s += Complex64::new(sd * a, sd * b);
        }
    }
}

/// Adds AWGN at `snr_db` relative to the measured signal power.
/// `snr_db = +inf` returns the input unchanged.
pub fn add_awgn(signal: &IqSignal, snr_db: f64, seed: u64) -> Result<IqSignal> {
    if signal.is_empty() {
        return Err(Error::param("cannot add noise to an empty signal"));
    }
    if snr_db.is_nan() {
        return Err(Error::param("SNR is NaN"));
    }
    let mut out = signal.clone();
    if snr_db == f64::INFINITY {
        return Ok(out);
    }
    let noise_power = signal.mean_power() / 10f64.powf(snr_db / 10.0);
    add_noise_power(&mut out.samples, signal.is_real(), noise_power, seed);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: Vec<SignalSpec>,
    pub target: Option<SignalSpec>,
    /// SNR a unit-power signal would see against the scene noise;
    /// `inf` disables noise.
    #[serde(with = "db_value")]
    pub noise_floor_snr_db: f64,
    pub noise_seed: u64,
}

impl SceneSpec {
    pub fn empty(noise_floor_snr_db: f64, noise_seed: u64) -> Self {
        Self {
            background: Vec::new(),
            target: None,
            noise_floor_snr_db,
            noise_seed,
        }
    }

    pub fn signals(&self) -> impl Iterator<Item = &SignalSpec> {
        self.background.iter().chain(self.target.iter())
    }

    pub fn signal_count(&self) -> usize {
        self.background.len() + usize::from(self.target.is_some())
    }

    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        if self.background.len() > 2 {
            return Err(Error::param("at most two background signals"));
        }
        if let Some(t) = &self.target {
            if t.scheme != ModulationScheme::Bpsk {
                return Err(Error::param("target signal must be BPSK"));
            }
        }
        if self.background.iter().any(|s| s.scheme == ModulationScheme::Bpsk) {
            return Err(Error::param("background signals must not be BPSK"));
        }
        for s in self.signals() {
            s.validate(sample_rate_hz)?;
        }
        Ok(())
    }

    /// Noise variance implied by the floor.
    pub fn noise_power(&self) -> f64 {
        if self.noise_floor_snr_db.is_finite() {
            10f64.powf(-self.noise_floor_snr_db / 10.0)
        } else {
            0.0
        }
    }

    /// Power of one component: `snr_db` above the noise floor, or unit power
    /// when either level is infinite.
    fn component_power(&self, spec: &SignalSpec) -> f64 {
        if spec.snr_db.is_finite() && self.noise_floor_snr_db.is_finite() {
            10f64.powf((spec.snr_db - self.noise_floor_snr_db) / 10.0)
        } else {
            1.0
        }
    }
}

/// Sums all component waveforms and the scene noise. Returns the window
/// and the label (target present).
pub fn compose_scene(scene: &SceneSpec, sample_rate_hz: f64, n: usize) -> Result<(IqSignal, bool)> {
    if n == 0 {
        return Err(Error::param("window length must be positive"));
    }
    scene.validate(sample_rate_hz)?;
    let mut samples = vec![Complex64::new(0.0, 0.0); n];
    for spec in scene.signals() {
        let gain = scene.component_power(spec).sqrt();
        let wave = modulate(spec, sample_rate_hz, n)?;
        for (acc, s) in samples.iter_mut().zip(&wave.samples) {
            *acc += s * gain;
        }
    }
    add_noise_power(&mut samples, true, scene.noise_power(), scene.noise_seed);
    Ok((IqSignal::new(samples, sample_rate_hz), scene.target.is_some()))
}

/// Experiment family a dataset is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scenario {
    /// Exactly one signal per window: the BPSK target or one background scheme.
    I,
    /// Zero to two background signals plus an optional BPSK target.
    II,
    /// Binary task between two single schemes at one fixed carrier.
    Pair {
        positive: ModulationScheme,
        negative: ModulationScheme,
        carrier_hz: f64,
    },
    /// BPSK at a random carrier versus an empty (noise-only) window.
    Presence,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Scenario::I),
            "II" | "2" => Ok(Scenario::II),
            "PAIR" => Ok(Scenario::Pair {
                positive: ModulationScheme::Bpsk,
                negative: ModulationScheme::Fsk4,
                carrier_hz: 300e6,
            }),
            "PRESENCE" => Ok(Scenario::Presence),
            _ => Err(Error::param(format!("unknown scenario {s:?}"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::I => f.write_str("I"),
            Scenario::II => f.write_str("II"),
            Scenario::Pair {
                positive,
                negative,
                carrier_hz,
            } => write!(f, "pair({positive}/{negative}@{}MHz)", carrier_hz / 1e6),
            Scenario::Presence => f.write_str("presence"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sample_rate_hz: f64,
    pub window_n: usize,
    pub symbol_rate_hz: f64,
    #[serde(with = "db_value")]
    pub snr_db: f64,
    pub carriers_hz: Vec<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            window_n: DEFAULT_WINDOW_N,
            symbol_rate_hz: DEFAULT_SYMBOL_RATE_HZ,
            snr_db: DEFAULT_SNR_DB,
            carriers_hz: CARRIERS_HZ.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub scene: SceneSpec,
    pub label: bool,
    pub seed: u64,
}

impl DatasetRecord {
    /// Regenerates the received window.
    pub fn signal(&self, synth: &SynthConfig) -> Result<IqSignal> {
        compose_scene(&self.scene, synth.sample_rate_hz, synth.window_n).map(|(s, _)| s)
    }

    /// Carriers of every signal in the scene, deduplicated and sorted.
    pub fn carriers_hz(&self) -> Vec<f64> {
        let mut c: Vec<f64> = self.scene.signals().map(|s| s.carrier_hz).collect();
        c.sort_by(f64::total_cmp);
        c.dedup();
        c
    }
}

pub const DATASET_FORMAT: &str = "scfattn-dataset";
pub const DATASET_VERSION: u32 = 1;

/// A generated dataset; also the on-disk manifest (scene specs and seeds,
/// never raw samples).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub format: String,
    pub version: u32,
    pub scenario: Scenario,
    pub master_seed: u64,
    pub synth: SynthConfig,
    pub train: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(text)?;
        if ds.format != DATASET_FORMAT {
            return Err(Error::format("dataset manifest", format!("format tag {:?}", ds.format)));
        }
        if ds.version != DATASET_VERSION {
            return Err(Error::format("dataset manifest", format!("unsupported version {}", ds.version)));
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Record by global id: train records first, then test.
    pub fn record(&self, id: usize) -> Option<&DatasetRecord> {
        if id < self.train.len() {
            self.train.get(id)
        } else {
            self.test.get(id - self.train.len())
        }
    }
}

fn pick<T: Copy>(rng: &mut impl rand::Rng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

fn make_record(
    scenario: Scenario,
    synth: &SynthConfig,
    index: usize,
    seed: u64,
) -> Result<DatasetRecord> {
    let label = index % 2 == 0;
    let mut rng = rng_from(derive_seed(seed, &[0x5343]));
    let signal = |k: u64, scheme: ModulationScheme, carrier_hz: f64| SignalSpec {
        scheme,
        carrier_hz,
        symbol_rate_hz: synth.symbol_rate_hz,
        snr_db: synth.snr_db,
        seed: derive_seed(seed, &[k]),
    };
    let mut scene = SceneSpec::empty(synth.snr_db, derive_seed(seed, &[0x4e4f]));
    match scenario {
        Scenario::I => {
            let carrier = pick(&mut rng, &synth.carriers_hz);
            if label {
                scene.target = Some(signal(0, ModulationScheme::Bpsk, carrier));
            } else {
                let scheme = pick(&mut rng, &ModulationScheme::BACKGROUND);
                scene.background.push(signal(1, scheme, carrier));
            }
        }
        Scenario::II => {
            let n_bg = rng.random_range(0..3usize);
            for k in 0..n_bg {
                let scheme = pick(&mut rng, &ModulationScheme::BACKGROUND);
                let carrier = pick(&mut rng, &synth.carriers_hz);
                scene.background.push(signal(1 + k as u64, scheme, carrier));
            }
            if label {
                let carrier = pick(&mut rng, &synth.carriers_hz);
                scene.target = Some(signal(0, ModulationScheme::Bpsk, carrier));
            }
        }
        Scenario::Pair {
            positive,
            negative,
            carrier_hz,
        } => {
            let scheme = if label { positive } else { negative };
            let spec = signal(0, scheme, carrier_hz);
            if scheme == ModulationScheme::Bpsk {
                scene.target = Some(spec);
            } else {
                scene.background.push(spec);
            }
        }
        Scenario::Presence => {
            if label {
                let carrier = pick(&mut rng, &synth.carriers_hz);
                scene.target = Some(signal(0, ModulationScheme::Bpsk, carrier));
            }
        }
    }
    scene.validate(synth.sample_rate_hz)?;
    Ok(DatasetRecord { scene, label, seed })
}

/// Generates disjoint train/test record lists, class-balanced (even indices
/// carry the target). Train and test seeds come from separate streams.
pub fn generate_dataset_with(
    scenario: Scenario,
    synth: &SynthConfig,
    n_train: usize,
    n_test: usize,
    master_seed: u64,
) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::param("train and test counts must be positive"));
    }
    if synth.carriers_hz.is_empty() {
        return Err(Error::param("carrier list is empty"));
    }
    if let Scenario::Pair { positive, negative, .. } = scenario {
        if positive == negative {
            return Err(Error::param("pair task needs two different schemes"));
        }
        if negative == ModulationScheme::Bpsk {
            return Err(Error::param("pair task negative class must not be BPSK"));
        }
    }
    let split = |stream: u64, count: usize| -> Result<Vec<DatasetRecord>> {
        (0..count)
            .map(|i| make_record(scenario, synth, i, derive_seed(master_seed, &[stream, i as u64])))
            .collect()
    };
    Ok(Dataset {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        scenario,
        master_seed,
        synth: synth.clone(),
        train: split(0, n_train)?,
        test: split(1, n_test)?,
    })
}

pub fn generate_dataset(
    scenario: Scenario,
    n_train: usize,
    n_test: usize,
    master_seed: u64,
) -> Result<Dataset> {
    generate_dataset_with(scenario, &SynthConfig::default(), n_train, n_test, master_seed)
}

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    format: String,
    sample_rate_hz: f64,
    n: usize,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Writes little-endian interleaved f32 I/Q to `path` and a JSON header to
/// `path` + ".json".
pub fn write_raw_iq(signal: &IqSignal, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in &signal.samples {
        w.write_all(&(s.re as f32).to_le_bytes())?;
        w.write_all(&(s.im as f32).to_le_bytes())?;
    }
    w.flush()?;
    let header = RawHeader {
        format: "cf32le".into(),
        sample_rate_hz: signal.sample_rate_hz,
        n: signal.len(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn read_raw_iq(path: &Path) -> Result<IqSignal> {
    let header: RawHeader = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if header.format != "cf32le" {
        return Err(Error::format("raw I/Q header", format!("format {:?}", header.format)));
    }
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() != header.n * 8 {
        return Err(Error::format(
            "raw I/Q data",
            format!("expected {} bytes, found {}", header.n * 8, bytes.len()),
        ));
    }
    let samples = bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    Ok(IqSignal::new(samples, header.sample_rate_hz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rustfft::FftPlanner;

    fn spec(scheme: ModulationScheme, carrier: f64) -> SignalSpec {
        SignalSpec::new(scheme, carrier, 42)
    }

    #[test]
    fn forced_plus_one_bpsk_is_a_pure_tone() {
        let s = spec(ModulationScheme::Bpsk, 300e6);
        let x = analytic_from_symbols(&s, 1e9, 4096, &[0]).unwrap();
        let w = 2.0 * PI * 300e6 / 1e9;
        let rot = x.samples[0];
        for (i, v) in x.samples.iter().enumerate() {
            assert!((v.norm() - 1.0).abs() < 1e-12, "envelope not constant at {i}");
            let expected = rot * Complex64::from_polar(1.0, w * i as f64);
            assert!((v - expected).norm() < 1e-9);
        }
        let real = to_real(&x);
        for (i, v) in real.samples.iter().enumerate() {
            let expected = SQRT_2 * (rot * Complex64::from_polar(1.0, w * i as f64)).re;
            assert!((v.re - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn every_scheme_has_unit_power_at_1ghz() {
        for scheme in ModulationScheme::ALL {
            for carrier in CARRIERS_HZ {
                let x = modulate(&spec(scheme, carrier), 1e9, 25_600).unwrap();
                assert_eq!(x.len(), 25_600);
                assert!((x.duration_s() - 25.6e-6).abs() < 1e-15);
                let p = x.mean_power();
                assert!((p - 1.0).abs() < 0.01, "{scheme} at {carrier}: power {p}");
                let a = modulate_analytic(&spec(scheme, carrier), 1e9, 25_600).unwrap();
                assert!((a.mean_power() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fsk2_instantaneous_frequency_takes_two_values() {
        let s = spec(ModulationScheme::Fsk2, 200e6);
        let x = modulate_analytic(&s, 1e9, 25_600).unwrap();
        let wc = 2.0 * PI * 200e6 / 1e9;
        let mut offsets: Vec<f64> = x
            .samples
            .windows(2)
            .map(|p| (p[1] * p[0].conj()).arg() - wc)
            .map(|d| (d / (2.0 * PI * s.symbol_rate_hz / 1e9) * 1e6).round() / 1e6)
            .collect();
        offsets.sort_by(f64::total_cmp);
        offsets.dedup();
        assert_eq!(offsets, vec![-0.5, 0.5]);
    }

    #[test]
    fn modulate_is_deterministic_in_seed() {
        let s = spec(ModulationScheme::Qpsk, 100e6);
        let a = modulate(&s, 1e9, 1000).unwrap();
        let b = modulate(&s, 1e9, 1000).unwrap();
        assert_eq!(a, b);
        let c = modulate(&SignalSpec { seed: 43, ..s }, 1e9, 1000).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn carrier_above_nyquist_is_rejected() {
        let s = spec(ModulationScheme::Bpsk, 600e6);
        assert!(matches!(modulate(&s, 1e9, 100), Err(Error::Param(_))));
        let slow = SignalSpec {
            symbol_rate_hz: 200e6,
            ..spec(ModulationScheme::Bpsk, 100e6)
        };
        assert!(modulate(&slow, 1e9, 100).is_err());
        assert!(modulate(&spec(ModulationScheme::Bpsk, 100e6), 1e9, 0).is_err());
    }

    #[test]
    fn awgn_infinite_snr_is_identity() {
        let x = modulate(&spec(ModulationScheme::Bpsk, 100e6), 1e9, 512).unwrap();
        assert_eq!(add_awgn(&x, f64::INFINITY, 1).unwrap(), x);
        assert!(add_awgn(&IqSignal::zeros(0, 1e9), 5.0, 1).is_err());
    }

    #[test]
    fn awgn_hits_requested_snr() {
        for (scheme, analytic) in [(ModulationScheme::Bpsk, false), (ModulationScheme::Qpsk, true)] {
            let s = spec(scheme, 300e6);
            let x = if analytic {
                modulate_analytic(&s, 1e9, 25_600).unwrap()
            } else {
                modulate(&s, 1e9, 25_600).unwrap()
            };
            let y = add_awgn(&x, 5.0, 9).unwrap();
            let noise_power = y
                .samples
                .iter()
                .zip(&x.samples)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                / x.len() as f64;
            let snr = 10.0 * (x.mean_power() / noise_power).log10();
            assert!((snr - 5.0).abs() < 0.1, "measured {snr} dB");
            assert_eq!(y.is_real(), !analytic);
        }
    }

    #[test]
    fn empty_scene_is_pure_noise() {
        let scene = SceneSpec::empty(5.0, 3);
        let (x, label) = compose_scene(&scene, DEFAULT_SAMPLE_RATE_HZ, 25_600).unwrap();
        assert!(!label);
        let expected = 10f64.powf(-0.5);
        assert!((x.mean_power() - expected).abs() / expected < 0.03);
        assert!(x.is_real());
    }

    #[test]
    fn bpsk_scene_peaks_at_carrier() {
        let fs = DEFAULT_SAMPLE_RATE_HZ;
        let n = 25_600;
        let mut scene = SceneSpec::empty(5.0, 11);
        scene.target = Some(SignalSpec::new(ModulationScheme::Bpsk, 300e6, 5));
        let (x, label) = compose_scene(&scene, fs, n).unwrap();
        assert!(label);
        let mut buf = x.samples.clone();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let (k, _) = buf[..n / 2]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm_sqr().total_cmp(&b.1.norm_sqr()))
            .unwrap();
        let peak_hz = k as f64 * fs / n as f64;
        // BPSK with rectangular pulses has a spectral null at the carrier
        // itself only in expectation; the periodogram argmax stays inside
        // the main lobe.
        assert!((peak_hz - 300e6).abs() <= DEFAULT_SYMBOL_RATE_HZ, "peak at {peak_hz}");
    }

    #[test]
    fn scene_rejects_bad_composition() {
        let mut scene = SceneSpec::empty(5.0, 1);
        scene.target = Some(SignalSpec::new(ModulationScheme::Qpsk, 100e6, 1));
        assert!(compose_scene(&scene, 1e9, 10).is_err());
        let mut scene = SceneSpec::empty(5.0, 1);
        scene.background = vec![SignalSpec::new(ModulationScheme::Qpsk, 100e6, 1); 3];
        assert!(compose_scene(&scene, 1e9, 10).is_err());
    }

    #[test]
    fn scenario_i_shape_and_balance() {
        let ds = generate_dataset(Scenario::I, 800, 200, 7).unwrap();
        assert_eq!(ds.train.len() + ds.test.len(), 1000);
        for r in ds.train.iter().chain(&ds.test) {
            assert_eq!(r.scene.signal_count(), 1);
            assert_eq!(r.label, r.scene.target.is_some());
            for s in r.scene.signals() {
                assert!(CARRIERS_HZ.contains(&s.carrier_hz));
            }
        }
        let positives = ds.train.iter().filter(|r| r.label).count();
        assert_eq!(positives, 400);
        let train_seeds: std::collections::HashSet<u64> = ds.train.iter().map(|r| r.seed).collect();
        assert!(ds.test.iter().all(|r| !train_seeds.contains(&r.seed)));
    }

    #[test]
    fn scenario_ii_background_histogram() {
        let ds = generate_dataset(Scenario::II, 800, 200, 3).unwrap();
        let mut hist = [0usize; 3];
        for r in ds.train.iter().chain(&ds.test) {
            hist[r.scene.background.len()] += 1;
            assert!(r.scene.signal_count() <= 3);
            assert!(r
                .scene
                .background
                .iter()
                .all(|s| ModulationScheme::BACKGROUND.contains(&s.scheme)));
            assert_eq!(r.label, r.scene.target.is_some());
        }
        for count in hist {
            assert!((250..=420).contains(&count), "histogram {hist:?}");
        }
    }

    #[test]
    fn dataset_is_reproducible_and_roundtrips() {
        let a = generate_dataset(Scenario::II, 2, 2, 99).unwrap();
        let b = generate_dataset(Scenario::II, 2, 2, 99).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let back = Dataset::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        assert!(generate_dataset(Scenario::I, 0, 2, 1).is_err());
    }

    #[test]
    fn infinite_snr_survives_manifest() {
        let synth = SynthConfig {
            snr_db: f64::INFINITY,
            ..SynthConfig::default()
        };
        let ds = generate_dataset_with(Scenario::Presence, &synth, 2, 2, 1).unwrap();
        let text = ds.to_json().unwrap();
        assert!(text.contains("\"inf\""));
        assert_eq!(Dataset::from_json(&text).unwrap(), ds);
    }

    #[test]
    fn raw_iq_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.iq");
        let x = modulate_analytic(&spec(ModulationScheme::Qpsk, 100e6), 1e9, 100).unwrap();
        write_raw_iq(&x, &path).unwrap();
        let y = read_raw_iq(&path).unwrap();
        assert_eq!(y.len(), 100);
        assert_eq!(y.sample_rate_hz, 1e9);
        for (a, b) in x.samples.iter().zip(&y.samples) {
            assert!((a - b).norm() < 1e-6);
        }
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 800);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn modulated_power_is_unit(
            scheme in prop::sample::select(ModulationScheme::ALL.to_vec()),
            carrier in 50e6f64..500e6,
            seed in any::<u64>(),
        ) {
            let x = modulate(&SignalSpec::new(scheme, carrier, seed), DEFAULT_SAMPLE_RATE_HZ, 25_600).unwrap();
            prop_assert!((x.mean_power() - 1.0).abs() < 0.01);
            prop_assert_eq!(x, modulate(&SignalSpec::new(scheme, carrier, seed), DEFAULT_SAMPLE_RATE_HZ, 25_600).unwrap());
        }

        #[test]
        fn records_match_their_scenario(
            scenario in prop::sample::select(vec![Scenario::I, Scenario::II, Scenario::Presence]),
            seed in any::<u64>(),
        ) {
            let ds = generate_dataset(scenario, 12, 6, seed).unwrap();
            for r in ds.train.iter().chain(&ds.test) {
                prop_assert_eq!(r.label, r.scene.target.is_some());
                if let Some(t) = &r.scene.target {
                    prop_assert_eq!(t.scheme, ModulationScheme::Bpsk);
                }
                prop_assert!(r.scene.background.iter().all(|s| s.scheme != ModulationScheme::Bpsk));
                match scenario {
                    Scenario::I => prop_assert_eq!(r.scene.signal_count(), 1),
                    Scenario::II => prop_assert!(r.scene.signal_count() <= 3),
                    _ => prop_assert!(r.scene.background.is_empty()),
                }
            }
        }
    }
}
