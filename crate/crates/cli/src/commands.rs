use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use scfattn::attnnet::ModelParams;
use scfattn::bench::{self, BaselineConfig, BenchConfig, EvalMode};
use scfattn::cyclo::{describe, scf_full, scf_full_fast, ScfConfig};
use scfattn::detector::{self, DetectMode, DetectionReport};
use scfattn::par::ExecMode;
use scfattn::reinforce::{self, TrainConfig, EVAL_SEED};
use scfattn::sigsynth::{
    add_awgn, generate_dataset_with, modulate, write_raw_iq, Dataset, IqSignal, ModulationScheme, Scenario, SignalSpec,
    SynthConfig,
};
use serde::Serialize;

use crate::{Cli, Command};

/// Bad arguments discovered after parsing; exits with the usage code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    s.parse().map_err(|e: scfattn::Error| e.to_string())
}

fn parse_scheme(s: &str) -> std::result::Result<ModulationScheme, String> {
    s.parse().map_err(|e: scfattn::Error| e.to_string())
}

/// Accepts `inf` and `-inf` as well as finite values.
fn parse_db(s: &str) -> std::result::Result<f64, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        v => v.parse().map_err(|e| format!("{e}")),
    }
}

#[derive(Debug, Args)]
pub struct SynthOpts {
    /// SNR of every signal in dB (`inf` for noise-free).
    #[arg(long, value_parser = parse_db)]
    pub snr_db: Option<f64>,
    /// Samples per window.
    #[arg(long)]
    pub window_n: Option<usize>,
    #[arg(long)]
    pub sample_rate_hz: Option<f64>,
    #[arg(long)]
    pub symbol_rate_hz: Option<f64>,
    /// Comma-separated carrier list in MHz.
    #[arg(long, value_delimiter = ',')]
    pub carriers_mhz: Option<Vec<f64>>,
}

impl SynthOpts {
    fn resolve(&self) -> SynthConfig {
        let mut c = SynthConfig::default();
        if let Some(v) = self.snr_db {
            c.snr_db = v;
        }
        if let Some(v) = self.window_n {
            c.window_n = v;
        }
        if let Some(v) = self.sample_rate_hz {
            c.sample_rate_hz = v;
        }
        if let Some(v) = self.symbol_rate_hz {
            c.symbol_rate_hz = v;
        }
        if let Some(v) = &self.carriers_mhz {
            c.carriers_hz = v.iter().map(|m| m * 1e6).collect();
        }
        c
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// I, II, pair (BPSK vs 4FSK at 300 MHz) or presence.
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: Scenario,
    #[arg(long = "train", value_parser = clap::value_parser!(u64).range(1..))]
    pub n_train: u64,
    #[arg(long = "test", value_parser = clap::value_parser!(u64).range(1..))]
    pub n_test: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub synth: SynthOpts,
    /// Also write the raw samples of these record ids.
    #[arg(long, value_delimiter = ',')]
    pub raw: Vec<usize>,
    #[arg(long, default_value = "dataset.json")]
    pub name: String,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Fast,
    Direct,
}

#[derive(Debug, Args)]
pub struct ScfArgs {
    /// Manifest holding the record to render.
    #[arg(long, requires = "record", conflicts_with_all = ["scheme", "zero"])]
    pub manifest: Option<PathBuf>,
    /// Record id: train records first, then test.
    #[arg(long)]
    pub record: Option<usize>,
    /// Render a single synthesized signal instead.
    #[arg(long, value_parser = parse_scheme, conflicts_with = "zero")]
    pub scheme: Option<ModulationScheme>,
    #[arg(long, default_value_t = 300.0)]
    pub carrier_mhz: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Render an all-zero window.
    #[arg(long)]
    pub zero: bool,
    #[command(flatten)]
    pub synth: SynthOpts,
    #[arg(long, value_enum, default_value = "fast")]
    pub route: Route,
    #[arg(long)]
    pub max_lag: Option<usize>,
    /// Output file stem.
    #[arg(long, default_value = "scf")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct TrainOpts {
    /// TOML file with training keys; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting hyperparameters when no config file is given.
    #[arg(long, value_enum, default_value_t = Preset::Default, conflicts_with = "config")]
    pub preset: Preset,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub loc_sigma: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

impl TrainOpts {
    fn resolve(&self, seed: Option<u64>, scenario: Scenario) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => match self.preset {
                Preset::Default => TrainConfig::default(),
                Preset::Desk => bench::desk_config(scenario),
            },
        };
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.mc_samples {
            c.mc_samples_m = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.loc_sigma {
            c.loc_sigma = v;
        }
        if let Some(v) = self.steps {
            c.steps_t = v;
        }
        if let Some(s) = seed {
            c.seed = s;
        }
        c.validate().map_err(|e| usage(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Long runs: σ 0.15, M 10, lr 1e-3, 200 epochs.
    Default,
    /// Minutes per run on one core: σ 0.08, M 4, 100 epochs, lr annealed
    /// from 5e-3 to 5e-4; Scenario II uses σ 0.15 and 300 epochs.
    Desk,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub train: TrainOpts,
    #[arg(long)]
    pub max_lag: Option<usize>,
    /// Checkpoint file name.
    #[arg(long, default_value = "model.ckpt")]
    pub name: String,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Greedy,
    Stochastic,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training config; defaults to train.toml beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    #[arg(long, value_enum, default_value = "greedy")]
    pub mode: ModeArg,
    /// Seed of the first-location draws (and of sampled locations).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluate patches on demand by the direct route instead of slicing
    /// precomputed grids.
    #[arg(long)]
    pub direct: bool,
    #[arg(long)]
    pub max_lag: Option<usize>,
    #[arg(long, default_value = "eval")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: Scenario,
    /// One run per seed; headline numbers are medians.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub seeds: Vec<u64>,
    #[arg(long = "train", default_value_t = 800, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_train: u64,
    #[arg(long = "test", default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_test: u64,
    #[command(flatten)]
    pub synth: SynthOpts,
    #[command(flatten)]
    pub train: TrainOpts,
    /// Also train the full-SCF baseline (always on for scenario II).
    #[arg(long)]
    pub baseline: bool,
    #[arg(long)]
    pub baseline_epochs: Option<usize>,
    #[arg(long)]
    pub baseline_lr: Option<f64>,
    #[arg(long, value_enum, default_value = "greedy")]
    pub eval_mode: ModeArg,
    #[arg(long)]
    pub max_lag: Option<usize>,
    #[arg(long, default_value = "bench")]
    pub name: String,
}

pub fn run(cli: &Cli) -> Result<()> {
    let out = &cli.global.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::Synth(a) => synth(out, a),
        Command::Scf(a) => scf(out, a),
        Command::Train(a) => train(out, a),
        Command::Eval(a) => eval(out, a),
        Command::Bench(a) => bench(out, a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn scf_config(window_n: usize, max_lag: Option<usize>) -> ScfConfig {
    let mut c = ScfConfig {
        window_n,
        ..ScfConfig::default()
    };
    if let Some(l) = max_lag {
        c.max_lag = l;
    }
    c
}

fn load_manifest(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("reading manifest {}", path.display()))
}

fn synth(out: &Path, a: &SynthArgs) -> Result<()> {
    let cfg = a.synth.resolve();
    let ds = generate_dataset_with(a.scenario, &cfg, a.n_train as usize, a.n_test as usize, a.seed)
        .map_err(|e| usage(e.to_string()))?;
    let path = out.join(&a.name);
    ds.save(&path)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        command: &'static str,
        scenario: String,
        n_train: u64,
        n_test: u64,
        seed: u64,
        synth: &'a SynthConfig,
    }
    write_json(
        &out.join("synth.config.json"),
        &Resolved {
            command: "synth",
            scenario: a.scenario.to_string(),
            n_train: a.n_train,
            n_test: a.n_test,
            seed: a.seed,
            synth: &cfg,
        },
    )?;
    for &id in &a.raw {
        let rec = ds.record(id).ok_or_else(|| usage(format!("no record {id}")))?;
        write_raw_iq(&rec.signal(&ds.synth)?, &out.join(format!("record_{id}.cf32")))?;
    }
    println!(
        "wrote {} ({} train + {} test records)",
        path.display(),
        ds.train.len(),
        ds.test.len()
    );
    Ok(())
}

fn scf(out: &Path, a: &ScfArgs) -> Result<()> {
    let (signal, synth_cfg, source): (IqSignal, SynthConfig, String) = if let Some(m) = &a.manifest {
        let ds = load_manifest(m)?;
        let id = a.record.expect("clap enforces --record");
        let rec = ds.record(id).with_context(|| format!("manifest has no record {id}"))?;
        (rec.signal(&ds.synth)?, ds.synth.clone(), format!("{}#{id}", m.display()))
    } else {
        let cfg = a.synth.resolve();
        if a.zero {
            (IqSignal::zeros(cfg.window_n, cfg.sample_rate_hz), cfg, "zero".into())
        } else if let Some(scheme) = a.scheme {
            let spec = SignalSpec {
                scheme,
                carrier_hz: a.carrier_mhz * 1e6,
                symbol_rate_hz: cfg.symbol_rate_hz,
                snr_db: cfg.snr_db,
                seed: a.seed,
            };
            let clean = modulate(&spec, cfg.sample_rate_hz, cfg.window_n).map_err(|e| usage(e.to_string()))?;
            let noisy = add_awgn(&clean, cfg.snr_db, a.seed ^ 0x6e6f_6973_65)?;
            (noisy, cfg, format!("{scheme}@{}MHz", a.carrier_mhz))
        } else {
            bail!(usage("give --manifest with --record, --scheme, or --zero"));
        }
    };
    let sc = scf_config(synth_cfg.window_n, a.max_lag);
    let grid = match a.route {
        Route::Fast => scf_full_fast(&signal, &sc)?,
        Route::Direct => scf_full(&signal, &sc)?,
    };
    write(&out.join(format!("{}.csv", a.name)), grid.to_csv())?;
    write(&out.join(format!("{}.pgm", a.name)), grid.to_pgm())?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        command: &'static str,
        source: String,
        route: Route,
        synth: &'a SynthConfig,
        scf: &'a ScfConfig,
    }
    write_json(
        &out.join(format!("{}.config.json", a.name)),
        &Resolved {
            command: "scf",
            source,
            route: a.route,
            synth: &synth_cfg,
            scf: &sc,
        },
    )?;
    print!("{}", describe(&grid));
    Ok(())
}

fn train(out: &Path, a: &TrainArgs) -> Result<()> {
    let ds = load_manifest(&a.manifest)?;
    let cfg = a.train.resolve(a.seed, ds.scenario)?;
    let sc = scf_config(ds.synth.window_n, a.max_lag);
    write(&out.join("train.toml"), cfg.to_toml())?;
    write_json(&out.join("train.scf.json"), &sc)?;
    let exec = ExecMode::Parallel;
    let train_set = reinforce::prepare(&ds.train, &ds.synth, &sc, exec)?;
    let test_set = reinforce::prepare(&ds.test, &ds.synth, &sc, exec)?;
    let init = scfattn::attnnet::init_params_with(cfg.dims, cfg.seed);
    let ckpt = out.join(&a.name);
    let result = reinforce::train_from(init, &train_set, Some(&test_set), &cfg, exec, |s| {
        eprintln!(
            "epoch {:4}  reward {:.4}  train {:.4}  test {:.4}  loss {:.5}",
            s.epoch,
            s.mean_reward,
            s.train_acc,
            s.test_acc.unwrap_or(f64::NAN),
            s.loss
        );
    });
    match result {
        Ok(outcome) => {
            outcome.params.save(&ckpt)?;
            write(&out.join("curve.csv"), reinforce::curve_csv(&outcome.curve))?;
            println!("wrote {}", ckpt.display());
            Ok(())
        }
        Err(scfattn::Error::Diverged { epoch, reason, last_good }) => {
            last_good.save(&ckpt)?;
            bail!("training diverged at epoch {epoch}: {reason}; last good checkpoint kept at {}", ckpt.display())
        }
        Err(e) => Err(e.into()),
    }
}

fn eval(out: &Path, a: &EvalArgs) -> Result<()> {
    let ds = load_manifest(&a.manifest)?;
    let params = ModelParams::load(&a.checkpoint).with_context(|| format!("reading checkpoint {}", a.checkpoint.display()))?;
    let config_path = a
        .config
        .clone()
        .or_else(|| {
            let p = a.checkpoint.with_file_name("train.toml");
            p.exists().then_some(p)
        });
    let cfg = match &config_path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if cfg.dims != params.dims {
        bail!("checkpoint dimensions {:?} do not match config dimensions {:?}", params.dims, cfg.dims);
    }
    params.check_dims()?;
    let sc = scf_config(ds.synth.window_n, a.max_lag);
    let records = match a.split {
        Split::Train => &ds.train,
        Split::Test => &ds.test,
    };
    let seed = a.seed.unwrap_or(EVAL_SEED);
    let mode = match a.mode {
        ModeArg::Greedy => DetectMode::Greedy(seed),
        ModeArg::Stochastic => DetectMode::Stochastic(seed),
    };
    let exec = ExecMode::Parallel;
    let reports: Vec<DetectionReport> = if a.direct {
        let indexed: Vec<(usize, &scfattn::sigsynth::DatasetRecord)> = records.iter().enumerate().collect();
        scfattn::par::map(exec, &indexed, |&(i, r)| -> scfattn::Result<DetectionReport> {
            let signal = r.signal(&ds.synth)?;
            detector::detect(&params, &signal, &sc, &cfg, detector::episode_mode(mode, i))
        })
        .into_iter()
        .collect::<scfattn::Result<_>>()?
    } else {
        let prepared = reinforce::prepare(records, &ds.synth, &sc, exec)?;
        detector::detect_all(&params, &prepared.samples(), &cfg, mode, exec)
    };
    let offset = match a.split {
        Split::Train => 0,
        Split::Test => ds.train.len(),
    };
    let rows: Vec<(usize, bool, &DetectionReport)> = reports
        .iter()
        .zip(records)
        .enumerate()
        .map(|(i, (r, rec))| (offset + i, rec.label, r))
        .collect();
    write(&out.join(format!("{}_reports.csv", a.name)), detector::reports_csv(&rows))?;
    let points: Vec<detector::AttentionPoint> = reports
        .iter()
        .enumerate()
        .flat_map(|(episode, r)| {
            r.attended_locations
                .iter()
                .zip(&r.attended_cells)
                .enumerate()
                .map(move |(step, (l, &cell))| detector::AttentionPoint {
                    episode,
                    step,
                    f: l[0],
                    alpha: l[1],
                    cell,
                })
        })
        .collect();
    write(&out.join(format!("{}_scatter.csv", a.name)), detector::scatter_csv(&points))?;

    let correct: Vec<bool> = rows.iter().map(|(_, y, r)| r.decision == *y).collect();
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
    let eval_ds = Dataset {
        test: records.clone(),
        ..ds.clone()
    };
    #[derive(Serialize)]
    struct Summary {
        split: Split,
        mode: ModeArg,
        seed: u64,
        direct: bool,
        records: usize,
        accuracy: f64,
        per_carrier_accuracy: std::collections::BTreeMap<u64, f64>,
        max_bins_per_decision: usize,
        mean_bins_fraction: f64,
        checkpoint: PathBuf,
        config: TrainConfig,
        scf: ScfConfig,
    }
    let summary = Summary {
        split: a.split,
        mode: a.mode,
        seed,
        direct: a.direct,
        records: records.len(),
        accuracy,
        per_carrier_accuracy: bench::per_carrier_accuracy(&eval_ds, &correct),
        max_bins_per_decision: reports.iter().map(|r| r.scf_bins_computed).max().unwrap_or(0),
        mean_bins_fraction: reports.iter().map(|r| r.bins_fraction()).sum::<f64>() / reports.len() as f64,
        checkpoint: a.checkpoint.clone(),
        config: cfg,
        scf: sc,
    };
    write_json(&out.join(format!("{}.json", a.name)), &summary)?;
    println!("accuracy {accuracy:.4} over {} records", records.len());
    Ok(())
}

fn bench(out: &Path, a: &BenchArgs) -> Result<()> {
    let synth = a.synth.resolve();
    let mut train = a.train.resolve(None, a.scenario)?;
    // Each run trains with its own seed.
    train.seed = 0;
    let baseline = (a.baseline || matches!(a.scenario, Scenario::II)).then(|| {
        let mut b = BaselineConfig::default();
        if let Some(e) = a.baseline_epochs {
            b.epochs = e;
        }
        if let Some(lr) = a.baseline_lr {
            b.lr = lr;
        }
        b
    });
    let config = BenchConfig {
        scenario: a.scenario,
        n_train: a.n_train as usize,
        n_test: a.n_test as usize,
        seeds: a.seeds.clone(),
        eval_mode: match a.eval_mode {
            ModeArg::Greedy => EvalMode::Greedy,
            ModeArg::Stochastic => EvalMode::Stochastic,
        },
        scf: scf_config(synth.window_n, a.max_lag),
        synth,
        train,
        baseline,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    write_json(&out.join(format!("{}.config.json", a.name)), &config)?;
    let report = bench::run_bench(&config, ExecMode::Parallel, |seed, s| {
        eprintln!(
            "seed {seed} epoch {:4}  reward {:.4}  train {:.4}  test {:.4}",
            s.epoch,
            s.mean_reward,
            s.train_acc,
            s.test_acc.unwrap_or(f64::NAN)
        );
    })?;
    write(&out.join(format!("{}_report.txt", a.name)), report.to_text())?;
    write_json(&out.join(format!("{}_report.json", a.name)), &report)?;
    write(&out.join(format!("{}_per_carrier.csv", a.name)), report.per_carrier_csv())?;
    write(&out.join(format!("{}_runs.csv", a.name)), report.runs_csv())?;
    print!("{}", report.to_text());
    Ok(())
}
