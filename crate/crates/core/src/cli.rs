//! Command-line front end: `synth | train | predict | evaluate | ablate`.
//!
//! Every path is relative to `--workdir`. Layout:
//!
//! ```text
//! <workdir>/data/manifest.json             synthetic corpus (synth)
//! <workdir>/runs/<run>/config.toml         config file echoed verbatim
//! <workdir>/runs/<run>/effective.toml      config after flag overrides
//! <workdir>/runs/<run>/split.json          labeled / unlabeled case ids
//! <workdir>/runs/<run>/train_log.jsonl     one record per iteration
//! <workdir>/runs/<run>/checkpoints/iter_NNNNNN.safetensors
//! <workdir>/predictions/<run>/<id>.nrrd    binary masks (+ <id>.json sidecar)
//! <workdir>/results/<run>/metrics.csv      one row per case
//! <workdir>/results/<run>/aggregate.json
//! <workdir>/ablate/<mode>.csv              one row per ablation setting
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datapipe::nrrd::{read_mask, write_mask};
use crate::datapipe::{
    preprocess, split_train, synth_generate, write_dataset, Case, Manifest, PatchSpec, PreprocessConfig,
    SplitTag, SynthConfig,
};
use crate::datapipe::case::preprocess_with_box;
use crate::error::{Error, Result};
use crate::inference::{binarize, sliding_window_predict, PredictionInfo, DEFAULT_STRIDE};
use crate::metrics::{evaluate_corpus, read_csv, write_aggregate, write_csv, Aggregate, DistanceUnit, EvalPair};
use crate::netcore::ArchConfig;
use crate::training::{train, RunDir, TrainConfig, TrainData};
use crate::volume::Mask;

/// Environment variable selecting the compute device.
pub const DEVICE_ENV: &str = "CCNET_DEVICE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    #[serde(flatten)]
    pub generator: SynthConfig,
    /// Leading cases tagged `train` in the manifest; the rest are `test`.
    pub train_count: usize,
    pub gzip: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            generator: SynthConfig {
                n_cases: 100,
                ..Default::default()
            },
            train_count: 80,
            gzip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub manifest: PathBuf,
    pub labeled_fraction: f64,
    /// Crop to the foreground box and normalise intensities.
    pub preprocess: bool,
    pub preprocessing: PreprocessConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.json"),
            labeled_fraction: 0.1,
            preprocess: true,
            preprocessing: PreprocessConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceSection {
    /// Window size; defaults to the training patch stored in the checkpoint.
    pub patch: Option<[usize; 3]>,
    pub stride: [usize; 3],
    pub threshold: f64,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            patch: None,
            stride: DEFAULT_STRIDE,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub unit: DistanceUnit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateSection {
    pub lambda_s_grid: Vec<f64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            lambda_s_grid: vec![0.1, 0.3, 0.5, 0.7, 1.0],
        }
    }
}

/// Complete run configuration; every section and key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub synth: SynthSection,
    pub data: DataSection,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub inference: InferenceSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "ccnet", version, about = "Complementary-consistency semi-supervised 3D segmentation")]
pub struct Cli {
    /// Root directory for all inputs and outputs.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArg {
    /// TOML configuration file (relative to the workdir).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub labeled_fraction: Option<f64>,
    #[arg(long)]
    pub lambda_s: Option<f64>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblateMode {
    /// Shared versus independent encoders.
    Encoder,
    /// Sweep of the supervised loss weight.
    LambdaS,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus and its manifest.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        n_cases: Option<usize>,
        #[arg(long, num_args = 3)]
        dims: Option<Vec<usize>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_count: Option<usize>,
        /// Output directory (relative to the workdir).
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train the three models on the manifest's train cases.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[arg(long, default_value = "ccnet")]
        run: String,
    },
    /// Sliding-window masks for the manifest's test cases with the main model.
    Predict {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "ccnet")]
        run: String,
        /// Explicit checkpoint; defaults to the run's latest.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score predicted masks against the manifest's test labels.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "ccnet")]
        run: String,
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train, predict and evaluate once per ablation setting.
    Ablate {
        #[arg(long, value_enum)]
        mode: AblateMode,
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
}

struct Loaded {
    config: Config,
    raw: Option<String>,
}

fn load_config(workdir: &Path, arg: &ConfigArg) -> Result<Loaded> {
    match &arg.config {
        None => Ok(Loaded {
            config: Config::default(),
            raw: None,
        }),
        Some(p) => {
            let path = workdir.join(p);
            if !path.exists() {
                return Err(Error::MissingInput(path));
            }
            let raw = fs::read_to_string(&path)?;
            Ok(Loaded {
                config: Config::from_toml(&raw)?,
                raw: Some(raw),
            })
        }
    }
}

fn apply_overrides(cfg: &mut Config, o: &TrainOverrides) {
    if let Some(v) = o.iterations {
        cfg.train.max_iteration = v;
    }
    if let Some(v) = o.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = o.labeled_fraction {
        cfg.data.labeled_fraction = v;
    }
    if let Some(v) = o.lambda_s {
        cfg.train.lambda_s = v;
    }
    if let Some(v) = &o.manifest {
        cfg.data.manifest = v.clone();
    }
}

fn check_device() -> Result<()> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok(()),
        Ok(d) if d.eq_ignore_ascii_case("cpu") => Ok(()),
        Ok(d) => Err(Error::Config(format!("{DEVICE_ENV}={d}: only the cpu device is available"))),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    check_device()?;
    let wd = &cli.workdir;
    match &cli.command {
        Command::Synth {
            config,
            n_cases,
            dims,
            seed,
            train_count,
            out,
        } => {
            let mut s = load_config(wd, config)?.config.synth;
            if let Some(n) = n_cases {
                s.generator.n_cases = *n;
            }
            if let Some(d) = dims {
                s.generator.dims = [d[0], d[1], d[2]];
            }
            if let Some(v) = seed {
                s.generator.seed = *v;
            }
            if let Some(v) = train_count {
                s.train_count = *v;
            }
            cmd_synth(&wd.join(out), &s).map(|_| ())
        }
        Command::Train {
            config,
            overrides,
            run,
        } => {
            let loaded = load_config(wd, config)?;
            let mut cfg = loaded.config.clone();
            apply_overrides(&mut cfg, overrides);
            cmd_train(wd, &cfg, loaded.raw.as_deref(), run).map(|_| ())
        }
        Command::Predict {
            config,
            run,
            checkpoint,
            manifest,
        } => {
            let mut cfg = load_config(wd, config)?.config;
            if let Some(m) = manifest {
                cfg.data.manifest = m.clone();
            }
            let ckpt = match checkpoint {
                Some(p) => wd.join(p),
                None => latest_checkpoint(wd, run)?,
            };
            cmd_predict(wd, &cfg, &ckpt, run).map(|_| ())
        }
        Command::Evaluate {
            config,
            run,
            pred_dir,
            manifest,
        } => {
            let mut cfg = load_config(wd, config)?.config;
            if let Some(m) = manifest {
                cfg.data.manifest = m.clone();
            }
            let pred = pred_dir.as_ref().map_or_else(|| predictions_dir(wd, run), |p| wd.join(p));
            cmd_evaluate(wd, &cfg, &pred, run).map(|_| ())
        }
        Command::Ablate {
            mode,
            config,
            overrides,
        } => {
            let loaded = load_config(wd, config)?;
            let mut cfg = loaded.config.clone();
            apply_overrides(&mut cfg, overrides);
            cmd_ablate(wd, &cfg, *mode).map(|_| ())
        }
    }
}

pub fn run_dir(wd: &Path, run: &str) -> RunDir {
    RunDir::new(wd.join("runs").join(run))
}

pub fn predictions_dir(wd: &Path, run: &str) -> PathBuf {
    wd.join("predictions").join(run)
}

pub fn results_dir(wd: &Path, run: &str) -> PathBuf {
    wd.join("results").join(run)
}

fn latest_checkpoint(wd: &Path, run: &str) -> Result<PathBuf> {
    let dir = run_dir(wd, run);
    dir.latest_checkpoint()?
        .ok_or_else(|| Error::MissingInput(dir.checkpoint_dir()))
}

/// Generates the corpus and writes it under `out`.
pub fn cmd_synth(out: &Path, s: &SynthSection) -> Result<Manifest> {
    let cases = synth_generate(&s.generator)?;
    let manifest = write_dataset(out, &cases, s.train_count.min(cases.len()), s.gzip)?;
    let fractions: Vec<f64> = cases
        .iter()
        .map(|c| {
            let l = c.label.as_ref().expect("synthetic cases are labeled");
            l.count() as f64 / l.len() as f64
        })
        .collect();
    let mean = fractions.iter().sum::<f64>() / fractions.len().max(1) as f64;
    println!(
        "synth: {} cases ({} train, {} test), dims {:?}, mean foreground fraction {:.4}, manifest {}",
        cases.len(),
        manifest.entries_with(SplitTag::Train).count(),
        manifest.entries_with(SplitTag::Test).count(),
        s.generator.dims,
        mean,
        out.join("manifest.json").display()
    );
    let check = Manifest::read(&out.join("manifest.json"))?;
    if check.entries.len() != cases.len() {
        return Err(Error::Data("manifest does not list every written case".into()));
    }
    Ok(manifest)
}

fn maybe_preprocess(case: &Case, data: &DataSection) -> Result<Case> {
    if data.preprocess {
        preprocess(case, &data.preprocessing)
    } else {
        Ok(case.clone())
    }
}

/// Summary of a finished training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub final_checkpoint: PathBuf,
    pub iterations: usize,
}

pub fn cmd_train(wd: &Path, cfg: &Config, raw: Option<&str>, run: &str) -> Result<TrainSummary> {
    cfg.train.validate()?;
    let manifest = Manifest::read(&wd.join(&cfg.data.manifest))?;
    let train_cases = manifest.load(SplitTag::Train)?;
    if train_cases.is_empty() {
        return Err(Error::Config("manifest lists no train case".into()));
    }
    let split = split_train(train_cases, Vec::new(), cfg.data.labeled_fraction, cfg.train.seed)?;
    let summary = split.summary();
    println!("train: |D_L|={}, |D_U|={}", summary.labeled.len(), summary.unlabeled.len());
    let labeled = split
        .labeled
        .iter()
        .map(|c| maybe_preprocess(c, &cfg.data))
        .collect::<Result<Vec<_>>>()?;
    let unlabeled = split
        .unlabeled
        .iter()
        .map(|c| maybe_preprocess(&c.unlabeled(), &cfg.data))
        .collect::<Result<Vec<_>>>()?;
    let data = TrainData::new(labeled, unlabeled, &cfg.train.patch)?;

    let dir = run_dir(wd, run);
    fs::create_dir_all(&dir.root)?;
    if let Some(raw) = raw {
        fs::write(dir.root.join("config.toml"), raw)?;
    }
    fs::write(dir.root.join("effective.toml"), cfg.to_toml()?)?;
    fs::write(dir.root.join("split.json"), serde_json::to_vec_pretty(&summary)?)?;

    let state = train(&cfg.train, &cfg.arch, data, Some(&dir))?;
    let last = state.history.last().expect("at least one step");
    println!(
        "train: {} iterations, final L_sup {:.4} L_unsup {:.4} L_total {:.4}",
        state.iteration, last.l_sup, last.l_unsup, last.l_total
    );
    let final_checkpoint = dir.checkpoint_path(state.iteration);
    let meta = checkpoint::read_meta(&final_checkpoint)?;
    if meta.iteration != state.iteration {
        return Err(Error::Checkpoint("final checkpoint does not match the run".into()));
    }
    Ok(TrainSummary {
        labeled: summary.labeled,
        unlabeled: summary.unlabeled,
        final_checkpoint,
        iterations: state.iteration,
    })
}

/// Predicts one case with the main model, returning a mask on the case's grid.
pub fn predict_case(
    net: &crate::netcore::CcNet<f32>,
    case: &Case,
    data: &DataSection,
    patch: &PatchSpec,
    stride: [usize; 3],
    threshold: f64,
) -> Result<Mask> {
    let blind = case.unlabeled();
    let (input, bb) = if data.preprocess {
        let (c, bb) = preprocess_with_box(&blind, &data.preprocessing)?;
        (c, Some(bb))
    } else {
        (blind, None)
    };
    let probs = sliding_window_predict(&net.main(), &input.volume, patch, stride)?;
    let mask = binarize(&probs, threshold);
    match bb {
        None => Ok(mask),
        Some(bb) => {
            let mut full = Mask::filled(case.volume.dims(), false);
            full.paste(bb.origin, &mask)?;
            Ok(full)
        }
    }
}

pub fn cmd_predict(wd: &Path, cfg: &Config, ckpt: &Path, run: &str) -> Result<Vec<PathBuf>> {
    let (net, meta) = checkpoint::load::<f32>(ckpt)?;
    let patch = PatchSpec::new(cfg.inference.patch.unwrap_or(meta.config.patch.size))?;
    let manifest = Manifest::read(&wd.join(&cfg.data.manifest))?;
    let out = predictions_dir(wd, run);
    fs::create_dir_all(&out)?;
    let mut written = Vec::new();
    for entry in manifest.entries_with(SplitTag::Test) {
        let case = manifest.load_entry(entry)?;
        let mask = predict_case(&net, &case, &cfg.data, &patch, cfg.inference.stride, cfg.inference.threshold)?;
        let path = out.join(format!("{}.nrrd", case.id));
        write_mask(&path, &mask, case.volume.spacing(), true)?;
        let info = PredictionInfo {
            case_id: case.id.clone(),
            checkpoint: ckpt.display().to_string(),
            threshold: cfg.inference.threshold,
            stride: cfg.inference.stride,
            patch: patch.size,
        };
        fs::write(out.join(format!("{}.json", case.id)), serde_json::to_vec_pretty(&info)?)?;
        let (back, _) = read_mask(&path)?;
        if back != mask {
            return Err(Error::Data(format!("prediction {} did not round-trip", path.display())));
        }
        written.push(path);
    }
    println!("predict: {} masks in {}", written.len(), out.display());
    Ok(written)
}

pub fn cmd_evaluate(wd: &Path, cfg: &Config, pred_dir: &Path, run: &str) -> Result<Aggregate> {
    let manifest = Manifest::read(&wd.join(&cfg.data.manifest))?;
    let mut pairs = Vec::new();
    for entry in manifest.entries_with(SplitTag::Test) {
        let case = manifest.load_entry(entry)?;
        let reference = case
            .label
            .clone()
            .ok_or_else(|| Error::Data(format!("test case {} has no reference label", case.id)))?;
        let path = pred_dir.join(format!("{}.nrrd", case.id));
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        let (prediction, _) = read_mask(&path)?;
        pairs.push(EvalPair {
            id: case.id.clone(),
            prediction,
            reference,
            spacing: case.volume.spacing(),
        });
    }
    let (results, agg) = evaluate_corpus(&pairs, cfg.eval.unit)?;
    let out = results_dir(wd, run);
    fs::create_dir_all(&out)?;
    let csv_path = out.join("metrics.csv");
    write_csv(&csv_path, &results)?;
    write_aggregate(&out.join("aggregate.json"), &agg)?;
    if read_csv(&csv_path)?.len() != results.len() {
        return Err(Error::Data("metrics CSV row count mismatch".into()));
    }
    println!(
        "evaluate: n={} dice {:.4} jaccard {:.4} hd95 {} asd {} (skipped {})",
        agg.n,
        agg.dice_mean,
        agg.jaccard_mean,
        fmt_opt(agg.hd95_mean),
        fmt_opt(agg.asd_mean),
        agg.skipped
    );
    Ok(agg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

/// Settings swept by an ablation mode.
pub fn ablation_settings(cfg: &Config, mode: AblateMode) -> Vec<(String, Config)> {
    match mode {
        AblateMode::Encoder => [("independent", false), ("shared", true)]
            .into_iter()
            .map(|(name, shared)| {
                let mut c = cfg.clone();
                c.arch.shared_encoder = shared;
                (name.to_string(), c)
            })
            .collect(),
        AblateMode::LambdaS => cfg
            .ablate
            .lambda_s_grid
            .iter()
            .map(|&l| {
                let mut c = cfg.clone();
                c.train.lambda_s = l;
                (format!("lambda_s={l}"), c)
            })
            .collect(),
    }
}

pub fn cmd_ablate(wd: &Path, cfg: &Config, mode: AblateMode) -> Result<Vec<AblationRow>> {
    let settings = ablation_settings(cfg, mode);
    if settings.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let tag = match mode {
        AblateMode::Encoder => "encoder",
        AblateMode::LambdaS => "lambda_s",
    };
    let mut rows = Vec::new();
    for (i, (name, c)) in settings.iter().enumerate() {
        let run = format!("ablate-{tag}-{i}");
        println!("ablate: {name}");
        let summary = cmd_train(wd, c, None, &run)?;
        cmd_predict(wd, c, &summary.final_checkpoint, &run)?;
        let agg = cmd_evaluate(wd, c, &predictions_dir(wd, &run), &run)?;
        rows.push(AblationRow {
            setting: name.clone(),
            dice: agg.dice_mean,
            jaccard: agg.jaccard_mean,
            hd95: agg.hd95_mean,
            asd: agg.asd_mean,
        });
    }
    let dir = wd.join("ablate");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{tag}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["setting", "dice", "jaccard", "hd95", "asd"])?;
    for r in &rows {
        w.write_record([r.setting.clone(), r.dice.to_string(), r.jaccard.to_string(), fmt_opt(r.hd95), fmt_opt(r.asd)])?;
    }
    w.flush()?;
    println!("ablate: {} rows in {}", rows.len(), path.display());
    Ok(rows)
}
