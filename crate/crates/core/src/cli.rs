//! Command-line front end: argument types, run configuration and the
//! subcommand drivers behind the `dfm` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::catalog::{catalog_names, run_catalog, CatalogOptions};
use crate::data::{generate_synthetic, Dataset, FeatureDims, SignalStrength, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{correlate_outcomes, irr_leave_one_rater_out, parse_predictions_tsv, IrrReport};
use crate::harness::{run_ablation, run_nested_cv, variants, with_jobs, AblationAxis, CvConfig, Grid};
use crate::model::{build_model, save_checkpoint, EncoderKind, ModalitySet, ModelConfig, TaskMode};
use crate::objective::{Component, LossKind, Rating};
use crate::seed::derive_seed;
use crate::train::{teacher_split, train, TrainConfig};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Parser)]
#[command(name = "dfm", version, about = "Multimodal classroom discourse scoring")]
pub struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted signal.
    Synth(SynthArgs),
    /// Train one model on a dataset and save a checkpoint.
    Train(RunArgs),
    /// Nested cross-validation with grid search.
    Cv(RunArgs),
    /// Nested cross-validation over ablation variants on one fold plan.
    Ablate(AblateArgs),
    /// Correlate classroom-level scores with student outcomes.
    Correlate(CorrelateArgs),
    /// Finite-difference check of every primitive and block gradient.
    Gradcheck(GradcheckArgs),
    /// Leave-one-rater-out agreement of the human raters.
    Irr(IrrArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Every modality carries every component.
    Uniform,
    /// Text carries questioning and explanations, audio carries nature.
    Asymmetric,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for the manifest and feature files.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON synthesis config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub teachers: Option<usize>,
    #[arg(long)]
    pub segments_per_teacher: Option<usize>,
    #[arg(long)]
    pub segments_per_lesson: Option<usize>,
    #[arg(long)]
    pub students_per_teacher: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Signal strength of the uniform preset.
    #[arg(long)]
    pub signal: Option<f64>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Feature widths as text,audio,video.
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<FeatureDims>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run config (as written to run_config.json); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root containing manifest.json.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concurrent folds and grid points.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Modality set such as T, T+A or T+A+V.
    #[arg(long)]
    pub modalities: Option<ModalitySet>,
    #[arg(long)]
    pub encoder: Option<EncoderKind>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    /// `multi` or `single:<component>`.
    #[arg(long)]
    pub task: Option<TaskMode>,
    #[arg(long, value_delimiter = ',')]
    pub lr: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub batch_size: Option<Vec<usize>>,
    /// Fusion module counts.
    #[arg(long, value_delimiter = ',')]
    pub modules: Option<Vec<usize>>,
    /// Attention heads per block.
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub n_outer: Option<usize>,
    #[arg(long)]
    pub n_inner: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Axes to vary: modalities, encoder, task, loss.
    #[arg(long, value_delimiter = ',')]
    pub axes: Option<Vec<AblationAxis>>,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Prediction table from `cv`; without it only human labels are used.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random points per entry.
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only these entries.
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
    /// List entry names and exit.
    #[arg(long)]
    pub list: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Route this entry through an identity with a wrong gradient.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct IrrArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_dims(s: &str) -> std::result::Result<FeatureDims, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [text, audio, video] => Ok(FeatureDims { text, audio, video }),
        _ => Err("expected three widths text,audio,video".into()),
    }
}

/// Everything a `train`, `cv` or `ablate` run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub jobs: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grid: Grid,
    pub n_outer: usize,
    pub n_inner: usize,
    pub axes: Vec<AblationAxis>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cv = CvConfig::default();
        RunConfig {
            data: None,
            out: None,
            seed: 0,
            jobs: 1,
            model: cv.model,
            train: cv.train,
            grid: cv.grid,
            n_outer: cv.n_outer,
            n_inner: cv.n_inner,
            axes: vec![AblationAxis::Modalities],
        }
    }
}

impl RunConfig {
    /// Config file (if any) with the flags applied on top.
    pub fn resolve(args: &RunArgs, axes: Option<&[AblationAxis]>) -> Result<Self> {
        let mut cfg: RunConfig = match &args.config {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &args.data {
            cfg.data = Some(v.clone());
        }
        if let Some(v) = &args.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = args.seed {
            cfg.seed = v;
        }
        if let Some(v) = args.jobs {
            cfg.jobs = v;
        }
        if let Some(v) = &args.modalities {
            cfg.model.modalities = v.clone();
        }
        if let Some(v) = args.encoder {
            cfg.model.encoder = v;
        }
        if let Some(v) = args.loss {
            cfg.model.loss = v;
        }
        if let Some(v) = args.task {
            cfg.model.task = v;
        }
        if let Some(v) = &args.lr {
            cfg.grid.lr = v.clone();
        }
        if let Some(v) = &args.batch_size {
            cfg.grid.batch_size = v.clone();
        }
        if let Some(v) = &args.modules {
            cfg.grid.num_modules = v.clone();
        }
        if let Some(v) = args.heads {
            cfg.model.num_heads = v;
        }
        if let Some(v) = args.max_epochs {
            cfg.train.max_epochs = v;
        }
        if let Some(v) = args.n_outer {
            cfg.n_outer = v;
        }
        if let Some(v) = args.n_inner {
            cfg.n_inner = v;
        }
        if let Some(v) = axes {
            cfg.axes = v.to_vec();
        }
        cfg.model.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::config("jobs must be at least 1"));
        }
        if self.grid.lr.is_empty() || self.grid.batch_size.is_empty() || self.grid.num_modules.is_empty() {
            return Err(Error::config("every grid axis needs at least one value"));
        }
        if self.grid.lr.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.grid.batch_size.contains(&0) {
            return Err(Error::config("batch sizes must be positive"));
        }
        for &m in &self.grid.num_modules {
            ModelConfig {
                num_modules: m,
                ..self.model.clone()
            }
            .validate()?;
        }
        self.train.validate()
    }

    fn data_root(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::usage("no dataset given (--data or \"data\" in the config)"))
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::usage("no output directory given (--out or \"out\" in the config)"))
    }

    /// Loads the dataset and adopts its feature widths.
    fn load_data(&mut self) -> Result<Dataset> {
        let data = Dataset::load(self.data_root()?)?;
        self.model.dims = data.manifest.dims;
        self.validate()?;
        Ok(data)
    }

    fn cv_config(&self) -> CvConfig {
        CvConfig {
            model: self.model.clone(),
            train: self.train.clone(),
            grid: self.grid.clone(),
            n_outer: self.n_outer,
            n_inner: self.n_inner,
            seed: self.seed,
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Runs a parsed command. `Ok(false)` means the command ran but its check
/// failed (gradcheck).
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(|_| true),
        Command::Train(a) => cmd_train(&a).map(|_| true),
        Command::Cv(a) => cmd_cv(&a).map(|_| true),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| true),
        Command::Correlate(a) => cmd_correlate(&a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Irr(a) => cmd_irr(&a).map(|_| true),
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = args.teachers {
        cfg.n_teachers = v;
    }
    if let Some(v) = args.segments_per_teacher {
        cfg.segments_per_teacher = v;
    }
    if let Some(v) = args.segments_per_lesson {
        cfg.segments_per_lesson = v;
    }
    if let Some(v) = args.students_per_teacher {
        cfg.students_per_teacher = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    match (args.preset, args.signal) {
        (Some(Preset::Asymmetric), Some(_)) => {
            return Err(Error::usage("--signal applies to the uniform preset only"));
        }
        (Some(Preset::Asymmetric), None) => cfg.signal = SignalStrength::asymmetric(),
        (_, Some(s)) => cfg.signal = SignalStrength::uniform(s),
        (Some(Preset::Uniform), None) => cfg.signal = SignalStrength::uniform(1.0),
        (None, None) => {}
    }
    if let Some(v) = args.noise_sd {
        cfg.noise_sd = v;
    }
    if let Some(v) = args.rho {
        cfg.rho = v;
    }
    if let Some(v) = args.dims {
        cfg.dims = v;
    }
    cfg.validate()?;
    let data = generate_synthetic(&cfg)?;
    data.save(&args.out)?;
    write_json(&args.out.join("synth_config.json"), &cfg)?;

    let teachers = data.manifest.teachers().len();
    println!("teachers: {teachers}");
    println!("segments: {}", data.len());
    println!("students: {}", data.manifest.student_records.len());
    println!("label histogram (rating: count per component)");
    print!("{}", label_histogram(&data));
    Ok(())
}

fn label_histogram(data: &Dataset) -> String {
    let mut s = format!("{:>6}", "rating");
    for c in Component::ALL {
        let _ = write!(s, " {:>12}", c.name());
    }
    s.push('\n');
    for r in Rating::ALL {
        let _ = write!(s, "{:>6}", r.to_string());
        for c in Component::ALL {
            let n = data.manifest.segments.iter().filter(|e| e.labels.get(c) == r).count();
            let _ = write!(s, " {n:>12}");
        }
        s.push('\n');
    }
    s
}

pub fn cmd_train(args: &RunArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(args, None)?;
    // The grid is not searched here: a single value per axis sets the
    // training and model fields directly.
    fn single<T: Copy>(name: &str, v: &Option<Vec<T>>) -> Result<Option<T>> {
        match v.as_deref() {
            None => Ok(None),
            Some([x]) => Ok(Some(*x)),
            Some(xs) => Err(Error::usage(format!("train takes a single {name}, got {}", xs.len()))),
        }
    }
    if let Some(v) = single("learning rate", &args.lr)? {
        cfg.train.lr = v;
    }
    if let Some(v) = single("batch size", &args.batch_size)? {
        cfg.train.batch_size = v;
    }
    if let Some(v) = single("module count", &args.modules)? {
        cfg.model.num_modules = v;
    }
    let data = cfg.load_data()?;
    let out = cfg.out_dir()?.to_path_buf();
    create_dir(&out)?;
    write_json(&out.join(RUN_CONFIG_FILE), &cfg)?;

    let model_cfg = ModelConfig {
        seed: derive_seed(cfg.seed, &[0]),
        ..cfg.model.clone()
    };
    let train_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, &[1]),
        ..cfg.train.clone()
    };
    let all: Vec<usize> = (0..data.len()).collect();
    let (tr, va) = teacher_split(&data, &all, train_cfg.val_fraction, derive_seed(cfg.seed, &[2]))?;
    let mut model = build_model::<f32>(&model_cfg)?;
    log::info!(
        "training {} ({} parameters) on {} segments, validating on {}",
        model_cfg.label(),
        model.num_parameters(),
        tr.len(),
        va.len()
    );
    let history = train(&mut model, &data, &tr, &va, &train_cfg)?;
    save_checkpoint(&out.join("model.dfm"), &model)?;
    write_json(&out.join("history.json"), &history)?;
    let table = history.to_table();
    write_text(&out.join("history.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_cv(args: &RunArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(args, None)?;
    let data = cfg.load_data()?;
    let out = cfg.out_dir()?.to_path_buf();
    create_dir(&out)?;
    write_json(&out.join(RUN_CONFIG_FILE), &cfg)?;

    let cv = cfg.cv_config();
    let result = with_jobs(cfg.jobs, || run_nested_cv(&data, &cv))??;
    write_text(&out.join("predictions.tsv"), &result.predictions_tsv())?;
    write_json(&out.join("report.json"), &result)?;
    let table = result.report.to_table();
    write_text(&out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(&args.run, args.axes.as_deref())?;
    if cfg.axes.is_empty() {
        return Err(Error::usage("no ablation axes given"));
    }
    let data = cfg.load_data()?;
    let out = cfg.out_dir()?.to_path_buf();
    create_dir(&out)?;
    write_json(&out.join(RUN_CONFIG_FILE), &cfg)?;

    let cv = cfg.cv_config();
    let rows = variants(&cfg.model, &cfg.axes);
    let report = with_jobs(cfg.jobs, || run_ablation(&data, &cv, &rows))??;
    write_json(&out.join("ablation.json"), &report)?;
    let table = report.to_table();
    write_text(&out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_correlate(args: &CorrelateArgs) -> Result<()> {
    let data = Dataset::load(&args.data)?;
    let predictions = match &args.predictions {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(parse_predictions_tsv(&text, p)?)
        }
        None => None,
    };
    let table = correlate_outcomes(&data.manifest, predictions.as_deref())?;
    let text = table.to_table();
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("correlation.json"), &table)?;
        write_text(&out.join("correlation.txt"), &text)?;
    }
    print!("{text}");
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    if args.list {
        for n in catalog_names() {
            println!("{n}");
        }
        return Ok(true);
    }
    if args.points == 0 {
        return Err(Error::usage("--points must be at least 1"));
    }
    let opts = CatalogOptions {
        points: args.points,
        tol: args.tol,
        seed: args.seed,
        only: args.only.clone(),
        inject_fault: args.inject_fault.clone(),
        ..CatalogOptions::default()
    };
    let results = run_catalog(&opts)?;
    println!("{:<24} {:>12} {:>8}  result", "entry", "max_rel_err", "coords");
    for r in &results {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        println!("{:<24} {:>12.3e} {:>8}  {verdict}", r.name, r.max_rel_err, r.coords_checked);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} entries, {failed} failed, tol {:e}", results.len(), args.tol);
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("gradcheck.json"), &results)?;
    }
    Ok(failed == 0)
}

pub fn cmd_irr(args: &IrrArgs) -> Result<()> {
    let data = Dataset::load(&args.data)?;
    let reports = Component::ALL
        .iter()
        .map(|&c| irr_leave_one_rater_out(&data.manifest.rater_records, c))
        .collect::<Result<Vec<IrrReport>>>()?;
    let mut s = format!("{:<22} {:>15}  per rater\n", "component", "QWK mean (SE)");
    for r in &reports {
        let per: Vec<String> = r.per_rater.iter().map(|(id, q)| format!("{id}={q:.3}")).collect();
        let _ = writeln!(s, "{:<22} {:>7.3} ({:.3})  {}", r.component.title(), r.mean, r.se, per.join(" "));
    }
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("irr.json"), &reports)?;
        write_text(&out.join("irr.txt"), &s)?;
    }
    print!("{s}");
    Ok(())
}

/// Exit status for an error: 2 for usage and configuration problems, 1 for
/// everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parse() {
        assert_eq!(
            parse_dims("8,16,4").unwrap(),
            FeatureDims {
                text: 8,
                audio: 16,
                video: 4
            }
        );
        assert!(parse_dims("8,16").is_err());
        assert!(parse_dims("a,b,c").is_err());
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from([
            "dfm",
            "cv",
            "--data",
            "d",
            "--out",
            "o",
            "--seed",
            "9",
            "--modalities",
            "T+A+V",
            "--lr",
            "1e-4,1e-5",
            "--modules",
            "1,2",
            "--task",
            "single:questioning",
        ])
        .unwrap();
        let Command::Cv(args) = cli.command else { panic!() };
        let cfg = RunConfig::resolve(&args, None).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.seed, 9);
        assert_eq!(cfg.model.modalities.len(), 3);
        assert_eq!(cfg.grid.lr, vec![1e-4, 1e-5]);
        assert_eq!(cfg.grid.num_modules, vec![1, 2]);
        assert_eq!(cfg.model.task, TaskMode::Single(Component::Questioning));
    }

    #[test]
    fn run_config_round_trips_and_rejects_unknown_fields() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 1}"#).is_err());
    }

    #[test]
    fn bad_grid_is_a_config_error() {
        let cli = Cli::try_parse_from(["dfm", "cv", "--modules", "9"]).unwrap();
        let Command::Cv(args) = cli.command else { panic!() };
        let e = RunConfig::resolve(&args, None).unwrap_err();
        assert_eq!(exit_code(&e), 2);
    }
}
