//! The `cgh` command line: data generation, training, experiments,
//! gradient checks and state embeddings.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{ingest_csv, personalized_split, synth_generate, write_csv, MotifSpec, SubjectDataset, ACTIVITIES};
use crate::error::{Error, Result};
use crate::eval::{accuracy, run_experiment, ExperimentConfig, ExperimentReport, Protocol};
use crate::gradcheck::{run_suite, GradcheckOptions, DEFAULT_INSTANCES, TOLERANCE};
use crate::layers::LayerKind;
use crate::model::{self, ArchConfig, Model, ModelKind, Network, TrainingMetadata};
use crate::optim::{train, write_loss_csv, TrainConfig};
use crate::tensor::Rng;
use crate::tsne::{export_states, parse_state, EmbeddingSettings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cgh", version, about = "Composite activity recognition with a from-scratch computational graph")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic accelerometer CSV from a motif specification.
    GenData {
        /// Motif specification JSON; the built-in default when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 9)]
        subjects: usize,
        /// Minutes of signal per subject and activity.
        #[arg(long, default_value_t = 5)]
        minutes: usize,
    },
    /// Train one model on every window of the configured data.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the evaluation protocol for each configured model.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for (user, repetition) runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare every backward pass with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        /// Corrupt one layer's backward pass (negative control).
        #[arg(long, hide = true)]
        tamper: Option<String>,
    },
    /// Embed internal LSTM states of a trained full model with t-SNE.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Ingestion-schema CSV.
        #[arg(long)]
        data: PathBuf,
        /// Which state to embed: s1..s5.
        #[arg(long)]
        which: String,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one subject's windows.
        #[arg(long)]
        subject: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: PathBuf,
    },
    Synthetic {
        #[serde(default)]
        spec: Option<PathBuf>,
        #[serde(default = "default_subjects")]
        subjects: usize,
        #[serde(default = "default_minutes")]
        minutes: usize,
    },
}

fn default_subjects() -> usize {
    9
}

fn default_minutes() -> usize {
    5
}

fn default_repetitions() -> usize {
    1
}

fn default_train_minutes() -> usize {
    2
}

/// Everything one `train` or `experiment` invocation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Architecture; `arch.kind` selects the model trained by `train`.
    #[serde(default)]
    pub arch: ArchConfig,
    /// Models compared by `experiment`; defaults to `[arch.kind]`.
    #[serde(default)]
    pub models: Option<Vec<ModelKind>>,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSource,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub pairs: Vec<[usize; 2]>,
    #[serde(default = "default_train_minutes")]
    pub train_minutes: usize,
    #[serde(default = "default_minutes")]
    pub total_minutes: usize,
}

fn default_protocol() -> Protocol {
    Protocol::Personalized
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_json(&text).map_err(|e| e.context(format!("config {}", path.display())))?;
        cfg.validate().map_err(|e| e.context(format!("config {}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        let missing = |p: &Path| Error::Config(format!("path {} does not exist", p.display()));
        match &self.data {
            DataSource::Csv { path } if !path.exists() => return Err(missing(path)),
            DataSource::Synthetic { spec: Some(path), .. } if !path.exists() => return Err(missing(path)),
            DataSource::Synthetic { subjects, minutes, .. } if *subjects == 0 || *minutes == 0 => {
                return Err(Error::Config("synthetic data needs at least one subject and one minute".into()))
            }
            _ => {}
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if matches!(&self.models, Some(m) if m.is_empty()) {
            return Err(Error::Config("models must not be empty".into()));
        }
        if let Some(p) = self.pairs.iter().flatten().find(|&&c| c >= self.arch.classes) {
            return Err(Error::Config(format!("pair class {p} exceeds class count {}", self.arch.classes)));
        }
        Ok(())
    }

    pub fn models(&self) -> Vec<ModelKind> {
        self.models.clone().unwrap_or_else(|| vec![self.arch.kind])
    }

    pub fn load_data(&self) -> Result<Vec<SubjectDataset>> {
        match &self.data {
            DataSource::Csv { path } => ingest_csv(path),
            DataSource::Synthetic { spec, subjects, minutes } => {
                let spec = load_spec(spec.as_deref())?;
                synth_generate(&spec, *subjects, minutes * 4, &mut Rng::new(self.seed))
            }
        }
    }

    pub fn experiment(&self, kind: ModelKind) -> ExperimentConfig {
        ExperimentConfig {
            protocol: self.protocol,
            arch: self.arch.clone().with_kind(kind),
            train: self.train.clone(),
            repetitions: self.repetitions,
            base_seed: self.seed,
            train_minutes: self.train_minutes,
            total_minutes: self.total_minutes,
            pairs: self.pairs.clone(),
        }
    }
}

fn load_spec(path: Option<&Path>) -> Result<MotifSpec> {
    match path {
        None => Ok(MotifSpec::default_spec()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            MotifSpec::from_json(&text).map_err(|e| e.context(format!("motif spec {}", p.display())))
        }
    }
}

/// A command failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(Error),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

trait Classify<T> {
    fn usage(self) -> std::result::Result<T, Failure>;
    fn runtime(self) -> std::result::Result<T, Failure>;
}

impl<T> Classify<T> for Result<T> {
    fn usage(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Usage)
    }

    fn runtime(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Runtime)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(spec: Option<&Path>, out: &Path, seed: u64, subjects: usize, minutes: usize) -> std::result::Result<String, Failure> {
    if subjects == 0 || minutes == 0 {
        return Err(Failure::Usage(Error::Argument("--subjects and --minutes must be positive".into())));
    }
    let spec = load_spec(spec).usage()?;
    let data = synth_generate(&spec, subjects, minutes * 4, &mut Rng::new(seed)).runtime()?;
    write_csv(&data, out).runtime()?;
    let mut report = format!("wrote {}\nsubject", out.display());
    for a in ACTIVITIES {
        let _ = write!(report, ",{a}");
    }
    report.push('\n');
    for d in &data {
        let _ = write!(report, "{}", d.subject);
        for s in &d.streams {
            let _ = write!(report, ",{}", s.len());
        }
        report.push('\n');
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: ModelKind,
    pub parameter_count: usize,
    pub memory_footprint_bits: u64,
    pub final_train_accuracy: f64,
    pub final_loss: f64,
    pub adam_steps: u64,
    pub windows: usize,
    pub seed: u64,
}

fn cmd_train(cfg: &RunConfig) -> std::result::Result<String, Failure> {
    let data = cfg.load_data().usage()?;
    let dir = &cfg.output_dir;
    create_dir(dir).runtime()?;
    let mut rng = Rng::new(cfg.seed);
    let mut model = Model::build(&cfg.arch, &mut rng).usage()?;
    let windows: Vec<_> = data.iter().flat_map(SubjectDataset::windows).collect();
    let examples: Vec<_> = windows.iter().map(|w| (&w.readings, w.label)).collect();
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let report = train(&mut model, &examples, &train_cfg, &mut rng).runtime()?;

    let preds = windows
        .iter()
        .map(|w| model.predict(&w.readings))
        .collect::<Result<Vec<_>>>()
        .runtime()?;
    let labels: Vec<usize> = windows.iter().map(|w| w.label).collect();
    let summary = TrainSummary {
        model: model.kind(),
        parameter_count: model::count_parameters(&model),
        memory_footprint_bits: model::memory_footprint_bits(&model),
        final_train_accuracy: accuracy(&preds, &labels).runtime()?,
        final_loss: report.trace.last().map_or(f64::NAN, |r| r.loss),
        adam_steps: report.adam_steps,
        windows: windows.len(),
        seed: cfg.seed,
    };
    let meta = TrainingMetadata {
        seed: cfg.seed,
        epochs: cfg.train.max_iterations,
        l2_strength: cfg.train.l2_strength,
    };
    model::save(&model, &meta, &dir.join("model.cgh")).runtime()?;
    model::export_architecture(&model, &dir.join("architecture.json")).runtime()?;
    write_loss_csv(&report.trace, &dir.join("loss.csv")).runtime()?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&dir.join("summary.json"), &json).runtime()?;
    Ok(format!(
        "{} model: {} parameters ({} bits), train accuracy {:.4}, wrote {}\n",
        summary.model.name(),
        summary.parameter_count,
        summary.memory_footprint_bits,
        summary.final_train_accuracy,
        dir.display()
    ))
}

/// Rows per model with per-user means and the overall mean.
pub fn comparison_table(reports: &[ExperimentReport]) -> String {
    let mut out = String::new();
    let Some(first) = reports.first() else {
        return out;
    };
    let _ = write!(out, "{:<8} {:<13} {:>4}", "model", "protocol", "reps");
    for u in &first.users {
        let _ = write!(out, " {:>8}", format!("user{}", u.user));
    }
    let _ = writeln!(out, " {:>8}", "mean");
    for r in reports {
        let _ = write!(out, "{:<8} {:<13} {:>4}", r.model.name(), r.protocol.name(), r.repetitions);
        for u in &r.users {
            let _ = write!(out, " {:>8.4}", u.mean);
        }
        let _ = writeln!(out, " {:>8.4}", r.overall_mean);
    }
    for r in reports {
        let _ = writeln!(out, "overall mean {}: {}", r.model.name(), r.overall_mean);
    }
    out
}

fn comparison_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from("model,protocol,repetitions,user,mean\n");
    for r in reports {
        let (m, p) = (r.model.name(), r.protocol.name());
        for u in &r.users {
            let _ = writeln!(out, "{m},{p},{},{},{}", r.repetitions, u.user, u.mean);
        }
        let _ = writeln!(out, "{m},{p},{},all,{}", r.repetitions, r.overall_mean);
    }
    out
}

fn cmd_experiment(cfg: &RunConfig, jobs: usize) -> std::result::Result<String, Failure> {
    if jobs == 0 {
        return Err(Failure::Usage(Error::Argument("--jobs must be >= 1".into())));
    }
    let data = cfg.load_data().usage()?;
    if cfg.protocol == Protocol::Personalized {
        for d in &data {
            personalized_split(d, cfg.train_minutes, cfg.total_minutes).usage()?;
        }
    }
    create_dir(&cfg.output_dir).runtime()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::Runtime(Error::State(format!("thread pool: {e}"))))?;
    let mut reports = Vec::new();
    for kind in cfg.models() {
        let exp = cfg.experiment(kind);
        let report = pool
            .install(|| run_experiment(&exp, &data))
            .map_err(|e| e.context(format!("{} model", kind.name())))
            .runtime()?;
        report
            .write(&cfg.output_dir, &format!("report_{}_{}", kind.name(), cfg.protocol.name()))
            .runtime()?;
        reports.push(report);
    }
    let table = comparison_table(&reports);
    write_text(&cfg.output_dir.join("comparison.csv"), &comparison_csv(&reports)).runtime()?;
    Ok(table)
}

fn parse_layer(name: &str) -> Result<LayerKind> {
    LayerKind::ALL
        .into_iter()
        .find(|k| k.name().eq_ignore_ascii_case(name))
        .ok_or_else(|| {
            let names: Vec<&str> = LayerKind::ALL.iter().map(|k| k.name()).collect();
            Error::Argument(format!("unknown layer `{name}`; expected one of {}", names.join(", ")))
        })
}

fn cmd_gradcheck(seed: u64, instances: usize, tamper: Option<&str>) -> std::result::Result<String, Failure> {
    if instances == 0 {
        return Err(Failure::Usage(Error::Argument("--instances must be >= 1".into())));
    }
    let opts = GradcheckOptions {
        instances,
        seed,
        tamper: tamper.map(parse_layer).transpose().usage()?,
    };
    let results = run_suite(&opts).runtime()?;
    let mut out = String::new();
    for r in &results {
        let _ = writeln!(
            out,
            "{:<11} {:>3} instances  worst relative error {:.3e}  {}",
            r.name,
            r.instances,
            r.worst(),
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(out)
    } else {
        print!("{out}");
        Err(Failure::Runtime(Error::Numeric(format!(
            "gradient check above {TOLERANCE:e} for {}",
            failed.join(", ")
        ))))
    }
}

fn cmd_embed(
    checkpoint: &Path,
    data: &Path,
    which: &str,
    out: &Path,
    subject: Option<u32>,
    settings: EmbeddingSettings,
) -> std::result::Result<String, Failure> {
    let step = parse_state(which).usage()?;
    let ckpt = model::load(checkpoint).usage()?;
    let Model::Full(full) = &ckpt.model else {
        return Err(Failure::Usage(Error::Argument(format!(
            "embedding needs a full model checkpoint, {} holds a {} model",
            checkpoint.display(),
            ckpt.model.kind().name()
        ))));
    };
    let datasets = ingest_csv(data).usage()?;
    let windows: Vec<_> = datasets
        .iter()
        .filter(|d| subject.is_none_or(|s| d.subject == s))
        .flat_map(SubjectDataset::windows)
        .collect();
    if windows.is_empty() {
        return Err(Failure::Usage(Error::Argument(format!("no windows selected from {}", data.display()))));
    }
    if let Some(w) = windows.iter().find(|w| w.label >= full.num_classes()) {
        return Err(Failure::Usage(Error::Argument(format!(
            "data label {} exceeds the checkpoint's {} classes",
            w.label,
            full.num_classes()
        ))));
    }
    let e = export_states(full, &windows, step, &settings, out).runtime()?;
    Ok(format!("embedded {} {which} states into {}\n", e.coords.len(), out.display()))
}

fn resolve_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path).usage()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    Ok(cfg)
}

/// Executes a parsed command, returning its standard output.
pub fn execute(cli: Cli) -> std::result::Result<String, Failure> {
    match cli.command {
        Command::GenData {
            spec,
            out,
            seed,
            subjects,
            minutes,
        } => gen_data(spec.as_deref(), &out, seed, subjects, minutes),
        Command::Train { config, seed, out } => cmd_train(&resolve_config(&config, seed, out)?),
        Command::Experiment { config, seed, out, jobs } => cmd_experiment(&resolve_config(&config, seed, out)?, jobs),
        Command::Gradcheck { seed, instances, tamper } => cmd_gradcheck(seed, instances, tamper.as_deref()),
        Command::Embed {
            checkpoint,
            data,
            which,
            out,
            subject,
            seed,
            perplexity,
            iterations,
        } => cmd_embed(
            &checkpoint,
            &data,
            &which,
            &out,
            subject,
            EmbeddingSettings {
                seed,
                perplexity,
                iterations,
                ..EmbeddingSettings::default()
            },
        ),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("CGH_LOG", "error")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(out) => {
            print!("{out}");
            EXIT_OK
        }
        Err(f) => {
            let (Failure::Usage(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e}");
            f.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_json(extra: &str) -> String {
        format!(r#"{{"data": {{"synthetic": {{"subjects": 2, "minutes": 5}}}}, "output_dir": "out"{extra}}}"#)
    }

    #[test]
    fn config_defaults_and_unknown_keys() {
        let cfg = RunConfig::from_json(&config_json("")).unwrap();
        assert_eq!(cfg.models(), vec![ModelKind::Full]);
        assert_eq!(cfg.protocol, Protocol::Personalized);
        assert_eq!(cfg.repetitions, 1);
        cfg.validate().unwrap();
        let err = RunConfig::from_json(&config_json(r#", "epochs": 3"#)).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("epochs")), "{err}");
        let err = RunConfig::from_json(&config_json(r#", "arch": {"lstm_size": 3}"#)).unwrap_err();
        assert!(err.to_string().contains("lstm_size"));
    }

    #[test]
    fn missing_paths_rejected() {
        let cfg = RunConfig::from_json(r#"{"data": {"csv": {"path": "/no/such/file.csv"}}, "output_dir": "o"}"#).unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("/no/such/file.csv"));
        let cfg =
            RunConfig::from_json(r#"{"data": {"synthetic": {"spec": "/no/spec.json"}}, "output_dir": "o"}"#).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn experiment_config_carries_fields() {
        let cfg = RunConfig::from_json(&config_json(r#", "models": ["full", "trimmed"], "seed": 9, "pairs": [[3, 4]]"#))
            .unwrap();
        let exp = cfg.experiment(ModelKind::Trimmed);
        assert_eq!(exp.arch.kind, ModelKind::Trimmed);
        assert_eq!(exp.base_seed, 9);
        assert_eq!(exp.pairs, vec![[3, 4]]);
    }

    #[test]
    fn layer_names_parse() {
        assert_eq!(parse_layer("fc").unwrap(), LayerKind::Fc);
        assert_eq!(parse_layer("LSTM").unwrap(), LayerKind::Lstm);
        assert!(parse_layer("attention").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["cgh", "no-such-command"]), EXIT_USAGE);
        assert_eq!(main_with_args(["cgh", "train"]), EXIT_USAGE);
        assert_eq!(main_with_args(["cgh", "train", "--config", "/no/such/config.json"]), EXIT_USAGE);
    }
}
