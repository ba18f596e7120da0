mod csvio;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mer_core::calibrate::{calibrate, evaluate, ThresholdsFile};
use mer_core::encoder::EncoderConfig;
use mer_core::extract::{UtteranceClip, Vocab};
use mer_core::fixtures::{self, FixtureKind};
use mer_core::fusion::{forward, FusionConfig, FusionWeights, ModalEmbeddings, ParamGroup, Sample};
use mer_core::media::{self, load_wav, MediaBundle, MediaError};
use mer_core::orchestrator::{write_clip_artifacts, Event, EventSink, NdjsonSink, Pipeline, RunControl};
use mer_core::train::{separable_dataset, train_head, TrainHyper};
use mer_core::vad::segment;
use mer_core::{ModelArchive, PipelineConfig, N_EMOTIONS};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::json;

/// Error carrying the process exit code: 1 input, 2 config/model, 3 runtime.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }
    pub fn runtime(message: impl Into<String>) -> Self {
        CliError { code: 3, message: message.into() }
    }
}

impl From<MediaError> for CliError {
    fn from(e: MediaError) -> Self {
        match e {
            MediaError::DecoderFailed { .. } | MediaError::Io { .. } => CliError::runtime(e.to_string()),
            MediaError::DecoderNotFound(_) => CliError::config(e.to_string()),
            _ => CliError::input(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "mer", version, about = "Utterance-level multimodal emotion recognition")]
struct Cli {
    /// Print errors as JSON objects on stderr.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect utterance spans and write them as JSON.
    Segment {
        /// Bundle directory or WAV file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline and write the NDJSON event stream.
    Infer(InferArgs),
    /// Pick per-emotion thresholds maximizing F1.
    Calibrate {
        #[arg(long)]
        probs: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print accuracy and F1 metrics as JSON.
    Eval {
        #[arg(long)]
        probs: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        thresholds: PathBuf,
    },
    /// Train the fusion head; writes a model archive, thresholds and loss trace.
    TrainHead(TrainArgs),
    /// Run the HTTP job service.
    Serve(ServeArgs),
    /// Write a deterministic synthetic media bundle.
    GenFixture {
        #[arg(long, value_parser = ["silence", "one-utt", "two-utt"])]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the seeded reference model archive.
    GenModel {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct InferArgs {
    /// Bundle directory, or a video file when the config sets a decoder command.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    thresholds: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Vocabulary file overriding the one inside the archive.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print events to stdout.
    #[arg(long)]
    stdout: bool,
    /// Write per-utterance face crops and audio under this directory.
    #[arg(long)]
    artifacts: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Output archive directory; thresholds.json and loss_trace.json go beside the weights.
    #[arg(long)]
    out: PathBuf,
    /// JSONL samples `{"visual": [[..]], "acoustic": [[..]], "textual": [[..]], "labels": [6 x 0/1]}`.
    /// Without it a seeded separable synthetic set is used.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Start from this archive's head and keep its encoder tensors.
    #[arg(long)]
    base_model: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    /// Per-group learning-rate multiplier, e.g. `conv.vis=0.1`. Repeatable.
    #[arg(long = "group-lr-scale", value_name = "GROUP=SCALE")]
    group_lr_scale: Vec<String>,
    /// Visual, acoustic and textual widths for a fresh synthetic model.
    #[arg(long, value_delimiter = ',', default_value = "16,12,12")]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    thresholds: Option<PathBuf>,
    #[arg(long)]
    max_upload_bytes: Option<usize>,
    #[arg(long)]
    max_parallel_jobs: Option<usize>,
    #[arg(long)]
    utterance_delay_ms: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json {
                eprintln!("{}", json!({ "error": e.message, "code": e.code }));
            } else {
                eprintln!("error: {}", e.message);
            }
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Segment { input, config, out } => cmd_segment(&input, config.as_deref(), &out),
        Command::Infer(args) => cmd_infer(args),
        Command::Calibrate { probs, labels, out } => cmd_calibrate(&probs, &labels, &out),
        Command::Eval { probs, labels, thresholds } => cmd_eval(&probs, &labels, &thresholds),
        Command::TrainHead(args) => cmd_train(args),
        Command::Serve(args) => cmd_serve(args),
        Command::GenFixture { kind, out, seed } => {
            let kind = FixtureKind::parse(&kind).ok_or_else(|| CliError::input(format!("unknown kind {kind}")))?;
            media::write_bundle(&fixtures::generate(kind, seed), &out)?;
            println!("wrote {} fixture to {}", kind.name(), out.display());
            Ok(())
        }
        Command::GenModel { out, seed } => {
            fixtures::reference_model(seed).save(&out).map_err(|e| CliError::runtime(e.to_string()))?;
            println!("wrote reference model to {}", out.display());
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).map_err(|e| CliError::config(e.to_string())),
        None => Ok(PipelineConfig::default()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn cmd_segment(input: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    if !input.exists() {
        return Err(CliError::input(format!("{} does not exist", input.display())));
    }
    let audio = if input.is_dir() {
        media::load_bundle(input, cfg.sample_rate_hz)?.audio
    } else {
        load_wav(input, cfg.sample_rate_hz)?
    };
    let spans = segment(&audio, cfg.vad_backend().as_ref()).map_err(|e| CliError::runtime(e.to_string()))?;
    let mut text = serde_json::to_string_pretty(&spans).expect("spans serialize");
    text.push('\n');
    write_file(out, text)?;
    println!("{} span(s)", spans.len());
    Ok(())
}

fn load_input(input: &Path, cfg: &PipelineConfig) -> Result<MediaBundle> {
    if !input.exists() {
        return Err(CliError::input(format!("{} does not exist", input.display())));
    }
    if input.is_dir() {
        return Ok(media::load_bundle(input, cfg.sample_rate_hz)?);
    }
    let Some(cmd) = &cfg.decoder_command else {
        return Err(CliError::input(format!(
            "{} is a file; pass a bundle directory or set decoder_command in the config",
            input.display()
        )));
    };
    let outdir = std::env::temp_dir().join(format!("mer-decode-{}", std::process::id()));
    let bundle = media::decode_video(input, cmd, &outdir, cfg.sample_rate_hz);
    let _ = fs::remove_dir_all(&outdir);
    Ok(bundle?)
}

/// Fans events out to several sinks and optionally saves clip artifacts.
struct InferSink {
    sinks: Vec<Box<dyn EventSink>>,
    artifacts: Option<PathBuf>,
}

impl EventSink for InferSink {
    fn event(&mut self, event: &Event) -> io::Result<()> {
        self.sinks.iter_mut().try_for_each(|s| s.event(event))
    }

    fn clip(&mut self, index: usize, clip: &UtteranceClip) -> io::Result<()> {
        match &self.artifacts {
            Some(dir) => write_clip_artifacts(&dir.join(index.to_string()), clip),
            None => Ok(()),
        }
    }
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let archive = ModelArchive::load(&args.model).map_err(|e| CliError::config(e.to_string()))?;
    let thresholds = ThresholdsFile::load(&args.thresholds).map_err(|e| CliError::config(e.to_string()))?;
    let vocab = match &args.vocab {
        Some(p) => Some(Vocab::load(p).map_err(|e| CliError::config(e.to_string()))?),
        None => None,
    };
    let pipeline =
        Pipeline::from_config(&cfg, &archive, vocab, thresholds).map_err(|e| CliError::config(e.to_string()))?;
    let bundle = load_input(&args.input, &cfg)?;

    let mut sinks: Vec<Box<dyn EventSink>> = Vec::new();
    if let Some(out) = &args.out {
        write_file(out, "")?;
        let f = fs::File::create(out).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
        sinks.push(Box::new(NdjsonSink(io::BufWriter::new(f))));
    }
    if args.stdout || args.out.is_none() {
        sinks.push(Box::new(NdjsonSink(io::stdout())));
    }
    let mut sink = InferSink { sinks, artifacts: args.artifacts };
    pipeline
        .run(&bundle, &mut sink, RunControl::default())
        .map_err(|e| CliError::runtime(e.to_string()))?;
    io::stdout().flush().ok();
    Ok(())
}

fn cmd_calibrate(probs: &Path, labels: &Path, out: &Path) -> Result<()> {
    let p = csvio::read_probs(probs)?;
    let l = csvio::read_labels(labels)?;
    let result = calibrate(&p, &l).map_err(|e| CliError::input(e.to_string()))?;
    ThresholdsFile::save(&result.thresholds, out).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    println!("{}", serde_json::to_string(&result).expect("result serializes"));
    Ok(())
}

fn cmd_eval(probs: &Path, labels: &Path, thresholds: &Path) -> Result<()> {
    let p = csvio::read_probs(probs)?;
    let l = csvio::read_labels(labels)?;
    let t = ThresholdsFile::load(thresholds).map_err(|e| CliError::config(e.to_string()))?;
    let report = evaluate(&p, &l, &t).map_err(|e| CliError::input(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

#[derive(Deserialize)]
struct SampleLine {
    visual: Vec<Vec<f64>>,
    acoustic: Vec<Vec<f64>>,
    textual: Vec<Vec<f64>>,
    labels: [u8; N_EMOTIONS],
}

fn matrix(rows: Vec<Vec<f64>>, what: &str, line: usize) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    let n = rows.len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::input(format!("line {line}: ragged {what} matrix")));
    }
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| CliError::input(format!("line {line}: {what}: {e}")))
}

fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let s: SampleLine =
                serde_json::from_str(l).map_err(|e| CliError::input(format!("{}:{}: {e}", path.display(), i + 1)))?;
            Ok(Sample {
                embeddings: ModalEmbeddings {
                    visual: matrix(s.visual, "visual", i + 1)?,
                    acoustic: matrix(s.acoustic, "acoustic", i + 1)?,
                    textual: matrix(s.textual, "textual", i + 1)?,
                },
                labels: s.labels.map(f64::from),
            })
        })
        .collect()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut hyper = TrainHyper::new(args.lr, args.epochs);
    for spec in &args.group_lr_scale {
        let (name, value) =
            spec.split_once('=').ok_or_else(|| CliError::input(format!("expected GROUP=SCALE, got {spec}")))?;
        let group = ParamGroup::parse(name).ok_or_else(|| {
            let names: Vec<_> = ParamGroup::ALL.iter().map(|g| g.name()).collect();
            CliError::input(format!("unknown group {name}; expected one of {}", names.join(", ")))
        })?;
        let scale: f64 = value.parse().map_err(|_| CliError::input(format!("bad scale in {spec}")))?;
        hyper = hyper.with_scale(group, scale);
    }

    let mut archive = match &args.base_model {
        Some(p) => ModelArchive::load(p).map_err(|e| CliError::config(e.to_string()))?,
        None => {
            let [dv, da, dt] = args.dims[..] else {
                return Err(CliError::input("--dims takes three comma-separated widths"));
            };
            let enc = EncoderConfig { d_visual: dv, d_acoustic: da, d_textual: dt, ..EncoderConfig::default() };
            let fus = FusionConfig::with_dims(dv, da, dt, args.channels, args.kernel, args.hidden);
            fus.validate().map_err(|e| CliError::input(e.to_string()))?;
            let mut model = fixtures::reference_model_with(enc, fus.clone(), fixtures::reference_vocab(), args.seed);
            model.fusion = FusionWeights::random(&fus, &mut ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(1)));
            model
        }
    };
    let cfg = archive.config.fusion.clone();
    let data = match &args.data {
        Some(p) => read_samples(p)?,
        None => {
            if cfg.d_visual < N_EMOTIONS {
                return Err(CliError::input(format!("synthetic data needs a visual width of at least {N_EMOTIONS}")));
            }
            separable_dataset(&cfg, args.samples, args.seed)
        }
    };

    let outcome = train_head(&data, archive.fusion.clone(), &hyper).map_err(|e| CliError::runtime(e.to_string()))?;
    archive.fusion = outcome.weights;
    archive.fusion.round_to_f32();

    let probs: Vec<[f64; N_EMOTIONS]> = data
        .iter()
        .map(|s| forward(&s.embeddings, &archive.fusion).map(|p| p.probs))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::input(e.to_string()))?;
    let labels: Vec<[bool; N_EMOTIONS]> = data.iter().map(|s| s.labels.map(|y| y == 1.0)).collect();
    let calibration = calibrate(&probs, &labels).map_err(|e| CliError::runtime(e.to_string()))?;
    let report = evaluate(&probs, &labels, &calibration.thresholds).map_err(|e| CliError::runtime(e.to_string()))?;

    archive.save(&args.out).map_err(|e| CliError::runtime(e.to_string()))?;
    let thresholds_path = args.out.join("thresholds.json");
    ThresholdsFile::save(&calibration.thresholds, &thresholds_path)
        .map_err(|e| CliError::runtime(format!("{}: {e}", thresholds_path.display())))?;
    write_file(&args.out.join("loss_trace.json"), serde_json::to_string(&outcome.loss_trace).expect("trace") + "\n")?;
    csvio::write_rows(&args.out.join("train_probs.csv"), probs.iter().copied())?;
    csvio::write_rows(&args.out.join("train_labels.csv"), labels.iter().map(|l| l.map(|b| if b { 1.0 } else { 0.0 })))?;

    let summary = json!({
        "samples": data.len(),
        "epochs": args.epochs,
        "initial_loss": outcome.loss_trace.first(),
        "final_loss": outcome.loss_trace.last(),
        "thresholds": calibration.thresholds,
        "f1_weighted": report.mean_f1_weighted,
        "f1_positive": report.mean_f1_positive,
        "accuracy": report.mean_accuracy,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary"));
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    tracing_subscriber::fmt().with_writer(io::stderr).init();
    let flags = mer_service::Overrides {
        bind: args.bind,
        data_dir: args.data_dir,
        model: args.model,
        vocab: args.vocab,
        thresholds: args.thresholds,
        max_upload_bytes: args.max_upload_bytes,
        max_parallel_jobs: args.max_parallel_jobs,
        utterance_delay_ms: args.utterance_delay_ms,
    };
    let cfg = mer_service::ServiceConfig::resolve(args.config.as_deref(), std::env::vars(), &flags)
        .map_err(|e| CliError::config(e.to_string()))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::runtime(e.to_string()))?;
    runtime.block_on(mer_service::run(cfg)).map_err(|e| match e {
        mer_service::ServiceError::Config(_) | mer_service::ServiceError::Model { .. } | mer_service::ServiceError::Load(_) => {
            CliError::config(e.to_string())
        }
        mer_service::ServiceError::Io(_) => CliError::runtime(e.to_string()),
    })
}
