//! The `siamface` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format error, 3 runtime error
//! (including an unreachable or overloaded server).

pub mod client;

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use siamface::data::{self, load_pgm, preprocess, DataError, FaceImage};
use siamface::gallery::{Gallery, GalleryError};
use siamface::nn::gradcheck::check_all_layers;
use siamface::siamese::{self, gradcheck_contrastive, SiameseError, TrainConfig};
use siamface::{euclidean_distance, Embedding, SiameseNetwork};
use siamface_service::{Components, ServiceConfig, ServiceError};

/// Environment variable naming the service config file for `serve`.
pub const CONFIG_ENV: &str = "SIAMFACE_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidArgument(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<SiameseError> for CliError {
    fn from(e: SiameseError) -> Self {
        match e {
            SiameseError::Data(d) => d.into(),
            SiameseError::InvalidArgument(_) => Self::Usage(e.to_string()),
            SiameseError::NonFiniteLoss { .. } | SiameseError::State(_) => Self::Runtime(e.to_string()),
            SiameseError::Nn(_) | SiameseError::Io { .. } => Self::Data(e.to_string()),
        }
    }
}

impl From<GalleryError> for CliError {
    fn from(e: GalleryError) -> Self {
        match e {
            GalleryError::InvalidArgument(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Config(_) | ServiceError::InvalidArgument(_) => Self::Usage(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "siamface", version, about = "Siamese face verification: training, matching and serving")]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network on a face corpus and write a checkpoint.
    Train(TrainArgs),
    /// Measure verification quality of a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Add embeddings to a gallery file.
    Enroll(EnrollArgs),
    /// Run the recognition service.
    Serve(ServeArgs),
    /// Stream frames from a directory, posting motion-triggered groups to a server.
    Client(ClientArgs),
    /// Embed two images and print their distance.
    Match(MatchArgs),
    /// Finite-difference gradient checks for every layer kind and the loss.
    Gradcheck(GradcheckArgs),
    /// Write a gallery as CSV.
    ExportGallery(ExportArgs),
    /// Build a gallery file from CSV.
    ImportGallery(ImportArgs),
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Corpus root with `s<subject>/<shot>.pgm` files.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub data: Option<PathBuf>,
    /// Use the generated stand-in corpus with this seed.
    #[arg(long)]
    pub synthetic: Option<u64>,
    /// Seed of the per-image train/test shuffle.
    #[arg(long, default_value_t = 1)]
    pub split_seed: u64,
    /// Fraction of images used for training.
    #[arg(long, default_value_t = 0.9)]
    pub train_fraction: f64,
}

impl CorpusArgs {
    pub fn load(&self) -> Result<data::DataSplit, CliError> {
        let images = match (&self.data, self.synthetic) {
            (Some(root), _) => data::load_corpus(root)?,
            (None, Some(seed)) => data::synth::corpus(seed),
            (None, None) => return Err(CliError::Usage("one of --data or --synthetic is required".into())),
        };
        Ok(data::split(images, self.split_seed, self.train_fraction)?)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Seeds weight initialisation and pair sampling.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 2.0)]
    pub margin: f64,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Where to record the split; defaults to `<out>.split.txt`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// Number of test pairs to sample.
    #[arg(long, default_value_t = 1000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Append the metrics as one JSON line to this file.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnrollArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// Single image to enroll; requires --id.
    #[arg(long, requires = "id", conflicts_with_all = ["data", "synthetic"])]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub id: Option<String>,
    /// Enroll a whole corpus, one user id per subject (`s<subject>`).
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub synthetic: Option<u64>,
    /// With a corpus, enroll only the training split of this seed.
    #[arg(long)]
    pub train_split: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Config file; overrides the SIAMFACE_CONFIG environment variable.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    #[arg(long)]
    pub users: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClientArgs {
    /// Directory of `.pgm` frames, read in file-name order.
    #[arg(long)]
    pub frames: PathBuf,
    /// Server base URL.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    pub server: String,
    /// Motion threshold on the mean absolute pixel difference, in [0, 1).
    #[arg(long, default_value_t = siamface::motion::DEFAULT_TAU)]
    pub tau: f64,
    /// Frames captured per motion event.
    #[arg(long, default_value_t = siamface::motion::DEFAULT_FRAMES_PER_EVENT)]
    pub frames_per_event: usize,
    #[arg(long, default_value_t = siamface::motion::DEFAULT_COOLDOWN_MS)]
    pub cooldown_ms: u64,
    /// Simulated time between consecutive frames.
    #[arg(long, default_value_t = 100)]
    pub frame_interval_ms: u64,
    /// Attempts after the first failed one before giving up.
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
    /// First retry delay; doubles on every attempt.
    #[arg(long, default_value_t = 200)]
    pub backoff_ms: u64,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random instances per layer kind.
    #[arg(long, default_value_t = 5)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
}

/// Parses `argv` (program name first), runs the verb and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let json = cli.json;
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            if json {
                let kind = match e {
                    CliError::Usage(_) => "usage",
                    CliError::Data(_) => "data",
                    CliError::Runtime(_) => "runtime",
                };
                eprintln!("{}", json!({ "error": kind, "message": e.to_string() }));
            } else {
                eprintln!("error: {e}");
            }
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let json = cli.json;
    match cli.command {
        Command::Train(a) => train(&a, json),
        Command::Eval(a) => eval(&a),
        Command::Enroll(a) => enroll(&a, json),
        Command::Serve(a) => serve(&a),
        Command::Client(a) => client::run(&a, json).map(|_| ()),
        Command::Match(a) => match_images(&a, json),
        Command::Gradcheck(a) => gradcheck(&a, json),
        Command::ExportGallery(a) => {
            let g = Gallery::load(&a.gallery)?;
            g.export_csv(&a.out)?;
            report(json, json!({ "records": g.len(), "out": a.out }), || {
                format!("exported {} records to {}", g.len(), a.out.display())
            });
            Ok(())
        }
        Command::ImportGallery(a) => {
            let mut g = Gallery::import_csv(&a.csv)?;
            g.save(&a.gallery)?;
            g = Gallery::load(&a.gallery)?;
            report(json, json!({ "records": g.len(), "gallery": a.gallery }), || {
                format!("imported {} records into {}", g.len(), a.gallery.display())
            });
            Ok(())
        }
    }
}

fn report(json: bool, value: serde_json::Value, text: impl FnOnce() -> String) {
    if json {
        println!("{value}");
    } else {
        println!("{}", text());
    }
}

fn train(a: &TrainArgs, json: bool) -> Result<(), CliError> {
    let split = a.corpus.load()?;
    let manifest = a.manifest.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".split.txt");
        PathBuf::from(p)
    });
    data::write_manifest(&split, &manifest)?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        momentum: a.momentum,
        margin: a.margin,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let mut net = SiameseNetwork::new(a.seed);
    let reports = siamese::train(&mut net, &split.train, &config, |r| {
        if json {
            println!("{}", json!({ "epoch": r.epoch, "loss": r.loss, "mean_loss": r.mean_loss }));
        } else {
            println!("{r}");
        }
    })?;
    net.save(&a.out)?;
    if json {
        println!(
            "{}",
            json!({ "checkpoint": a.out, "manifest": manifest, "epochs": reports.len() })
        );
    } else {
        println!("checkpoint written to {}", a.out.display());
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let split = a.corpus.load()?;
    let net = SiameseNetwork::load(&a.model)?;
    let metrics = siamese::evaluate(&net, &split.test, a.pairs, a.seed)?;
    let line = serde_json::to_string(&metrics).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(path) = &a.metrics {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        writeln!(f, "{line}").map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    println!("{line}");
    Ok(())
}

fn load_face(path: &Path) -> Result<FaceImage, CliError> {
    Ok(preprocess(&load_pgm(path)?)?)
}

fn enroll(a: &EnrollArgs, json: bool) -> Result<(), CliError> {
    let net = SiameseNetwork::load(&a.model)?;
    let mut gallery = Gallery::open(&a.gallery)?;
    let before = gallery.len();
    if let Some(image) = &a.image {
        let id = a.id.as_deref().unwrap_or_default();
        let e = net.embed(&load_face(image)?)?;
        gallery.enroll(id, e)?;
    } else {
        let images = match (&a.data, a.synthetic) {
            (Some(root), _) => data::load_corpus(root)?,
            (None, Some(seed)) => data::synth::corpus(seed),
            (None, None) => {
                return Err(CliError::Usage(
                    "one of --image, --data or --synthetic is required".into(),
                ))
            }
        };
        let images = match a.train_split {
            Some(seed) => data::split(images, seed, 0.9)?.train,
            None => images,
        };
        let refs: Vec<&FaceImage> = images.iter().collect();
        let embeddings = net.embed_batch(&refs)?;
        for (img, e) in images.iter().zip(embeddings) {
            gallery.enroll(&format!("s{}", img.subject_id), e)?;
        }
    }
    gallery.flush()?;
    let added = gallery.len() - before;
    report(json, json!({ "enrolled": added, "records": gallery.len() }), || {
        format!("enrolled {added} records; gallery now holds {}", gallery.len())
    });
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .try_init();
    let path = a.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut config = match &path {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    if let Some(h) = &a.host {
        config.host = h.clone();
    }
    if let Some(p) = a.port {
        config.port = p;
    }
    if a.model.is_some() {
        config.checkpoint_path = a.model.clone();
    }
    if a.gallery.is_some() {
        config.gallery_path = a.gallery.clone();
    }
    if a.users.is_some() {
        config.users_path = a.users.clone();
    }
    let parts = Components::from_config(&config)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(async {
        let svc = siamface_service::start(&config, parts).await?;
        eprintln!("listening on http://{}", svc.addr);
        tokio::signal::ctrl_c()
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        svc.stop().await.map_err(|e| CliError::Runtime(e.to_string()))
    })
}

/// Formats values like the tensor printout of the original scripts.
fn format_row(values: &[f32]) -> String {
    values.iter().map(|v| format!("{v:7.4}")).collect::<Vec<_>>().join(" ")
}

fn match_images(a: &MatchArgs, json: bool) -> Result<(), CliError> {
    let net = SiameseNetwork::load(&a.model)?;
    let ea = net.embed(&load_face(&a.a)?)?;
    let eb = net.embed(&load_face(&a.b)?)?;
    let d = euclidean_distance(&ea, &eb);
    if json {
        println!("{}", json!({ "a": ea, "b": eb, "distance": d }));
    } else {
        print_match(&ea, &eb, d);
    }
    Ok(())
}

fn print_match(a: &Embedding, b: &Embedding, d: f64) {
    println!("Vector of Face 1:\n{}\n", format_row(a.values()));
    println!("Vector of Face 2:\n{}\n", format_row(b.values()));
    println!("Distance between Face1 Vector and Face2 Vector:\n{d:.4}");
}

fn gradcheck(a: &GradcheckArgs, json: bool) -> Result<(), CliError> {
    let runtime = |e: &dyn std::fmt::Display| CliError::Runtime(e.to_string());
    let mut reports = check_all_layers(a.instances, a.seed).map_err(|e| runtime(&e))?;
    reports.push(gradcheck_contrastive(a.instances, a.seed).map_err(|e| runtime(&e))?);
    let all = reports.iter().all(|r| r.passed());
    if json {
        println!("{}", json!({ "passed": all, "reports": reports }));
    } else {
        for r in &reports {
            let verdict = if r.passed() { "ok" } else { "FAIL" };
            println!("{:<16} {:>3} instances  max rel error {:.3e}  {verdict}", r.name, r.instances, r.max_rel_error);
        }
    }
    if all {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}
