//! Command-line front end.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sonalyzer::annotations::{
    boundaries_of, parse_annotation, split_dataset, synth_fixture, write_fixture, BoundarySet,
    FixtureFormat, Level, Manifest, SplitAssignment, SplitRatios, Subset,
};
use sonalyzer::config::RunConfig;
use sonalyzer::metrics::{self, aggregate_report, DEFAULT_TOLERANCE_S};
use sonalyzer::network::{load_checkpoint, save_checkpoint, Checkpoint};
use sonalyzer::pipeline::{self, load_pieces, PieceData};
use sonalyzer::postprocess::{read_predictions, write_predictions, Prediction};
use sonalyzer::training::{self, EpochLog, GridSpec, TrainSetup};
use sonalyzer::variants::{ablation_tsv, run_ablation, VariantRegistry};
use sonalyzer::{plot, Error};

/// Exit codes.
const EXIT_FINDINGS: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

#[derive(Parser)]
#[command(name = "sonalyzer", version, about = "Sonata-form structure boundary detection")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set model.channels=4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Manifest validation, splitting and synthetic fixtures.
    Dataset {
        #[command(subcommand)]
        action: DatasetCommand,
    },
    /// Computes mel features for every manifest entry into the cache.
    Featurize {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Cache directory (defaults to the configured or environment one).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains on the train subset, selecting by validation HR3F.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predicts boundaries with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "audio")]
        manifest: Option<PathBuf>,
        /// A single audio or `.mel` file.
        #[arg(long)]
        audio: Option<PathBuf>,
        #[command(flatten)]
        subset: SubsetArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores predictions against reference annotations.
    Evaluate {
        /// Prediction file or directory of prediction files.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        subset: SubsetArgs,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE_S)]
        tolerance: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Renders an annotation (and optional predictions) as an SVG timeline.
    Plot {
        #[arg(long)]
        annotation: PathBuf,
        #[arg(long)]
        prediction: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains every (C, h_lstm, L_lstm) combination and ranks by validation HR3F.
    Gridsearch {
        #[arg(long, value_delimiter = ',', required = true)]
        channels: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        hidden: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains the full model and the six single-stage removals; scores on the test subset.
    Ablate {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE_S)]
        tolerance: f64,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Checks every record; findings go to standard output.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Assigns whole pieces to train/val/test.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Ratios as `train:val:test`.
        #[arg(long, default_value = "8:1:1")]
        ratios: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes a synthetic annotated fixture set.
    Synth {
        #[arg(long)]
        pieces: usize,
        #[arg(long)]
        versions: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Mel)]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Mel,
    Wav,
}

#[derive(Args)]
struct SubsetArgs {
    /// Split file restricting the manifest to one subset.
    #[arg(long, requires = "subset")]
    split: Option<PathBuf>,
    #[arg(long, value_parser = parse_subset)]
    subset: Option<Subset>,
}

fn parse_subset(s: &str) -> Result<Subset, String> {
    match s {
        "train" => Ok(Subset::Train),
        "val" => Ok(Subset::Val),
        "test" => Ok(Subset::Test),
        _ => Err(format!("unknown subset {s:?} (train, val or test)")),
    }
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Json(_) | Error::Audio { .. } | Error::UnsupportedCodec(_) | Error::EmptyAudio(_) => {
                EXIT_IO
            }
            Error::Annotation(_) | Error::InvalidInput(_) | Error::Leakage(_) => EXIT_FINDINGS,
            Error::Divergence { .. } | Error::NonFiniteGradient(_) => EXIT_DIVERGENCE,
            Error::Config(_) | Error::Checkpoint(_) | Error::ConfigMismatch(_) => EXIT_MISMATCH,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let config = || -> Result<RunConfig, Failure> {
        Ok(match &cli.config {
            Some(p) => RunConfig::load(p, &cli.overrides)?,
            None => RunConfig::from_overrides(&cli.overrides)?,
        })
    };
    match cli.command {
        Command::Dataset { action } => dataset(action, &config()?),
        Command::Featurize { manifest, out } => featurize(&config()?, manifest, out),
        Command::Train { out, resume } => train(config()?, out, resume),
        Command::Predict {
            checkpoint,
            manifest,
            audio,
            subset,
            out,
        } => predict((cli.config.is_some() || !cli.overrides.is_empty()).then(config).transpose()?, &checkpoint, manifest, audio, &subset, &out),
        Command::Evaluate {
            predictions,
            manifest,
            subset,
            tolerance,
            out,
        } => evaluate(&config()?, &predictions, manifest, &subset, tolerance, &out),
        Command::Plot {
            annotation,
            prediction,
            out,
        } => plot_cmd(&annotation, prediction.as_deref(), &out),
        Command::Gridsearch {
            channels,
            hidden,
            layers,
            out,
        } => gridsearch(
            config()?,
            GridSpec {
                channels,
                lstm_hidden: hidden,
                lstm_layers: layers,
            },
            out,
        ),
        Command::Ablate { out, tolerance } => ablate(config()?, out, tolerance),
    }
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(EXIT_IO, format!("I/O error on {}: {e}", path.display()))
}

fn required<'a>(value: Option<&'a PathBuf>, what: &str) -> Result<&'a PathBuf, Failure> {
    value.ok_or_else(|| Failure::new(EXIT_IO, format!("no {what} given (flag or paths.* config key)")))
}

fn cache_dir(config: &RunConfig) -> Option<PathBuf> {
    config.paths.cache_dir.clone().or_else(pipeline::cache_dir_from_env)
}

fn dataset(action: DatasetCommand, config: &RunConfig) -> CmdResult {
    match action {
        DatasetCommand::Validate { manifest } => {
            let (m, findings) = Manifest::load_lenient(&manifest)?;
            let mut out = std::io::stdout().lock();
            for f in &findings {
                let _ = writeln!(out, "{f}");
            }
            if findings.is_empty() {
                let _ = writeln!(out, "ok: {} records, {} pieces", m.entries.len(), m.piece_ids().len());
                Ok(())
            } else {
                Err(Failure::new(EXIT_FINDINGS, format!("{} finding(s)", findings.len())))
            }
        }
        DatasetCommand::Split {
            manifest,
            seed,
            ratios,
            out,
        } => {
            let m = Manifest::load(&manifest)?;
            let split = split_dataset(&m, parse_ratios(&ratios)?, seed)?;
            write_file(&out, &split.to_json())?;
            println!(
                "train {} / val {} / test {} pieces",
                split.count(Subset::Train),
                split.count(Subset::Val),
                split.count(Subset::Test)
            );
            Ok(())
        }
        DatasetCommand::Synth {
            pieces,
            versions,
            seed,
            format,
            out,
        } => {
            let fixture = synth_fixture(pieces, versions, seed)?;
            let format = match format {
                Format::Mel => FixtureFormat::Mel,
                Format::Wav => FixtureFormat::Wav,
            };
            let manifest = write_fixture(&out, &fixture, format, &config.dsp)?;
            println!("{} recordings; manifest {}", fixture.items.len(), manifest.display());
            Ok(())
        }
    }
}

fn parse_ratios(s: &str) -> Result<SplitRatios, Failure> {
    let parts: Vec<u32> = s
        .split(':')
        .map(|p| p.trim().parse::<u32>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::new(EXIT_MISMATCH, format!("bad ratios {s:?}")))?;
    let arr: [u32; 3] = parts
        .try_into()
        .map_err(|_| Failure::new(EXIT_MISMATCH, format!("ratios {s:?} need three parts")))?;
    Ok(SplitRatios(arr))
}

fn featurize(config: &RunConfig, manifest: Option<PathBuf>, out: Option<PathBuf>) -> CmdResult {
    let manifest = manifest.or_else(|| config.paths.manifest.clone());
    let m = Manifest::load(required(manifest.as_ref(), "manifest")?)?;
    let cache = out.or_else(|| cache_dir(config));
    let pieces = load_pieces(&m, &config.dsp, cache.as_deref())?;
    let frames: usize = pieces.iter().map(|p| p.mel.ncols()).sum();
    println!(
        "{} recordings, {frames} frames{}",
        pieces.len(),
        cache.map(|c| format!(", cached in {}", c.display())).unwrap_or_default()
    );
    Ok(())
}

/// Train/val/test piece data under the configured manifest and split.
fn load_split(config: &RunConfig) -> Result<[Vec<PieceData>; 3], Failure> {
    let manifest_path = required(config.paths.manifest.as_ref(), "manifest")?;
    let split_path = required(config.paths.split.as_ref(), "split")?;
    let manifest = Manifest::load(manifest_path)?;
    let text = std::fs::read_to_string(split_path).map_err(|e| io_failure(split_path, e))?;
    let split = SplitAssignment::from_json(&text)?;
    split.check_covers(&manifest)?;
    let cache = cache_dir(config);
    let load = |s| load_pieces(&manifest.subset(&split, s), &config.dsp, cache.as_deref());
    Ok([load(Subset::Train)?, load(Subset::Val)?, load(Subset::Test)?])
}

fn out_dir(flag: Option<PathBuf>, config: &RunConfig, default: &str) -> PathBuf {
    flag.or_else(|| config.paths.out_dir.clone()).unwrap_or_else(|| PathBuf::from(default))
}

fn train(mut config: RunConfig, out: Option<PathBuf>, resume: Option<PathBuf>) -> CmdResult {
    if resume.is_some() {
        config.paths.resume = resume;
    }
    let out = out_dir(out, &config, "run");
    let model = config.effective_model()?;
    let [train_set, val_set, _] = load_split(&config)?;
    let resume = match &config.paths.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            ck.check_compatible(&model, &config.dsp)?;
            Some(ck)
        }
        None => None,
    };
    config.echo_to(&out)?;
    let log_path = out.join("train_log.tsv");
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| io_failure(&log_path, e))?;
    let _ = writeln!(log_file, "{}", EpochLog::TSV_HEADER);
    let setup = TrainSetup {
        model: &model,
        train: &config.train,
        post: &config.post,
        dsp: &config.dsp,
        resume: resume.as_ref(),
    };
    let outcome = training::train(&train_set, &val_set, &setup, |row| {
        let _ = writeln!(log_file, "{}", row.tsv_row());
        let _ = log_file.flush();
    })?;
    let ck_path = out.join("checkpoint.ckpt");
    save_checkpoint(&ck_path, &outcome.checkpoint)?;
    println!(
        "best epoch {} (val HR3F {:.4}){}; checkpoint {}",
        outcome.checkpoint.epoch,
        outcome.checkpoint.best_val_hr3f,
        if outcome.early_stopped { ", stopped early" } else { "" },
        ck_path.display()
    );
    Ok(())
}

fn predict(
    config: Option<RunConfig>,
    checkpoint: &Path,
    manifest: Option<PathBuf>,
    audio: Option<PathBuf>,
    subset: &SubsetArgs,
    out: &Path,
) -> CmdResult {
    let ck: Checkpoint = load_checkpoint(checkpoint)?;
    let (dsp, post) = match &config {
        Some(c) => {
            ck.check_compatible(&c.effective_model()?, &c.dsp)?;
            (c.dsp.clone(), c.post.clone())
        }
        None => (ck.dsp.clone(), ck.post.clone()),
    };
    let cache = config.as_ref().and_then(cache_dir).or_else(pipeline::cache_dir_from_env);
    let predictions = if let Some(audio) = audio {
        let mel = pipeline::model_input(pipeline::linear_mel(&audio, &dsp, cache.as_deref())?, &dsp, &audio)?;
        let (probs, bounds) = pipeline::predict_mel(&mel, &ck.params, &ck.model, &post, &dsp)?;
        vec![Prediction {
            piece_id: audio.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            version_id: String::new(),
            boundaries_s: bounds.times().to_vec(),
            probs,
        }]
    } else {
        let manifest = manifest.or_else(|| config.as_ref().and_then(|c| c.paths.manifest.clone()));
        let m = restrict(Manifest::load(required(manifest.as_ref(), "manifest or audio")?)?, subset)?;
        let pieces = load_pieces(&m, &dsp, cache.as_deref())?;
        pipeline::predict_pieces(&pieces, &ck.params, &ck.model, &post, &dsp)?
    };
    let per_piece = out.join("pieces");
    std::fs::create_dir_all(&per_piece).map_err(|e| io_failure(&per_piece, e))?;
    for p in &predictions {
        write_predictions(&per_piece.join(format!("{}.json", p.file_stem())), std::slice::from_ref(p))?;
    }
    write_predictions(&out.join("predictions.json"), &predictions)?;
    if let Some(c) = &config {
        c.echo_to(out)?;
    }
    println!("{} prediction(s) in {}", predictions.len(), out.display());
    Ok(())
}

fn restrict(manifest: Manifest, subset: &SubsetArgs) -> Result<Manifest, Failure> {
    match (&subset.split, subset.subset) {
        (Some(path), Some(s)) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            let split = SplitAssignment::from_json(&text)?;
            split.check_covers(&manifest)?;
            Ok(manifest.subset(&split, s))
        }
        _ => Ok(manifest),
    }
}

/// Predictions from one file or every `*.json` in a directory.
fn collect_predictions(path: &Path) -> Result<Vec<Prediction>, Failure> {
    if !path.is_dir() {
        return Ok(read_predictions(path)?);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| io_failure(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut all = Vec::new();
    for f in files {
        all.extend(read_predictions(&f)?);
    }
    Ok(all)
}

fn evaluate(
    config: &RunConfig,
    predictions: &Path,
    manifest: Option<PathBuf>,
    subset: &SubsetArgs,
    tolerance: f64,
    out: &Path,
) -> CmdResult {
    let manifest = manifest.or_else(|| config.paths.manifest.clone());
    let m = restrict(Manifest::load(required(manifest.as_ref(), "manifest")?)?, subset)?;
    let mut preds: BTreeMap<(String, String), Prediction> = BTreeMap::new();
    let mut problems = Vec::new();
    for p in collect_predictions(predictions)? {
        let key = p.key();
        if preds.insert(key.clone(), p).is_some() {
            problems.push(format!("duplicate prediction for {}/{}", key.0, key.1));
        }
    }
    let mut rows = Vec::new();
    for r in m.records() {
        match preds.remove(&r.key()) {
            Some(p) => {
                let reference = boundaries_of(r, Level::Structure).map_err(Error::from)?;
                let est = BoundarySet::from_unsorted(p.boundaries_s);
                rows.push(metrics::evaluate_piece(&r.piece_id, &r.version_id, &reference, &est, tolerance));
            }
            None => problems.push(format!("no prediction for {}/{}", r.piece_id, r.version_id)),
        }
    }
    problems.extend(preds.keys().map(|(p, v)| format!("prediction {p}/{v} has no reference")));
    if !problems.is_empty() {
        for p in &problems {
            println!("{p}");
        }
        return Err(Failure::new(EXIT_FINDINGS, format!("{} key mismatch(es)", problems.len())));
    }
    let report = aggregate_report(rows, tolerance)?;
    write_file(&out.join("report.json"), &report.to_json())?;
    write_file(&out.join("report.tsv"), &report.to_tsv())?;
    let s = report.macro_avg;
    println!(
        "macro HR3P {:.2} HR3R {:.2} HR3F {:.2} over {} recording(s)",
        100.0 * s.precision,
        100.0 * s.recall,
        100.0 * s.f,
        report.pieces.len()
    );
    Ok(())
}

fn plot_cmd(annotation: &Path, prediction: Option<&Path>, out: &Path) -> CmdResult {
    let text = std::fs::read_to_string(annotation).map_err(|e| io_failure(annotation, e))?;
    let record = parse_annotation(&text).map_err(Error::from)?;
    let pred = match prediction {
        Some(p) => {
            let all = read_predictions(p)?;
            let found = all
                .iter()
                .find(|x| x.key() == record.key())
                .or(if all.len() == 1 { all.first() } else { None })
                .ok_or_else(|| Failure::new(EXIT_FINDINGS, format!("no prediction for {}/{}", record.piece_id, record.version_id)))?;
            Some(found.boundaries_s.clone())
        }
        None => None,
    };
    write_file(out, &plot::timeline_svg(&record, pred.as_deref())?)
}

fn gridsearch(config: RunConfig, grid: GridSpec, out: Option<PathBuf>) -> CmdResult {
    let out = out_dir(out, &config, "grid");
    let model = config.effective_model()?;
    let [train_set, val_set, _] = load_split(&config)?;
    config.echo_to(&out)?;
    let setup = TrainSetup {
        model: &model,
        train: &config.train,
        post: &config.post,
        dsp: &config.dsp,
        resume: None,
    };
    let rows = training::grid_search(&grid, &train_set, &val_set, &setup)?;
    let table = training::grid_tsv(&rows);
    write_file(&out.join("grid.tsv"), &table)?;
    write_file(
        &out.join("grid.json"),
        &serde_json::to_string_pretty(&rows).expect("rows serialize"),
    )?;
    print!("{table}");
    Ok(())
}

fn ablate(config: RunConfig, out: Option<PathBuf>, tolerance: f64) -> CmdResult {
    let out = out_dir(out, &config, "ablation");
    let [train_set, val_set, test_set] = load_split(&config)?;
    if test_set.is_empty() {
        return Err(Failure::new(EXIT_FINDINGS, "the test subset is empty"));
    }
    config.echo_to(&out)?;
    let setup = TrainSetup {
        model: &config.model,
        train: &config.train,
        post: &config.post,
        dsp: &config.dsp,
        resume: None,
    };
    let rows = run_ablation(&VariantRegistry::standard(), &train_set, &val_set, &test_set, &setup, tolerance)?;
    let table = ablation_tsv(&rows);
    write_file(&out.join("ablation.tsv"), &table)?;
    write_file(
        &out.join("ablation.json"),
        &serde_json::to_string_pretty(&rows).expect("rows serialize"),
    )?;
    print!("{table}");
    if let Some(full) = rows.iter().find(|r| r.variant == "full") {
        println!(
            "{}\t{:.2}\t{:.2}\t{:.2}",
            full.label,
            100.0 * full.test.precision,
            100.0 * full.test.recall,
            100.0 * full.test.f
        );
    }
    Ok(())
}
