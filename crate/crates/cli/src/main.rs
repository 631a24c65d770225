use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use probemb::evaluation::{evaluate_model, uncertainty_report, PrecisionOptions, Protocol};
use probemb::io::write_atomic;
use probemb::synthetic::{generate_synthetic, load_composer, SyntheticSpec};
use probemb::training::{train, TrainConfig, TrainConfigFile};
use probemb::triplet_lab::{
    load_manifest, load_regions, manifest_to_jsonl, sample_triplets, selection_experiment, threshold_sweep,
    CropFeatureSource, SWEEP_THRESHOLDS,
};
use probemb::{
    init_model, load_checkpoint, save_checkpoint, CovarianceShape, FeatureDataset, ModelConfig, ProbModel,
    SimilarityMetric, Split,
};

const THREADS_VAR: &str = "PROBEMB_THREADS";

#[derive(Parser)]
#[command(
    name = "probemb",
    version,
    about = "Probabilistic cross-modal embeddings over precomputed features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ambiguity.
    Gen(GenArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Evaluate retrieval with a trained checkpoint.
    Eval(EvalArgs),
    /// Write the per-item uncertainty table of a dataset.
    Uncertainty(UncertaintyArgs),
    /// Build crop triplets from region annotations.
    Triplets(TripletsArgs),
    /// Mean uncertainty of crops and captions across area thresholds.
    Sweep(SweepArgs),
    /// Binary selection accuracy over a triplet manifest.
    Select(SelectArgs),
    /// Train every metric and covariance shape and compare validation rsum.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenArgs {
    /// JSON generator spec; omitted fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ModelArgs {
    /// JSON training config holding every optimiser field plus metric and shape.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Similarity metric when no config file is given.
    #[arg(long, conflicts_with = "config")]
    metric: Option<SimilarityMetric>,
    /// Covariance shape when no config file is given.
    #[arg(long, conflicts_with = "config")]
    shape: Option<CovarianceShape>,
    /// Joint embedding dimension.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Overrides the config's seed (initialisation and shuffling).
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch count override.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Training split directory.
    #[arg(long)]
    train: PathBuf,
    /// Validation split directory.
    #[arg(long)]
    val: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON training history.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Freeze variances at 1, giving a point-embedding baseline.
    #[arg(long)]
    point: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset split directory.
    #[arg(long)]
    data: PathBuf,
    /// `full` or `1k5fold`.
    #[arg(long, default_value = "full")]
    protocol: Protocol,
    /// Images per fold under the five-fold protocol.
    #[arg(long, default_value_t = 1000)]
    fold_size: usize,
    /// Also report plausible-match R-Precision.
    #[arg(long)]
    pmrp: bool,
    /// Also report R-Precision over extended positives.
    #[arg(long)]
    rpc2: bool,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV report path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct UncertaintyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TripletsArgs {
    /// Region annotations, one JSON image per line.
    #[arg(long)]
    regions: PathBuf,
    /// Feature composer; when given, triplets carry features.
    #[arg(long)]
    composer: Option<PathBuf>,
    /// Area threshold as a fraction of the image area.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    regions: PathBuf,
    #[arg(long)]
    composer: PathBuf,
    /// Images sampled per threshold.
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Curve CSV output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Triplet manifest with features.
    #[arg(long)]
    manifest: PathBuf,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// JSON training config; its metric and shape are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// CSV table path.
    #[arg(long)]
    out: PathBuf,
    /// Where to save the selected model.
    #[arg(long)]
    best: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Library(probemb::Error),
}

impl From<probemb::Error> for Failure {
    fn from(e: probemb::Error) -> Self {
        if e.is_data_error() {
            Failure::Library(e)
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn write_text(path: &Path, text: &str) -> CliResult {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::Library(probemb::Error::InvalidInput(format!("{}: {e}", path.display()))))
}

fn load_split(dir: &Path, split: Split) -> CliResult<FeatureDataset> {
    Ok(FeatureDataset::load(dir, split)?)
}

fn resolve_training(args: &ModelArgs) -> CliResult<(TrainConfig, SimilarityMetric, CovarianceShape)> {
    let (mut config, metric, shape) = match &args.config {
        Some(path) => {
            let file = TrainConfigFile::parse(&read_text(path)?)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            (file.train_config(), file.metric, file.shape)
        }
        None => (
            TrainConfig::default(),
            args.metric.unwrap_or(SimilarityMetric::NegWasserstein2),
            args.shape.unwrap_or(CovarianceShape::Ellipsoidal),
        ),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
        config.decay_epoch = config.decay_epoch.min(epochs);
    }
    config.validate()?;
    Ok((config, metric, shape))
}

fn fresh_model(
    train_set: &FeatureDataset,
    dim: usize,
    metric: SimilarityMetric,
    shape: CovarianceShape,
    point: bool,
    seed: u64,
) -> CliResult<ProbModel> {
    let config = ModelConfig {
        image_dim: train_set.image_dim(),
        caption_dim: train_set.caption_dim(),
        joint_dim: dim,
        shape,
        metric,
        frozen_unit_variance: point,
    };
    Ok(init_model(&config, seed)?)
}

fn gen(args: GenArgs) -> CliResult {
    let mut spec: SyntheticSpec = match &args.spec {
        Some(path) => serde_json::from_str(&read_text(path)?)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let data = generate_synthetic(&spec)?;
    data.save(&args.out)?;
    println!(
        "wrote {} train, {} val, {} test images and {} region images to {}",
        data.train.dataset.num_images(),
        data.val.dataset.num_images(),
        data.test.dataset.num_images(),
        data.regions.len(),
        args.out.display()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> CliResult {
    let (config, metric, shape) = resolve_training(&args.model)?;
    let train_set = load_split(&args.train, Split::Train)?;
    let val_set = load_split(&args.val, Split::Val)?;
    let model = fresh_model(&train_set, args.model.dim, metric, shape, args.point, config.seed)?;
    let (best, history) = train(&model, &train_set, &val_set, &config)?;
    save_checkpoint(&args.out, &best)?;
    if let Some(path) = &args.history {
        write_text(
            path,
            &serde_json::to_string_pretty(&history).expect("serializable"),
        )?;
    }
    match history.best_epoch {
        Some(e) => println!(
            "selected epoch {e} with validation rsum {:.1}",
            history.val_rsum[e]
        ),
        None => println!("no epochs run; saved the initial model"),
    }
    Ok(())
}

fn eval(args: EvalArgs) -> CliResult {
    let model = load_checkpoint(&args.checkpoint)?;
    let data = load_split(&args.data, Split::Test)?;
    let options = PrecisionOptions {
        pmrp: args.pmrp,
        rpc2: args.rpc2,
    };
    let report = evaluate_model(&model, &data, args.protocol, args.fold_size, options)?;
    if let Some(path) = &args.out {
        write_text(
            path,
            &serde_json::to_string_pretty(&report).expect("serializable"),
        )?;
    }
    if let Some(path) = &args.csv {
        let mut text = format!("{}\n", probemb::RetrievalReport::CSV_HEADER);
        for row in report.csv_rows() {
            text.push_str(&row);
            text.push('\n');
        }
        write_text(path, &text)?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn uncertainty_cmd(args: UncertaintyArgs) -> CliResult {
    let model = load_checkpoint(&args.checkpoint)?;
    let data = load_split(&args.data, Split::Test)?;
    let report = uncertainty_report(&model, &data)?;
    write_text(&args.out, &report.to_csv())?;
    println!(
        "{} items; uncertainty min {:.3} median {:.3} max {:.3}",
        report.rows.len(),
        report.min,
        report.median,
        report.max
    );
    Ok(())
}

fn triplets_cmd(args: TripletsArgs) -> CliResult {
    let images = load_regions(&args.regions)?;
    let composer = args.composer.as_deref().map(load_composer).transpose()?;
    let source = composer.as_ref().map(|c| c as &dyn CropFeatureSource);
    let triplets = sample_triplets(&images, source, args.threshold, args.count, args.seed)?;
    if triplets.len() < args.count {
        eprintln!(
            "warning: only {} of {} requested images have enough small regions",
            triplets.len(),
            args.count
        );
    }
    write_text(&args.out, &manifest_to_jsonl(&triplets))?;
    println!("wrote {} triplets", triplets.len());
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> CliResult {
    let model = load_checkpoint(&args.checkpoint)?;
    let images = load_regions(&args.regions)?;
    let composer = load_composer(&args.composer)?;
    let result = threshold_sweep(
        &model,
        &images,
        &composer,
        &SWEEP_THRESHOLDS,
        args.samples,
        args.seed,
    )?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    write_text(&args.out, &result.to_csv())?;
    print!("{}", result.to_csv());
    Ok(())
}

fn select_cmd(args: SelectArgs) -> CliResult {
    let model = load_checkpoint(&args.checkpoint)?;
    let triplets = load_manifest(&args.manifest)?;
    let report = selection_experiment(&model, &triplets)?;
    if let Some(path) = &args.out {
        write_text(path, &report.to_csv())?;
    }
    println!("{:<16} {:>8} {:>8}", "", "A", "C");
    println!(
        "{:<16} {:>8.1} {:>8.1}",
        "image-to-text", report.crop_a, report.crop_c
    );
    println!(
        "{:<16} {:>8.1} {:>8.1}",
        "text-to-image", report.caption_a, report.caption_c
    );
    println!("{} triplets", report.count);
    Ok(())
}

fn ablate(args: AblateArgs) -> CliResult {
    let model_args = ModelArgs {
        config: args.config.clone(),
        metric: None,
        shape: None,
        dim: args.dim,
        seed: args.seed,
        epochs: args.epochs,
    };
    let (config, _, _) = resolve_training(&model_args)?;
    let train_set = load_split(&args.train, Split::Train)?;
    let val_set = load_split(&args.val, Split::Val)?;
    let mut text = String::from("metric,shape,i2t_r1,i2t_r5,i2t_r10,t2i_r1,t2i_r5,t2i_r10,rsum,selected\n");
    let mut rows = Vec::new();
    let mut best: Option<(usize, f64, ProbModel)> = None;
    for metric in SimilarityMetric::ALL {
        for shape in CovarianceShape::ALL {
            let model = fresh_model(&train_set, args.dim, metric, shape, false, config.seed)?;
            let (trained, _) = train(&model, &train_set, &val_set, &config)?;
            let report = evaluate_model(&trained, &val_set, Protocol::Full, 0, PrecisionOptions::default())?;
            if best.as_ref().is_none_or(|b| report.rsum > b.1) {
                best = Some((rows.len(), report.rsum, trained));
            }
            rows.push((metric, shape, report));
        }
    }
    let (best_row, _, best_model) = best.expect("grid is non-empty");
    for (i, (metric, shape, r)) in rows.iter().enumerate() {
        let (a, b) = (&r.image_to_text, &r.text_to_image);
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            metric.name(),
            shape.name(),
            a.r1,
            a.r5,
            a.r10,
            b.r1,
            b.r5,
            b.r10,
            r.rsum,
            u8::from(i == best_row)
        ));
        println!(
            "{:<24} {:<20} rsum {:>6.1}{}",
            metric.name(),
            shape.name(),
            r.rsum,
            if i == best_row { "  *" } else { "" }
        );
    }
    write_text(&args.out, &text)?;
    if let Some(path) = &args.best {
        save_checkpoint(path, &best_model)?;
    }
    Ok(())
}

fn configure_threads() -> CliResult {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize =
        value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Failure::Usage(format!("{THREADS_VAR} must be a positive integer, got `{value}`"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn run(cli: Cli) -> CliResult {
    configure_threads()?;
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Uncertainty(a) => uncertainty_cmd(a),
        Command::Triplets(a) => triplets_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Select(a) => select_cmd(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Library(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
