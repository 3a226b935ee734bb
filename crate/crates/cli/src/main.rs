//! Command-line front end for the detection pipeline.
//!
//! Subcommands cover the full loop: generate synthetic data, train, decode
//! predictions, score them, profile the errors, verify gradients and dump
//! embedding similarities. A JSON config file supplies defaults; flags
//! override individual values. Exit codes: 0 success, 1 bad input, 2
//! runtime failure.

mod gradcheck;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tags_core::config::RunConfig;
use tags_core::data::{
    generate_synthetic, read_annotations, read_features, read_predictions, write_annotations,
    write_features, write_predictions, AnnotationSet, Subset, SyntheticSpec,
};
use tags_core::eval::{fp_profile, map_report, similarity_dump};
use tags_core::infer::{candidates_to_predictions, detect};
use tags_core::model::{forward_outputs, ModelShape};
use tags_core::train::{prepare_video, read_checkpoint, train, TrainVideo};
use tags_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tags", version, about = "Temporal action detection on snippet features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset of features and annotations.
    Synth(SynthArgs),
    /// Train a model and write the checkpoint plus a loss log.
    Train(TrainArgs),
    /// Decode detections from a checkpoint over a dataset.
    Infer(InferArgs),
    /// Score predictions against ground truth (mAP over a tIoU grid).
    Eval(EvalArgs),
    /// Break down the top predictions into TP / localization / background.
    ProfileFp(ProfileFpArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Dump the pairwise snippet-similarity matrix of one video.
    Simdump(SimdumpArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (features/ subdirectory plus annotations.json).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    videos: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    snippets: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Feature noise level.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Relabel the last N videos as the validation subset.
    #[arg(long, default_value_t = 0)]
    val: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory as written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.tagc and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// JSON run config supplying defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Temporal scales, e.g. --scales 1,2,4.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory as written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for predictions.json.
    #[arg(long)]
    out: PathBuf,
    /// JSON run config (SoftNMS settings).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Restrict to one subset of the dataset.
    #[arg(long, value_enum, default_value_t = SubsetArg::All)]
    subset: SubsetArg,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions JSON written by `infer`.
    #[arg(long)]
    preds: PathBuf,
    /// Ground-truth annotations JSON.
    #[arg(long)]
    gt: PathBuf,
    /// tIoU grid, e.g. --tious 0.5,0.75,0.95.
    #[arg(long, value_delimiter = ',')]
    tious: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = SubsetArg::All)]
    subset: SubsetArg,
    /// Also write report.json and map.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileFpArgs {
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Matching threshold separating TP from localization error.
    #[arg(long, default_value_t = 0.5)]
    tiou: f64,
    #[arg(long, value_enum, default_value_t = SubsetArg::All)]
    subset: SubsetArg,
    /// Also write fp_profile.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of random configurations to probe.
    #[arg(long, default_value_t = 20)]
    configs: usize,
    /// Maximum admissible relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct SimdumpArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Video id whose base-scale embedding to compare pairwise.
    #[arg(long)]
    video: String,
    /// Output file (binary matrix format).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SubsetArg {
    Train,
    Val,
    Test,
    All,
}

impl SubsetArg {
    fn matches(self, subset: Subset) -> bool {
        match self {
            SubsetArg::Train => subset == Subset::Train,
            SubsetArg::Val => subset == Subset::Val,
            SubsetArg::Test => subset == Subset::Test,
            SubsetArg::All => true,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Covers --help/--version too, which are "errors" to clap but
            // successes to the shell.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth(args) => synth(args)?,
        Command::Train(args) => run_train(args)?,
        Command::Infer(args) => infer(args)?,
        Command::Eval(args) => eval(args)?,
        Command::ProfileFp(args) => profile_fp(args)?,
        Command::Gradcheck(args) => return gradcheck_cmd(args),
        Command::Simdump(args) => simdump(args)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path)?;
    let config: RunConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })?;
    config.validate()?;
    Ok(config)
}

fn features_path(data: &Path, video_id: &str) -> PathBuf {
    data.join("features").join(format!("{video_id}.tagf"))
}

fn restrict(ann: &AnnotationSet, subset: SubsetArg) -> AnnotationSet {
    AnnotationSet {
        classes: ann.classes.clone(),
        videos: ann
            .videos
            .iter()
            .filter(|(_, v)| subset.matches(v.subset))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_videos: args.videos,
        num_classes: args.classes,
        snippets: args.snippets,
        dim: args.dim,
        noise_sigma: args.noise,
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    if args.val > args.videos {
        return Err(Error::InvalidConfig(format!(
            "--val {} exceeds --videos {}",
            args.val, args.videos
        )));
    }
    let (features, mut annotations) = generate_synthetic(&spec)?;
    // The generator labels everything Train; the tail becomes validation.
    let val_ids: Vec<String> = features
        .iter()
        .rev()
        .take(args.val)
        .map(|f| f.video_id.clone())
        .collect();
    for id in &val_ids {
        annotations.videos.get_mut(id).expect("generated id").subset = Subset::Val;
    }
    let features_dir = args.out.join("features");
    fs::create_dir_all(&features_dir)?;
    for seq in &features {
        write_features(&features_path(&args.out, &seq.video_id), seq)?;
    }
    write_annotations(&args.out.join("annotations.json"), &annotations)?;
    println!(
        "wrote {} videos ({} validation) to {}",
        features.len(),
        val_ids.len(),
        args.out.display()
    );
    Ok(())
}

/// Loads the features of every annotated video in the subset and pairs
/// them with per-scale targets.
fn load_videos(
    data: &Path,
    annotations: &AnnotationSet,
    subset: SubsetArg,
    shape: &ModelShape,
) -> Result<Vec<TrainVideo>> {
    let mut videos = Vec::new();
    for (id, video) in &annotations.videos {
        if !subset.matches(video.subset) {
            continue;
        }
        let seq = read_features(&features_path(data, id))?;
        videos.push(prepare_video(&seq, annotations, shape)?);
    }
    Ok(videos)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let mut train_cfg = config.train;
    if let Some(epochs) = args.epochs {
        train_cfg.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        train_cfg.learning_rate = lr;
    }
    if let Some(batch) = args.batch_size {
        train_cfg.batch_size = batch;
    }
    if let Some(scales) = args.scales {
        train_cfg.scales = scales;
    }
    if let Some(seed) = args.seed {
        train_cfg.seed = seed;
    }
    train_cfg.validate()?;

    let annotations = read_annotations(&args.data.join("annotations.json"))?;
    let shape = ModelShape::new(&train_cfg, &config.encoder, annotations.num_classes())?;
    let videos = load_videos(&args.data, &annotations, SubsetArg::Train, &shape)?;
    fs::create_dir_all(&args.out)?;
    let checkpoint = args.out.join("model.tagc");
    let metrics_csv = args.out.join("metrics.csv");
    let outcome = train(
        &videos,
        &shape,
        &train_cfg,
        args.workers,
        Some(&checkpoint),
        Some(&metrics_csv),
    )?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "epoch {}: total {:.6} (L_c {:.6}, L_m {:.6}, L_pp {:.6}, L_fc {:.6})",
            last.epoch,
            last.terms.total(),
            last.terms.classification,
            last.terms.mask,
            last.terms.promotion,
            last.terms.consistency
        );
    }
    println!("checkpoint written to {}", checkpoint.display());
    Ok(())
}

fn infer(args: InferArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let (params, train_cfg) = read_checkpoint(&args.model)?;
    let shape = ModelShape::infer(params.tensors(), &train_cfg)?;
    let annotations = read_annotations(&args.data.join("annotations.json"))?;
    let mut predictions = Vec::new();
    let mut videos = 0usize;
    for (id, video) in &annotations.videos {
        if !args.subset.matches(video.subset) {
            continue;
        }
        let seq = read_features(&features_path(&args.data, id))?;
        let outputs = forward_outputs(&seq.values.mapv(f64::from), &params, &shape)?;
        let candidates = detect(
            &outputs,
            id,
            video.duration_s,
            shape.snippets,
            &train_cfg.loss,
            &config.infer,
        );
        predictions.extend(candidates_to_predictions(&candidates, &annotations.classes));
        videos += 1;
    }
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("predictions.json");
    write_predictions(&path, &predictions)?;
    println!(
        "wrote {} predictions for {videos} videos to {}",
        predictions.len(),
        path.display()
    );
    Ok(())
}

fn default_grid() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn eval(args: EvalArgs) -> Result<()> {
    let predictions = read_predictions(&args.preds)?;
    let annotations = restrict(&read_annotations(&args.gt)?, args.subset);
    let grid = args.tious.unwrap_or_else(default_grid);
    let report = map_report(&predictions, &annotations, &grid)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(out) = args.out {
        fs::create_dir_all(&out)?;
        fs::write(out.join("report.json"), &json)?;
        let mut csv = String::from("tiou,map\n");
        for (thr, map) in report.thresholds.iter().zip(&report.map_per_threshold) {
            csv.push_str(&format!("{thr},{map}\n"));
        }
        csv.push_str(&format!("average,{}\n", report.average_map));
        fs::write(out.join("map.csv"), csv)?;
    }
    Ok(())
}

fn profile_fp(args: ProfileFpArgs) -> Result<()> {
    let predictions = read_predictions(&args.preds)?;
    let annotations = restrict(&read_annotations(&args.gt)?, args.subset);
    let profile = fp_profile(&predictions, &annotations, args.tiou)?;
    let json = serde_json::to_string_pretty(&profile).expect("profile serializes");
    println!("{json}");
    if let Some(out) = args.out {
        fs::create_dir_all(&out)?;
        fs::write(out.join("fp_profile.json"), &json)?;
    }
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<ExitCode> {
    let reports = gradcheck::run_gradcheck(args.seed, args.configs)?;
    let mut pass = true;
    for r in &reports {
        println!(
            "{:<6} max_rel_err {:.3e} (checked {}, skipped {})",
            r.name, r.max_rel_err, r.checked, r.skipped
        );
        pass &= r.max_rel_err <= args.tol;
    }
    if pass {
        println!("gradcheck PASS ({} configs, tol {:.1e})", args.configs, args.tol);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck FAIL ({} configs, tol {:.1e})", args.configs, args.tol);
        Ok(ExitCode::from(1))
    }
}

fn simdump(args: SimdumpArgs) -> Result<()> {
    let (params, train_cfg) = read_checkpoint(&args.model)?;
    let shape = ModelShape::infer(params.tensors(), &train_cfg)?;
    let seq = read_features(&features_path(&args.data, &args.video))?;
    let outputs = forward_outputs(&seq.values.mapv(f64::from), &params, &shape)?;
    let base = outputs
        .iter()
        .find(|o| o.scale == 1)
        .ok_or_else(|| Error::InvalidConfig("similarity dump needs scale 1 in the model".into()))?;
    similarity_dump(&args.out, &base.embedding)?;
    println!(
        "wrote {}x{} similarity matrix to {}",
        base.embedding.nrows(),
        base.embedding.nrows(),
        args.out.display()
    );
    Ok(())
}
