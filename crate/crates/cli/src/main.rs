//! `segens`: synthesize datasets, evaluate ensemble configurations and compare them.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use segens_core::dataset::{write_dataset, SynthOptions};
use segens_core::io::{self, DatasetInfo, SampleReader};
use segens_core::pipeline::{evaluate_dataset, Domain, EvalConfig, Task};
use segens_core::remap::{remap_panoptic, remap_semantic};
use segens_core::report::{relative_to_baseline, write_report, BaselineSelector};
use segens_core::synth::{SceneConfig, Simulator};
use segens_core::{AlignOptions, ClassMapping, Measure, PixelAgg, PredictionConfig, Tta};

#[derive(Parser)]
#[command(
    name = "segens",
    version,
    about = "Sampling-based uncertainty for query-based segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (samples, ground truth, flows, manifest).
    Synth(SynthArgs),
    /// Evaluate one prediction-model configuration on a dataset.
    Evaluate(EvaluateArgs),
    /// Normalize evaluation results against the deterministic baseline.
    Report(ReportArgs),
    /// Print a class mapping or apply it to label maps.
    Remap(RemapArgs),
    /// Print sample container headers.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Manifest records, clean and OOD together.
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    /// Prior frames per record.
    #[arg(long, default_value_t = 0)]
    frames: u8,
    /// Share of records that are OOD twins of clean records.
    #[arg(long, default_value_t = 0.0)]
    ood_fraction: f64,
    /// Standard deviation of simulated logit noise.
    #[arg(long, default_value_t = 0.5)]
    noise: f32,
    /// Maximum per-member mask translation in pixels.
    #[arg(long, default_value_t = 1)]
    jitter: usize,
    /// Stochastic passes stored per transform.
    #[arg(long, default_value_t = 0)]
    mc: usize,
    /// Test-time augmentations stored: none, hflip, scale, scale+hflip.
    #[arg(long, default_value = "none")]
    tta: Tta,
    /// Object motion per frame as `dx,dy`.
    #[arg(long, default_value = "1,0", value_parser = parse_velocity)]
    velocity: (i64, i64),
    /// Horizontal error added to every stored flow vector.
    #[arg(long, default_value_t = 0.0)]
    flow_error: f32,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    objects: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Class table; defaults to dataset.json next to the manifest.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "both")]
    domain: Domain,
    /// Comma-separated measure names, or `all`.
    #[arg(long, default_value = "all", value_parser = parse_measures)]
    measures: MeasureList,
    /// Comma-separated: image-mean, image-sum, patch:<N>.
    #[arg(long, default_value = "image-mean", value_delimiter = ',')]
    pixel_agg: Vec<PixelAgg>,
    /// Comma-separated: failure, calib, ood, seg, all.
    #[arg(long, default_value = "all", value_parser = parse_tasks)]
    task: TaskSet,
    #[arg(long, default_value_t = 0.8)]
    score_thresh: f64,
    #[arg(long, default_value_t = 0.8)]
    overlap_thresh: f64,
    #[arg(long, default_value_t = segens_core::metrics::DEFAULT_BINS)]
    bins: usize,
    /// Mapping JSON file, or a bundled name (viper-to-cityscapes, cityscapes-to-viper).
    #[arg(long)]
    remap: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Dataset/backbone label used to group baselines in reports.
    #[arg(long, default_value = "default")]
    tag: String,
    /// Dropout passes; 0 evaluates the deterministic pass.
    #[arg(long, default_value_t = 0)]
    mc: usize,
    #[arg(long, default_value_t = 0)]
    frames: u8,
    #[arg(long, default_value = "none")]
    tta: Tta,
}

#[derive(Args)]
struct ReportArgs {
    /// metrics.csv files or directories containing one.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Configuration name used as baseline; defaults to every single-sample configuration.
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RemapArgs {
    /// Mapping JSON file or bundled name.
    #[arg(long)]
    mapping: String,
    /// Semantic label map (.segl) to remap.
    #[arg(long, conflicts_with = "panoptic", requires = "out")]
    semantic: Option<PathBuf>,
    /// Panoptic label map (.segp) to remap.
    #[arg(long, requires = "out")]
    panoptic: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

#[derive(Clone)]
struct MeasureList(Vec<Measure>);

#[derive(Clone)]
struct TaskSet(BTreeSet<Task>);

fn parse_measures(s: &str) -> Result<MeasureList, String> {
    if s.trim() == "all" {
        return Ok(MeasureList(Measure::ALL.to_vec()));
    }
    let list = s
        .split(',')
        .map(|p| p.trim().parse::<Measure>().map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MeasureList(list))
}

fn parse_tasks(s: &str) -> Result<TaskSet, String> {
    Task::parse_list(s).map(TaskSet).map_err(|e| e.to_string())
}

fn parse_velocity(s: &str) -> Result<(i64, i64), String> {
    let (x, y) = s.split_once(',').ok_or("expected dx,dy")?;
    let p = |v: &str| v.trim().parse::<i64>().map_err(|e| e.to_string());
    Ok((p(x)?, p(y)?))
}

fn load_mapping(spec: &str) -> anyhow::Result<ClassMapping> {
    if let Some(m) = ClassMapping::bundled(spec) {
        return Ok(m);
    }
    ClassMapping::load(Path::new(spec)).with_context(|| format!("loading mapping {spec}"))
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let opts = SynthOptions {
        seed: a.seed,
        scenes: a.scenes,
        ood_fraction: a.ood_fraction,
        frames: a.frames,
        mc: a.mc,
        tta: a.tta,
        velocity: a.velocity,
        flow_error: a.flow_error,
        scene: SceneConfig {
            height: a.size,
            width: a.size,
            n_objects: a.objects,
            ..SceneConfig::default()
        },
        simulator: Simulator {
            logit_sigma: a.noise,
            jitter: a.jitter,
            ..Simulator::default()
        },
    };
    let records = write_dataset(&a.out, &opts)?;
    log::info!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let manifest = io::read_manifest(&a.manifest)?;
    let info_path = a.dataset.unwrap_or_else(|| manifest.dir.join("dataset.json"));
    let info = DatasetInfo::load(&info_path)?;
    let config = EvalConfig {
        tag: a.tag,
        domain: a.domain,
        tasks: a.task.0,
        measures: a.measures.0,
        pixel_aggs: a.pixel_agg,
        prediction: PredictionConfig {
            mc: a.mc,
            prior_frames: a.frames,
            tta: a.tta,
        },
        score_thresh: a.score_thresh,
        overlap_thresh: a.overlap_thresh,
        bins: a.bins,
        remap: a.remap.as_deref().map(load_mapping).transpose()?,
        align: AlignOptions::default(),
    };
    let report = evaluate_dataset(&manifest, &info, &config)?;
    for row in report.metrics.iter().filter(|r| !r.error.is_empty()) {
        log::warn!(
            "{} {} {} {}: {}",
            row.task,
            row.metric,
            row.measure,
            row.pixel_agg,
            row.error
        );
    }
    report.write(&a.out)?;
    Ok(())
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for input in &a.inputs {
        let path = if input.is_dir() {
            input.join("metrics.csv")
        } else {
            input.clone()
        };
        let part: Vec<segens_core::pipeline::MetricRow> =
            io::read_csv(&path).with_context(|| format!("reading {}", path.display()))?;
        rows.extend(part);
    }
    let selector = a
        .baseline
        .map_or(BaselineSelector::SingleSample, BaselineSelector::Config);
    let relative = relative_to_baseline(&rows, &selector)?;
    write_report(&a.out, &relative)?;
    Ok(())
}

fn remap(a: RemapArgs) -> anyhow::Result<()> {
    let mapping = load_mapping(&a.mapping)?;
    match (a.semantic, a.panoptic, a.out) {
        (Some(input), None, Some(out)) => {
            io::write_semantic(&out, &remap_semantic(&io::read_semantic(&input)?, &mapping))?
        }
        (None, Some(input), Some(out)) => {
            io::write_panoptic(&out, &remap_panoptic(&io::read_panoptic(&input)?, &mapping))?
        }
        (None, None, _) => println!("{}", mapping.to_json()?),
        _ => bail!("give either --semantic or --panoptic together with --out"),
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> anyhow::Result<()> {
    for path in &a.files {
        let reader = SampleReader::open(path).with_context(|| format!("opening {}", path.display()))?;
        let h = reader.header();
        println!("{}", path.display());
        println!("  samples  {}", h.samples);
        println!("  queries  {}", h.queries);
        println!("  classes  {} (c_total {})", h.classes, h.c_total);
        println!("  frame    {}x{}", h.height, h.width);
        for (i, loc) in reader.locations().iter().enumerate() {
            println!("  [{i:3}] {:<28} offset {}", loc.descriptor.to_string(), loc.offset);
        }
    }
    Ok(())
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("SEGENS_THREADS") {
        let n: usize = v.parse().with_context(|| format!("SEGENS_THREADS={v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Remap(a) => remap(a),
        Command::Inspect(a) => inspect(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
