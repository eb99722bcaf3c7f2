//! `modseg` command line: segment synthetic scenes, evaluate the three
//! protocols, render overlays, and sweep hyperparameters.

use clap::{Args, Parser, Subcommand, ValueEnum};
use modseg::backend::synthetic::{SceneGeometry, SceneParams, SyntheticScene};
use modseg::embeddings::ExternalEmbeddingField;
use modseg::error::Error;
use modseg::evaluation::{ClassVectors, LabelGrid};
use modseg::pipeline::{self, archive, render, ArchiveEntry, CacheDir, RunConfig};
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "modseg", version, about = "Unsupervised segmentation from diffusion-feature modulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment input scenes into an archive directory.
    Segment(SegmentArgs),
    /// Evaluate an archive under one of the protocols.
    Evaluate(EvaluateArgs),
    /// Render label overlays and ours-vs-naive comparison panels.
    Render(RenderArgs),
    /// Re-run segmentation across values of one hyperparameter.
    Sweep(SweepArgs),
    /// Generate a random synthetic scene file.
    GenScene(GenSceneArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (TOML); flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Backend name ("synthetic" is built in).
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Masks per image (K).
    #[arg(long, short = 'k')]
    mask_count: Option<usize>,
    /// Feature-extraction timestep t_f.
    #[arg(long)]
    feature_timestep: Option<u32>,
    /// Modulation timestep t_m.
    #[arg(long)]
    modulation_timestep: Option<u32>,
    /// Modulation strength (the +/- offset magnitude).
    #[arg(long, alias = "lambda")]
    strength: Option<f32>,
    #[arg(long)]
    feature_layer: Option<u8>,
    #[arg(long)]
    modulation_layer: Option<u8>,
    /// post_projection or pre_projection.
    #[arg(long)]
    placement: Option<String>,
    #[arg(long)]
    inject_attention: Option<bool>,
    #[arg(long)]
    smoothing_sigma: Option<f64>,
    #[arg(long)]
    embedding_timestep: Option<u32>,
    #[arg(long)]
    kmeans_restarts: Option<usize>,
    #[arg(long)]
    schedule_steps: Option<usize>,
    #[arg(long)]
    schedule_max_timestep: Option<u32>,
    /// from_timestep_down or single_step.
    #[arg(long)]
    modulation_persistence: Option<String>,
    /// Text conditioning passed to the backend.
    #[arg(long)]
    caption: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig, Error> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.mask_count {
            config.mask_count = v;
        }
        if let Some(v) = self.feature_timestep {
            config.feature_timestep = v;
        }
        if let Some(v) = self.modulation_timestep {
            config.modulation_timestep = v;
        }
        if let Some(v) = self.strength {
            config.strength = v;
        }
        if let Some(v) = self.feature_layer {
            config.feature_layer = v;
        }
        if let Some(v) = self.modulation_layer {
            config.modulation_layer = v;
        }
        if let Some(v) = &self.placement {
            config.placement = match v.as_str() {
                "post_projection" => modseg::backend::OffsetPlacement::PostProjection,
                "pre_projection" => modseg::backend::OffsetPlacement::PreProjection,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown placement '{other}' (post_projection|pre_projection)"
                    )))
                }
            };
        }
        if let Some(v) = self.inject_attention {
            config.inject_attention = v;
        }
        if let Some(v) = self.smoothing_sigma {
            config.smoothing_sigma = v;
        }
        if let Some(v) = self.embedding_timestep {
            config.embedding_timestep = v;
        }
        if let Some(v) = self.kmeans_restarts {
            config.kmeans_restarts = v;
        }
        if let Some(v) = &self.backend {
            config.backend = v.clone();
        }
        if let Some(v) = self.schedule_steps {
            config.schedule_steps = v;
        }
        if let Some(v) = self.schedule_max_timestep {
            config.schedule_max_timestep = v;
        }
        if let Some(v) = &self.modulation_persistence {
            config.modulation_persistence = match v.as_str() {
                "from_timestep_down" => modseg::backend::ModulationPersistence::FromTimestepDown,
                "single_step" => modseg::backend::ModulationPersistence::SingleStep,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown persistence '{other}' (from_timestep_down|single_step)"
                    )))
                }
            };
        }
        if let Some(v) = &self.caption {
            config.caption = v.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Scene files to segment.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Archive directory to write.
    #[arg(long, short)]
    output: PathBuf,
    /// Disable the difference-map cache even if MODSEG_CACHE_DIR is set.
    #[arg(long)]
    no_cache: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Archive directory produced by `segment`.
    #[arg(long)]
    archive: PathBuf,
    #[arg(long, value_enum)]
    protocol: ProtocolArg,
    /// Ground-truth scene files; defaults to the input paths recorded in
    /// the archive.
    #[arg(long)]
    gt: Vec<PathBuf>,
    /// Seed for dataset-level k-means (traditional protocol).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also report the naive bilinear-upsampling baseline (modified only).
    #[arg(long)]
    compare_naive: bool,
    /// External pixel-embedding field files, one per image in archive
    /// order (openvocab only).
    #[arg(long)]
    embeddings: Vec<PathBuf>,
    /// Precomputed per-class text vectors (openvocab only).
    #[arg(long)]
    class_vectors: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Traditional,
    Modified,
    Openvocab,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    archive: PathBuf,
    /// Output directory; defaults to `<archive>/renders`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Root directory; each value writes `<output>/<param>_<value>`.
    #[arg(long, short)]
    output: PathBuf,
    /// Hyperparameter to sweep: mask_count, modulation_timestep, strength,
    /// feature_timestep, modulation_layer, feature_layer, smoothing_sigma.
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    /// Evaluate each run under the modified protocol and print a table.
    #[arg(long)]
    evaluate: bool,
}

#[derive(Args)]
struct GenSceneArgs {
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    height: usize,
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 6)]
    labels: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 0.0)]
    amplitude: f32,
    /// stripes (axis-aligned), voronoi (non-axis-aligned boundaries), or
    /// fragmented (several regions per label).
    #[arg(long, default_value = "voronoi")]
    geometry: String,
    /// Regions per label for the fragmented geometry.
    #[arg(long, default_value_t = 3)]
    fragments: usize,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Segment(args) => segment(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Render(args) => render_archive(args),
        Command::Sweep(args) => sweep(args),
        Command::GenScene(args) => gen_scene(args),
    }
}

fn segment(args: SegmentArgs) -> Result<(), Error> {
    let config = args.config.build()?;
    let cache = if args.no_cache { None } else { CacheDir::from_env() };
    run_segment(&args.inputs, &config, cache.as_ref(), &args.output)?;
    println!("archive written to {}", args.output.display());
    Ok(())
}

fn run_segment(
    inputs: &[PathBuf],
    config: &RunConfig,
    cache: Option<&CacheDir>,
    output: &std::path::Path,
) -> Result<Vec<ArchiveEntry>, Error> {
    archive::write_config(output, &config.to_toml()?)?;
    let start = Instant::now();
    let mut per_image = Vec::new();
    let mut entries = Vec::new();
    for input in inputs {
        let t0 = Instant::now();
        let entry = pipeline::segment_file(input, config, cache, output)?;
        per_image.push((entry.image_id.clone(), t0.elapsed().as_millis()));
        println!(
            "segmented {} -> {} ({} masks, {} labels)",
            input.display(),
            entry.image_id,
            entry.lowres.num_masks(),
            entry.final_map.num_labels()
        );
        entries.push(entry);
    }
    archive::write_timing(
        output,
        &archive::TimingFile {
            total_ms: start.elapsed().as_millis(),
            per_image_ms: per_image,
        },
    )?;
    Ok(entries)
}

/// Ground truth per entry: explicit --gt files, or the scene files the
/// archive recorded as inputs.
fn ground_truths(entries: &[ArchiveEntry], explicit: &[PathBuf]) -> Result<Vec<LabelGrid>, Error> {
    let paths: Vec<PathBuf> = if explicit.is_empty() {
        entries.iter().map(|e| PathBuf::from(&e.input_path)).collect()
    } else if explicit.len() == entries.len() {
        explicit.to_vec()
    } else {
        return Err(Error::InvalidConfig(format!(
            "{} ground-truth files for {} archive entries",
            explicit.len(),
            entries.len()
        )));
    };
    paths
        .iter()
        .map(|p| pipeline::scene_ground_truth(&SyntheticScene::load(p)?))
        .collect()
}

fn evaluate(args: EvaluateArgs) -> Result<(), Error> {
    let entries = archive::read_all_entries(&args.archive)?;
    if entries.is_empty() {
        return Err(Error::EmptyInput("archive entries"));
    }
    let gts = ground_truths(&entries, &args.gt)?;
    let report = match args.protocol {
        ProtocolArg::Traditional => pipeline::evaluate_traditional(&entries, &gts, args.seed)?,
        ProtocolArg::Modified => pipeline::evaluate_modified(&entries, &gts)?,
        ProtocolArg::Openvocab => {
            let class_vectors_path = args.class_vectors.as_ref().ok_or_else(|| {
                Error::InvalidConfig("openvocab protocol needs --class-vectors".into())
            })?;
            if args.embeddings.len() != entries.len() {
                return Err(Error::InvalidConfig(format!(
                    "openvocab protocol needs one --embeddings file per image ({} given, {} images)",
                    args.embeddings.len(),
                    entries.len()
                )));
            }
            let class_vectors = ClassVectors::load(class_vectors_path)?;
            let fields = args
                .embeddings
                .iter()
                .map(|p| ExternalEmbeddingField::load(p))
                .collect::<Result<Vec<_>, _>>()?;
            pipeline::evaluate_openvocab(&entries, &gts, &fields, &class_vectors.vectors)?
        }
    };
    archive::write_report(&args.archive, &report)?;
    print!("{}", report.to_text());

    if args.compare_naive {
        if !matches!(args.protocol, ProtocolArg::Modified) {
            return Err(Error::InvalidConfig(
                "--compare-naive applies to the modified protocol".into(),
            ));
        }
        let naive = pipeline::evaluate_modified_naive(&entries, &gts)?;
        println!("naive-upsample mIoU: {:.6}", naive.miou);
        println!(
            "gap (ours - naive):  {:+.6}",
            report.miou - naive.miou
        );
    }
    Ok(())
}

fn render_archive(args: RenderArgs) -> Result<(), Error> {
    let out = args.out.unwrap_or_else(|| args.archive.join("renders"));
    let entries = archive::read_all_entries(&args.archive)?;
    for entry in &entries {
        let scene = SyntheticScene::load(&PathBuf::from(&entry.input_path))?;
        render::render_entry(entry, &scene, args.seed, &out)?;
        println!("rendered {}", entry.image_id);
    }
    println!("renders written to {}", out.display());
    Ok(())
}

fn apply_sweep_value(config: &mut RunConfig, param: &str, value: &str) -> Result<(), Error> {
    let bad = |m: String| Error::InvalidConfig(m);
    match param {
        "mask_count" => config.mask_count = value.parse().map_err(|_| bad(format!("bad K '{value}'")))?,
        "modulation_timestep" => {
            config.modulation_timestep = value.parse().map_err(|_| bad(format!("bad t_m '{value}'")))?
        }
        "feature_timestep" => {
            config.feature_timestep = value.parse().map_err(|_| bad(format!("bad t_f '{value}'")))?
        }
        "strength" => config.strength = value.parse().map_err(|_| bad(format!("bad strength '{value}'")))?,
        "modulation_layer" => {
            config.modulation_layer = value.parse().map_err(|_| bad(format!("bad layer '{value}'")))?
        }
        "feature_layer" => {
            config.feature_layer = value.parse().map_err(|_| bad(format!("bad layer '{value}'")))?
        }
        "smoothing_sigma" => {
            config.smoothing_sigma = value.parse().map_err(|_| bad(format!("bad sigma '{value}'")))?
        }
        other => {
            return Err(bad(format!(
                "unknown sweep parameter '{other}' (mask_count, modulation_timestep, \
                 feature_timestep, strength, modulation_layer, feature_layer, smoothing_sigma)"
            )))
        }
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), Error> {
    if args.values.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one value".into()));
    }
    let base = args.config.build()?;
    let cache = CacheDir::from_env();
    let mut summary = Vec::new();
    for value in &args.values {
        let mut config = base.clone();
        apply_sweep_value(&mut config, &args.param, value)?;
        config.validate()?;
        let out = args.output.join(format!("{}_{}", args.param, value));
        let entries = run_segment(&args.inputs, &config, cache.as_ref(), &out)?;
        if args.evaluate {
            let gts = ground_truths(&entries, &[])?;
            let report = pipeline::evaluate_modified(&entries, &gts)?;
            archive::write_report(&out, &report)?;
            summary.push((value.clone(), report.miou));
        }
    }
    if args.evaluate {
        println!("{:>16}  mIoU (modified)", args.param);
        for (value, miou) in &summary {
            println!("{value:>16}  {miou:.6}");
        }
    }
    Ok(())
}

fn gen_scene(args: GenSceneArgs) -> Result<(), Error> {
    let geometry = match args.geometry.as_str() {
        "stripes" => SceneGeometry::AxisStripes,
        "voronoi" => SceneGeometry::Voronoi,
        "fragmented" => SceneGeometry::FragmentedVoronoi {
            sites_per_label: args.fragments,
        },
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown geometry '{other}' (stripes|voronoi|fragmented)"
            )))
        }
    };
    let scene = SyntheticScene::generate(
        &SceneParams {
            height: args.height,
            width: args.width,
            num_labels: args.labels,
            feature_dim: args.dim,
            downsample_factor: 32,
            noise_amplitude: args.amplitude,
            geometry,
        },
        args.seed,
    )?;
    scene.save(&args.out)?;
    println!(
        "scene written to {} ({} labels, {}x{}, gap {:.4})",
        args.out.display(),
        scene.num_labels(),
        scene.height,
        scene.width,
        scene.min_prototype_gap()
    );
    Ok(())
}
