use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use flynerf_core::eval::{extrapolation_csv, extrapolation_eval, run_ablation, AblationSpec};
use flynerf_core::field::{Conditioning, RadianceField};
use flynerf_core::raster::write_depth_png;
use flynerf_core::renderer::{render_image, ConditionSource, RenderConfig};
use flynerf_core::scene::{generate_scene, Dataset, SceneSpec};
use flynerf_core::trainer::{
    normalized_time, stream, CsvSink, MetricsSink, RenderSink, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "flynerf",
    version,
    about = "Streaming radiance-field training on multi-view video"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view video from a scene description.
    GenScene { spec: PathBuf, out_dir: PathBuf },
    /// Train frame by frame and write metrics, test-view renders and the final checkpoint.
    Stream {
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reproducible output: timing columns are written as zero.
        #[arg(long)]
        deterministic: bool,
    },
    /// Render one camera of one frame from a checkpoint.
    Render {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        camera: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        samples: usize,
    },
    /// Render each frame before training on it, for both conditioning variants.
    EvalExtrapolation {
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Stream the same scene once per ablation variant.
    Ablate {
        spec: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_scene(spec_path: &Path, out: &Path) -> Result<()> {
    let spec = SceneSpec::load(spec_path)?;
    let rig = spec.rig.build()?;
    let dataset = generate_scene(&spec, &rig)?;
    dataset.write(out)?;
    println!(
        "wrote {} frames x {} cameras to {}",
        dataset.frame_count(),
        rig.cameras().count(),
        out.display()
    );
    Ok(())
}

fn run_stream(dataset: &Path, config: &Path, out: &Path, deterministic: bool) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    cfg.deterministic |= deterministic;
    let dataset = Dataset::load(dataset)?;
    create_dir(out)?;
    cfg.save(&out.join("config.toml"))?;
    let mut csv = CsvSink::create(&out.join("metrics.csv"))?;
    let mut renders = RenderSink::new(&out.join("renders"));
    let outcome = stream(
        &dataset,
        &cfg,
        &mut [&mut csv as &mut dyn MetricsSink, &mut renders],
    )?;
    outcome.state.field.save(&out.join("field.ckpt"))?;
    outcome.state.grid.dump(&out.join("grid.bin"))?;
    let mean =
        outcome.metrics.iter().map(|m| m.psnr_db).sum::<f64>() / outcome.metrics.len() as f64;
    println!(
        "{} frames, mean test PSNR {mean:.2} dB, outputs in {}",
        outcome.metrics.len(),
        out.display()
    );
    Ok(())
}

fn render(
    checkpoint: &Path,
    dataset: &Path,
    frame: usize,
    camera: &str,
    out: &Path,
    samples: usize,
) -> Result<()> {
    let field = RadianceField::load(checkpoint)?;
    let dataset = Dataset::load(dataset)?;
    if frame >= dataset.frame_count() {
        bail!(
            "frame {frame} out of range: dataset has {} frames",
            dataset.frame_count()
        );
    }
    let Some(cam) = dataset.rig.camera(camera) else {
        bail!("no camera named {camera:?}");
    };
    let observation = dataset.observation(frame)?;
    let cond = match field.conditioning() {
        Conditioning::ProjectedColor => ConditionSource::Frame {
            observation: &observation,
            rig: &dataset.rig,
        },
        Conditioning::SpaceTime => {
            ConditionSource::Time(normalized_time(frame, dataset.frame_count()))
        }
        Conditioning::None => ConditionSource::None,
    };
    let rc = RenderConfig {
        samples_per_ray: samples,
        background: dataset.background,
        ..RenderConfig::default()
    };
    let view = render_image(&field, None, cam, &cond, &rc)?;
    let dir = out.join("renders");
    create_dir(&dir)?;
    let image_path = dir.join(format!("{camera}_{frame:05}.png"));
    view.image.write_png(&image_path)?;
    write_depth_png(
        &view.depth,
        cam.width,
        cam.height,
        cam.far,
        &dir.join(format!("{camera}_{frame:05}_depth.png")),
    )?;
    println!("wrote {}", image_path.display());
    Ok(())
}

fn eval_extrapolation(dataset: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let dataset = Dataset::load(dataset)?;
    let rows = extrapolation_eval(&dataset, &cfg)?;
    create_dir(out)?;
    let path = out.join("extrapolation.csv");
    std::fs::write(&path, extrapolation_csv(&rows))
        .with_context(|| format!("writing {}", path.display()))?;
    for variant in [Conditioning::ProjectedColor, Conditioning::SpaceTime] {
        let sel: Vec<_> = rows.iter().filter(|r| r.variant == variant).collect();
        let n = sel.len().max(1) as f64;
        println!(
            "{variant:?}: mean extrapolation {:.2} dB, mean reconstruction {:.2} dB",
            sel.iter().map(|r| r.extrapolation_psnr_db).sum::<f64>() / n,
            sel.iter().map(|r| r.reconstruction_psnr_db).sum::<f64>() / n
        );
    }
    Ok(())
}

fn ablate(spec: &Path, out: &Path) -> Result<()> {
    let spec = AblationSpec::load(spec)?;
    let report = run_ablation(&spec)?;
    create_dir(out)?;
    let path = out.join("ablation.csv");
    std::fs::write(&path, report.to_csv())
        .with_context(|| format!("writing {}", path.display()))?;
    if !report.sweep.is_empty() {
        let sweep = out.join("jsweep.csv");
        std::fs::write(&sweep, report.sweep_csv())
            .with_context(|| format!("writing {}", sweep.display()))?;
    }
    print!("{}", report.to_csv());
    let failed = report.rows.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        bail!("{failed} of {} variants failed", report.rows.len());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenScene { spec, out_dir } => gen_scene(&spec, &out_dir),
        Command::Stream {
            dataset,
            config,
            out,
            deterministic,
        } => run_stream(&dataset, &config, &out, deterministic),
        Command::Render {
            checkpoint,
            dataset,
            frame,
            camera,
            out,
            samples,
        } => render(&checkpoint, &dataset, frame, &camera, &out, samples),
        Command::EvalExtrapolation {
            dataset,
            config,
            out,
        } => eval_extrapolation(&dataset, &config, &out),
        Command::Ablate { spec, out } => ablate(&spec, &out),
    }
}
