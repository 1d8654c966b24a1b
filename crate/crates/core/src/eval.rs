//! Image metrics, the extrapolation experiment and component ablations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Conditioning;
use crate::occgrid::UpdateMode;
use crate::raster::Image;
use crate::scene::{generate_scene, Dataset, SceneSpec};
use crate::trainer::{
    stream_with, FrameMetrics, FrameSource, GridUpdate, StreamOptions, TrainConfig,
};

pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio of two unit-range images, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Shape(format!(
            "cannot compare {}x{} with {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let n = a.pixels().len() * 3;
    let sse: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]) * (p[c] - q[c])).sum::<f64>())
        .sum();
    let mse = sse / n as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtrapolationRow {
    pub variant: Conditioning,
    pub frame: usize,
    pub reconstruction_psnr_db: f64,
    /// Frame rendered before training on it, against its own ground truth.
    pub extrapolation_psnr_db: f64,
    /// The same render against the previous frame's ground truth.
    pub extrapolation_prev_psnr_db: f64,
}

/// Streams the video once per conditioning variant (projected color and
/// space-time) and, for every frame `k >= 1`, renders frame `k` from the
/// state trained through `k - 1` before training on it.
pub fn extrapolation_eval(
    source: &dyn FrameSource,
    config: &TrainConfig,
) -> Result<Vec<ExtrapolationRow>> {
    if source.frame_count() < 3 {
        return Err(Error::Data(format!(
            "extrapolation needs at least 3 frames, dataset has {}",
            source.frame_count()
        )));
    }
    let mut rows = Vec::new();
    for variant in [Conditioning::ProjectedColor, Conditioning::SpaceTime] {
        let cfg = TrainConfig {
            model_variant: variant,
            ..config.clone()
        };
        let outcome = stream_with(source, &cfg, StreamOptions { extrapolate: true }, &mut [])?;
        rows.extend(extrapolation_rows(variant, &outcome.metrics));
    }
    Ok(rows)
}

pub fn extrapolation_rows(
    variant: Conditioning,
    metrics: &[FrameMetrics],
) -> Vec<ExtrapolationRow> {
    metrics
        .iter()
        .filter_map(|m| {
            m.extrapolation.map(|e| ExtrapolationRow {
                variant,
                frame: m.frame,
                reconstruction_psnr_db: m.psnr_db,
                extrapolation_psnr_db: e.psnr_db,
                extrapolation_prev_psnr_db: e.psnr_prev_db,
            })
        })
        .collect()
}

pub fn extrapolation_csv(rows: &[ExtrapolationRow]) -> String {
    let mut out = String::from(
        "variant,frame,reconstruction_psnr_db,extrapolation_psnr_db,extrapolation_prev_psnr_db\n",
    );
    for r in rows {
        let name = match r.variant {
            Conditioning::ProjectedColor => "projected-color",
            Conditioning::SpaceTime => "space-time",
            Conditioning::None => "none",
        };
        writeln!(
            out,
            "{name},{},{:.4},{:.4},{:.4}",
            r.frame,
            r.reconstruction_psnr_db,
            r.extrapolation_psnr_db,
            r.extrapolation_prev_psnr_db
        )
        .expect("writing to a string");
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoProjectedColor,
    NoOccTransition,
    Neither,
    SpaceTime,
    LiteralUpdate,
    GlobalUpdate,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoProjectedColor,
        Variant::NoOccTransition,
        Variant::Neither,
        Variant::SpaceTime,
        Variant::LiteralUpdate,
        Variant::GlobalUpdate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoProjectedColor => "no-projected-color",
            Variant::NoOccTransition => "no-occ-transition",
            Variant::Neither => "neither",
            Variant::SpaceTime => "space-time",
            Variant::LiteralUpdate => "literal-update",
            Variant::GlobalUpdate => "global-update",
        }
    }

    /// The base configuration with this variant's component swapped out.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model_variant = Conditioning::ProjectedColor;
        cfg.occupancy.transition = true;
        cfg.occupancy.update = GridUpdate::Bayesian;
        match self {
            Variant::Full => {}
            Variant::NoProjectedColor => cfg.model_variant = Conditioning::None,
            Variant::NoOccTransition => cfg.occupancy.transition = false,
            Variant::Neither => {
                cfg.model_variant = Conditioning::None;
                cfg.occupancy.transition = false;
            }
            Variant::SpaceTime => cfg.model_variant = Conditioning::SpaceTime,
            Variant::LiteralUpdate => cfg.sampler.update_mode = UpdateMode::Literal,
            Variant::GlobalUpdate => cfg.occupancy.update = GridUpdate::Global,
        }
        cfg
    }
}

/// Ablation description, read from TOML. Relative paths are resolved
/// against the spec file's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub variants: Vec<Variant>,
    /// A scene spec (TOML) to generate, or a dataset directory.
    pub scene: PathBuf,
    /// Base training configuration file. Defaults apply when absent.
    #[serde(default)]
    pub config: Option<PathBuf>,
    /// Per-variant configuration overrides, keyed by variant name.
    #[serde(default)]
    pub overrides: BTreeMap<String, toml::Table>,
    /// Iterations-per-frame values for the quality-vs-budget sweep.
    #[serde(default)]
    pub j_sweep: Vec<usize>,
}

impl AblationSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: Self = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.scene = base.join(&spec.scene);
        spec.config = spec.config.map(|c| base.join(c));
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.len() < 2 {
            return Err(Error::Config(format!(
                "an ablation needs at least 2 variants, got {}",
                self.variants.len()
            )));
        }
        for key in self.overrides.keys() {
            if !Variant::ALL.iter().any(|v| v.name() == key) {
                return Err(Error::Config(format!(
                    "override for unknown variant {key:?}"
                )));
            }
        }
        for table in self.overrides.values() {
            if table.contains_key("seed") {
                return Err(Error::Config(
                    "variants must share the seed; overrides may not set it".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn base_config(&self) -> Result<TrainConfig> {
        match &self.config {
            Some(p) => TrainConfig::load(p),
            None => Ok(TrainConfig::default()),
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        if self.scene.is_dir() {
            Dataset::load(&self.scene)
        } else {
            let spec = SceneSpec::load(&self.scene)?;
            generate_scene(&spec, &spec.rig.build()?)
        }
    }

    /// Configuration for one variant: base, then the variant's component
    /// switch, then its overrides.
    pub fn variant_config(&self, base: &TrainConfig, variant: Variant) -> Result<TrainConfig> {
        let cfg = variant.apply(base);
        match self.overrides.get(variant.name()) {
            None => Ok(cfg),
            Some(table) => {
                let mut value =
                    toml::Value::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
                merge(&mut value, table);
                let cfg: TrainConfig = value.try_into().map_err(|e: toml::de::Error| {
                    Error::Config(format!("{}: {e}", variant.name()))
                })?;
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }
}

fn merge(target: &mut toml::Value, patch: &toml::Table) {
    if let toml::Value::Table(t) = target {
        for (k, v) in patch {
            match (t.get_mut(k), v) {
                (Some(existing @ toml::Value::Table(_)), toml::Value::Table(sub)) => {
                    merge(existing, sub)
                }
                _ => {
                    t.insert(k.clone(), v.clone());
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    /// Mean over all frames.
    pub psnr_db: f64,
    /// Medians over frames after warm-up.
    pub median_train_ms: f64,
    pub median_render_ms: f64,
    pub mean_samples_per_ray: f64,
    pub frames: Vec<FrameMetrics>,
}

impl VariantSummary {
    pub fn from_metrics(frames: Vec<FrameMetrics>) -> Self {
        let n = frames.len().max(1) as f64;
        let streamed: Vec<&FrameMetrics> = frames.iter().filter(|m| m.frame > 0).collect();
        let pick = |f: fn(&FrameMetrics) -> f64| {
            let v: Vec<f64> = if streamed.is_empty() {
                frames.iter().map(f).collect()
            } else {
                streamed.iter().map(|m| f(m)).collect()
            };
            median(&v).unwrap_or(0.0)
        };
        Self {
            psnr_db: frames.iter().map(|m| m.psnr_db).sum::<f64>() / n,
            median_train_ms: pick(|m| m.train_ms),
            median_render_ms: pick(|m| m.render_ms),
            mean_samples_per_ray: frames.iter().map(|m| m.mean_samples_per_ray).sum::<f64>() / n,
            frames,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    /// Error message when the variant failed.
    pub outcome: std::result::Result<VariantSummary, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub variant: Variant,
    pub iters_per_frame: usize,
    pub psnr_db: f64,
    pub median_train_ms: f64,
    pub median_render_ms: f64,
}

#[derive(Clone, Debug, Default)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub sweep: Vec<std::result::Result<SweepRow, (Variant, usize, String)>>,
}

fn run_variant(dataset: &Dataset, cfg: &TrainConfig) -> Result<VariantSummary> {
    let mut frames: Vec<FrameMetrics> = Vec::new();
    stream_with(dataset, cfg, StreamOptions::default(), &mut [&mut frames])?;
    Ok(VariantSummary::from_metrics(frames))
}

/// Streams every variant on the same scene. A failing variant is recorded
/// in its row and does not stop the others.
pub fn run_ablation(spec: &AblationSpec) -> Result<AblationReport> {
    spec.validate()?;
    let dataset = spec.load_dataset()?;
    let base = spec.base_config()?;
    let mut report = AblationReport::default();
    for &variant in &spec.variants {
        let outcome = spec
            .variant_config(&base, variant)
            .and_then(|cfg| run_variant(&dataset, &cfg))
            .map_err(|e| {
                log::error!("variant {} failed: {e}", variant.name());
                e.to_string()
            });
        report.rows.push(AblationRow { variant, outcome });
    }
    for &variant in &spec.variants {
        for &j in &spec.j_sweep {
            let run = spec.variant_config(&base, variant).and_then(|mut cfg| {
                cfg.iters_per_frame = j;
                cfg.warmup_iters = cfg.warmup_iters.max(j);
                let s = run_variant(&dataset, &cfg)?;
                Ok(SweepRow {
                    variant,
                    iters_per_frame: j,
                    psnr_db: s.psnr_db,
                    median_train_ms: s.median_train_ms,
                    median_render_ms: s.median_render_ms,
                })
            });
            report
                .sweep
                .push(run.map_err(|e| (variant, j, e.to_string())));
        }
    }
    Ok(report)
}

fn fps(ms: f64) -> f64 {
    1000.0 / ms
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,psnr_db,train_fps,render_fps,total_fps,median_train_ms,median_render_ms,mean_samples_per_ray,status\n",
        );
        for row in &self.rows {
            let name = row.variant.name();
            match &row.outcome {
                Ok(s) => writeln!(
                    out,
                    "{name},{:.4},{:.4},{:.4},{:.4},{:.3},{:.3},{:.4},ok",
                    s.psnr_db,
                    fps(s.median_train_ms),
                    fps(s.median_render_ms),
                    fps(s.median_train_ms + s.median_render_ms),
                    s.median_train_ms,
                    s.median_render_ms,
                    s.mean_samples_per_ray
                ),
                Err(e) => writeln!(out, "{name},,,,,,,,error: {}", e.replace([',', '\n'], ";")),
            }
            .expect("writing to a string");
        }
        out
    }

    pub fn sweep_csv(&self) -> String {
        let mut out = String::from(
            "variant,iters_per_frame,psnr_db,median_train_ms,median_render_ms,status\n",
        );
        for row in &self.sweep {
            match row {
                Ok(r) => writeln!(
                    out,
                    "{},{},{:.4},{:.3},{:.3},ok",
                    r.variant.name(),
                    r.iters_per_frame,
                    r.psnr_db,
                    r.median_train_ms,
                    r.median_render_ms
                ),
                Err((v, j, e)) => writeln!(
                    out,
                    "{},{j},,,,error: {}",
                    v.name(),
                    e.replace([',', '\n'], ";")
                ),
            }
            .expect("writing to a string");
        }
        out
    }
}
