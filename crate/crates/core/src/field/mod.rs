//! The radiance field: hash-encoded position plus a conditioning vector feed
//! a small ReLU trunk; a density head (`exp`, clamped) and a color head
//! (logistic, additionally fed a frequency encoding of the view direction)
//! read the trunk. Reverse mode is written out by hand against a tape
//! recorded during the forward pass.
//!
//! Conditioning is one of:
//! - projected color statistics `[mean | variance]` of the current frame,
//! - a frequency encoding of normalized time (the space-time baseline),
//! - nothing (ablation without projected colors).

mod dense;
pub mod encoding;

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projcolor::ProjectedColorStats;
use crate::raster::Rgb;
use encoding::{frequency_encode, Corners, HashGrid};

pub const DIRECTION_OCTAVES: usize = 4;
pub const TIME_OCTAVES: usize = 4;
pub const MAX_DENSITY: f64 = 1e4;
const DIR_DIM: usize = 3 * 2 * DIRECTION_OCTAVES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub levels: usize,
    pub log2_table_size: u32,
    pub features: usize,
    pub base_resolution: u32,
    pub per_level_scale: f64,
    pub hidden_width: usize,
    pub hidden_depth: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            log2_table_size: 14,
            features: 2,
            base_resolution: 16,
            per_level_scale: 1.5,
            hidden_width: 64,
            hidden_depth: 2,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0
            || self.features == 0
            || self.hidden_width == 0
            || self.hidden_depth == 0
        {
            return Err(Error::Config("field dimensions must be positive".into()));
        }
        if !(1..=24).contains(&self.log2_table_size) {
            return Err(Error::Config("log2_table_size must be in 1..=24".into()));
        }
        if !(self.per_level_scale > 1.0) {
            return Err(Error::Config("per_level_scale must exceed 1".into()));
        }
        if self.base_resolution == 0 {
            return Err(Error::Config("base_resolution must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    ProjectedColor,
    SpaceTime,
    None,
}

impl Conditioning {
    pub fn dim(self) -> usize {
        match self {
            Conditioning::ProjectedColor => 6,
            Conditioning::SpaceTime => 2 * TIME_OCTAVES,
            Conditioning::None => 0,
        }
    }

    fn code(self) -> u32 {
        match self {
            Conditioning::ProjectedColor => 0,
            Conditioning::SpaceTime => 1,
            Conditioning::None => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Conditioning::ProjectedColor),
            1 => Some(Conditioning::SpaceTime),
            2 => Some(Conditioning::None),
            _ => None,
        }
    }
}

/// Per-sample conditioning value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Condition {
    Stats(ProjectedColorStats),
    /// Normalized time in [0, 1].
    Time(f64),
    None,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldOutput {
    pub sigma: f64,
    pub color: Rgb,
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    weights: Range<usize>,
    bias: Range<usize>,
    inp: usize,
    out: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tables: Range<usize>,
    trunk: Vec<Layer>,
    density: Layer,
    color: Layer,
    len: usize,
}

impl Layout {
    fn new(grid: &HashGrid, cfg: &FieldConfig, cond_dim: usize) -> Self {
        let mut at = grid.param_count();
        let mut layer = |inp: usize, out: usize| {
            let weights = at..at + inp * out;
            let bias = weights.end..weights.end + out;
            at = bias.end;
            Layer {
                weights,
                bias,
                inp,
                out,
            }
        };
        let input_dim = grid.output_dim() + cond_dim;
        let trunk: Vec<Layer> = (0..cfg.hidden_depth)
            .map(|i| {
                layer(
                    if i == 0 { input_dim } else { cfg.hidden_width },
                    cfg.hidden_width,
                )
            })
            .collect();
        let density = layer(cfg.hidden_width, 1);
        let color = layer(cfg.hidden_width + DIR_DIM, 3);
        Self {
            tables: 0..grid.param_count(),
            trunk,
            density,
            color,
            len: at,
        }
    }

    fn mlp_range(&self) -> Range<usize> {
        self.tables.end..self.len
    }
}

/// Activations of one recorded forward batch.
#[derive(Clone, Debug, Default)]
pub struct FieldTape {
    n: usize,
    param_len: usize,
    corners: Vec<Corners>,
    /// `acts[0]` is the trunk input; `acts[i + 1]` the output of trunk layer `i`.
    acts: Vec<Vec<f64>>,
    color_in: Vec<f64>,
    sigma: Vec<f64>,
    clamped: Vec<bool>,
    color: Vec<f64>,
}

impl FieldTape {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    config: FieldConfig,
    conditioning: Conditioning,
    grid: HashGrid,
    layout: Layout,
    params: Vec<f64>,
}

impl RadianceField {
    /// Zero-initialized field.
    pub fn zeros(config: FieldConfig, conditioning: Conditioning) -> Result<Self> {
        config.validate()?;
        let grid = HashGrid::new(
            config.levels,
            1 << config.log2_table_size,
            config.features,
            config.base_resolution,
            config.per_level_scale,
        );
        let layout = Layout::new(&grid, &config, conditioning.dim());
        let params = vec![0.0; layout.len];
        Ok(Self {
            config,
            conditioning,
            grid,
            layout,
            params,
        })
    }

    /// Hash tables uniform in +-1e-4, dense layers He-uniform, zero biases.
    pub fn new(config: FieldConfig, conditioning: Conditioning, seed: u64) -> Result<Self> {
        let mut field = Self::zeros(config, conditioning)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut field.params[field.layout.tables.clone()] {
            *p = rng.gen_range(-1e-4..1e-4);
        }
        let layers: Vec<Layer> = field
            .layout
            .trunk
            .iter()
            .chain([&field.layout.density, &field.layout.color])
            .cloned()
            .collect();
        for layer in layers {
            let bound = (6.0 / layer.inp as f64).sqrt();
            for p in &mut field.params[layer.weights] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(field)
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    pub fn grid(&self) -> &HashGrid {
        &self.grid
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Parameter index range of the hash tables.
    pub fn table_range(&self) -> Range<usize> {
        self.layout.tables.clone()
    }

    /// Parameter index range of all dense layers.
    pub fn mlp_range(&self) -> Range<usize> {
        self.layout.mlp_range()
    }

    pub fn input_dim(&self) -> usize {
        self.grid.output_dim() + self.conditioning.dim()
    }

    pub fn hash_encode(&self, x: &Vector3<f64>) -> Result<Vec<f64>> {
        check_unit_cube(x)?;
        let mut out = vec![0.0; self.grid.output_dim()];
        self.grid
            .encode(&self.params[self.layout.tables.clone()], x, &mut out, None);
        Ok(out)
    }

    /// Writes the conditioning vector for `cond` into `out`.
    pub fn condition_into(&self, cond: &Condition, out: &mut [f64]) -> Result<()> {
        match (self.conditioning, cond) {
            (Conditioning::ProjectedColor, Condition::Stats(s)) => {
                out[..3].copy_from_slice(&s.mean);
                out[3..6].copy_from_slice(&s.variance);
            }
            (Conditioning::SpaceTime, Condition::Time(t)) => {
                frequency_encode(&[*t], TIME_OCTAVES, out)
            }
            (Conditioning::None, _) => {}
            (kind, other) => {
                return Err(Error::Contract(format!(
                    "{kind:?} field given {other:?} conditioning"
                )));
            }
        }
        Ok(())
    }

    /// Single-sample evaluation.
    pub fn eval(
        &self,
        x: &Vector3<f64>,
        d: &Vector3<f64>,
        cond: &Condition,
    ) -> Result<FieldOutput> {
        let mut c = [0.0; 8];
        let dim = self.conditioning.dim();
        self.condition_into(cond, &mut c[..dim])?;
        Ok(self.forward(
            std::slice::from_ref(x),
            std::slice::from_ref(d),
            &c[..dim],
            None,
        )?[0])
    }

    /// Batch forward pass. `cond` holds `n * conditioning.dim()` values.
    pub fn forward(
        &self,
        xs: &[Vector3<f64>],
        dirs: &[Vector3<f64>],
        cond: &[f64],
        tape: Option<&mut FieldTape>,
    ) -> Result<Vec<FieldOutput>> {
        let n = xs.len();
        let cdim = self.conditioning.dim();
        if dirs.len() != n || cond.len() != n * cdim {
            return Err(Error::Shape(format!(
                "{n} points, {} directions, {} conditioning values",
                dirs.len(),
                cond.len()
            )));
        }
        for (x, d) in xs.iter().zip(dirs) {
            check_unit_cube(x)?;
            if !d.iter().all(|v| v.is_finite()) {
                return Err(Error::Domain(format!("non-finite direction {d:?}")));
            }
        }
        if !cond.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("non-finite conditioning input".into()));
        }

        let levels = self.grid.levels;
        let enc_dim = self.grid.output_dim();
        let in_dim = enc_dim + cdim;
        let width = self.config.hidden_width;
        let tables = &self.params[self.layout.tables.clone()];
        let recording = tape.is_some();

        let mut x0 = vec![0.0; n * in_dim];
        let mut corners = if recording {
            vec![Corners::default(); n * levels]
        } else {
            Vec::new()
        };
        for i in 0..n {
            let row = &mut x0[i * in_dim..(i + 1) * in_dim];
            let rec = recording.then(|| &mut corners[i * levels..(i + 1) * levels]);
            self.grid.encode(tables, &xs[i], &mut row[..enc_dim], rec);
            row[enc_dim..].copy_from_slice(&cond[i * cdim..(i + 1) * cdim]);
        }

        let mut acts = Vec::with_capacity(self.layout.trunk.len() + 1);
        acts.push(x0);
        for layer in &self.layout.trunk {
            let mut y = vec![0.0; n * layer.out];
            dense::forward(
                acts.last().expect("trunk input"),
                &self.params[layer.weights.clone()],
                &self.params[layer.bias.clone()],
                &mut y,
                n,
                layer.inp,
                layer.out,
            );
            for v in &mut y {
                *v = v.max(0.0);
            }
            acts.push(y);
        }
        let hidden = acts.last().expect("trunk output");

        let mut raw_density = vec![0.0; n];
        let dl = &self.layout.density;
        dense::forward(
            hidden,
            &self.params[dl.weights.clone()],
            &self.params[dl.bias.clone()],
            &mut raw_density,
            n,
            dl.inp,
            1,
        );

        let cl = &self.layout.color;
        let mut color_in = vec![0.0; n * cl.inp];
        for i in 0..n {
            let row = &mut color_in[i * cl.inp..(i + 1) * cl.inp];
            row[..width].copy_from_slice(&hidden[i * width..(i + 1) * width]);
            let d = dirs[i];
            frequency_encode(&[d.x, d.y, d.z], DIRECTION_OCTAVES, &mut row[width..]);
        }
        let mut color = vec![0.0; n * 3];
        dense::forward(
            &color_in,
            &self.params[cl.weights.clone()],
            &self.params[cl.bias.clone()],
            &mut color,
            n,
            cl.inp,
            3,
        );
        for v in &mut color {
            *v = logistic(*v);
        }

        let mut sigma = Vec::with_capacity(n);
        let mut clamped = Vec::with_capacity(n);
        for &raw in &raw_density {
            let e = raw.exp();
            clamped.push(!(e < MAX_DENSITY));
            sigma.push(e.min(MAX_DENSITY));
        }
        let outputs = (0..n)
            .map(|i| FieldOutput {
                sigma: sigma[i],
                color: [color[3 * i], color[3 * i + 1], color[3 * i + 2]],
            })
            .collect();

        if let Some(tape) = tape {
            *tape = FieldTape {
                n,
                param_len: self.params.len(),
                corners,
                acts,
                color_in,
                sigma,
                clamped,
                color,
            };
        }
        Ok(outputs)
    }

    /// Accumulates parameter gradients of `sum(d_sigma * sigma + d_color . color)`
    /// over the taped batch into `grads`.
    pub fn backward(
        &self,
        tape: &FieldTape,
        d_sigma: &[f64],
        d_color: &[Rgb],
        grads: &mut [f64],
    ) -> Result<()> {
        let n = tape.n;
        if tape.param_len != self.params.len() || grads.len() != self.params.len() {
            return Err(Error::Contract(
                "tape or gradient buffer does not match field parameters".into(),
            ));
        }
        if tape.acts.len() != self.layout.trunk.len() + 1 {
            return Err(Error::Contract(
                "tape was recorded by a different architecture".into(),
            ));
        }
        if d_sigma.len() != n || d_color.len() != n {
            return Err(Error::Shape(format!(
                "tape has {n} samples, got {} density and {} color gradients",
                d_sigma.len(),
                d_color.len()
            )));
        }
        let width = self.config.hidden_width;

        // color head
        let cl = &self.layout.color;
        let mut d_color_raw = vec![0.0; n * 3];
        for i in 0..n {
            for c in 0..3 {
                let y = tape.color[3 * i + c];
                d_color_raw[3 * i + c] = d_color[i][c] * y * (1.0 - y);
            }
        }
        let mut d_color_in = vec![0.0; n * cl.inp];
        {
            let (dw, db) = split_layer_grads(grads, cl);
            dense::backward(
                &tape.color_in,
                &self.params[cl.weights.clone()],
                &d_color_raw,
                dw,
                db,
                Some(&mut d_color_in),
                n,
                cl.inp,
                3,
            );
        }

        // density head
        let dl = &self.layout.density;
        let d_raw: Vec<f64> = (0..n)
            .map(|i| {
                if tape.clamped[i] {
                    0.0
                } else {
                    d_sigma[i] * tape.sigma[i]
                }
            })
            .collect();
        let hidden = tape.acts.last().expect("trunk output");
        let mut d_hidden = vec![0.0; n * width];
        {
            let (dw, db) = split_layer_grads(grads, dl);
            dense::backward(
                hidden,
                &self.params[dl.weights.clone()],
                &d_raw,
                dw,
                db,
                Some(&mut d_hidden),
                n,
                width,
                1,
            );
        }
        for i in 0..n {
            for j in 0..width {
                d_hidden[i * width + j] += d_color_in[i * cl.inp + j];
            }
        }

        // trunk
        let mut d_out = d_hidden;
        for (li, layer) in self.layout.trunk.iter().enumerate().rev() {
            let out_act = &tape.acts[li + 1];
            for (g, a) in d_out.iter_mut().zip(out_act) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            let mut d_in = vec![0.0; n * layer.inp];
            let (dw, db) = split_layer_grads(grads, layer);
            dense::backward(
                &tape.acts[li],
                &self.params[layer.weights.clone()],
                &d_out,
                dw,
                db,
                Some(&mut d_in),
                n,
                layer.inp,
                layer.out,
            );
            d_out = d_in;
        }

        // hash tables; conditioning inputs receive no gradient
        let in_dim = self.input_dim();
        let f = self.grid.features;
        let levels = self.grid.levels;
        let table_grads = &mut grads[self.layout.tables.clone()];
        for i in 0..n {
            let row = &d_out[i * in_dim..i * in_dim + levels * f];
            for level in 0..levels {
                let corners = &tape.corners[i * levels + level];
                let g = &row[level * f..(level + 1) * f];
                for k in 0..8 {
                    let base = self.grid.table_offset(level, corners.index[k]);
                    let w = corners.weight[k];
                    for (t, gf) in table_grads[base..base + f].iter_mut().zip(g) {
                        *t += w * gf;
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes the versioned checkpoint described in [`checkpoint`].
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut std::io::BufReader::new(file)).map_err(|e| match e {
            Error::Data(m) => Error::parse(path, m),
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let c = &self.config;
        w.write_all(checkpoint::MAGIC)?;
        w.write_all(&checkpoint::VERSION.to_le_bytes())?;
        for v in [
            c.levels as u32,
            c.log2_table_size,
            c.features as u32,
            c.base_resolution,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(c.per_level_scale as f32).to_le_bytes())?;
        for v in [
            c.hidden_width as u32,
            c.hidden_depth as u32,
            self.conditioning.code(),
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(*p as f32).to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Io {
            path: "<checkpoint>".into(),
            source: e,
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != checkpoint::MAGIC {
            return Err(Error::Data("not a field checkpoint".into()));
        }
        let mut u32s = [0u32; 5];
        let mut buf = [0u8; 4];
        for v in &mut u32s {
            r.read_exact(&mut buf).map_err(io)?;
            *v = u32::from_le_bytes(buf);
        }
        let [version, levels, log2_table_size, features, base_resolution] = u32s;
        if version != checkpoint::VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        r.read_exact(&mut buf).map_err(io)?;
        let per_level_scale = f32::from_le_bytes(buf) as f64;
        let mut tail = [0u32; 3];
        for v in &mut tail {
            r.read_exact(&mut buf).map_err(io)?;
            *v = u32::from_le_bytes(buf);
        }
        let [hidden_width, hidden_depth, cond_code] = tail;
        let conditioning = Conditioning::from_code(cond_code)
            .ok_or_else(|| Error::Data(format!("unknown conditioning {cond_code}")))?;
        let config = FieldConfig {
            levels: levels as usize,
            log2_table_size,
            features: features as usize,
            base_resolution,
            per_level_scale,
            hidden_width: hidden_width as usize,
            hidden_depth: hidden_depth as usize,
        };
        let mut field =
            Self::zeros(config, conditioning).map_err(|e| Error::Data(e.to_string()))?;
        let mut count = [0u8; 8];
        r.read_exact(&mut count).map_err(io)?;
        let count = u64::from_le_bytes(count) as usize;
        if count != field.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {count} parameters, config implies {}",
                field.params.len()
            )));
        }
        for p in &mut field.params {
            r.read_exact(&mut buf).map_err(io)?;
            *p = f32::from_le_bytes(buf) as f64;
        }
        Ok(field)
    }
}

/// Checkpoint layout, all little-endian:
///
/// | offset | size | field                                      |
/// |--------|------|--------------------------------------------|
/// | 0      | 8    | magic `FLYNERF\0`                          |
/// | 8      | 4    | version (u32, currently 1)                 |
/// | 12     | 4    | levels (u32)                               |
/// | 16     | 4    | log2 table size (u32)                      |
/// | 20     | 4    | features per level (u32)                   |
/// | 24     | 4    | base resolution (u32)                      |
/// | 28     | 4    | per-level scale (f32)                      |
/// | 32     | 4    | hidden width (u32)                         |
/// | 36     | 4    | hidden depth (u32)                         |
/// | 40     | 4    | conditioning: 0 projected-color, 1 space-time, 2 none |
/// | 44     | 8    | parameter count (u64)                      |
/// | 52     | 4n   | parameters (f32): tables, then each layer's weights (in x out, row-major) and bias |
pub mod checkpoint {
    pub const MAGIC: &[u8; 8] = b"FLYNERF\0";
    pub const VERSION: u32 = 1;
    pub const HEADER_LEN: usize = 52;
}

fn split_layer_grads<'a>(grads: &'a mut [f64], layer: &Layer) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(layer.weights.end, layer.bias.start);
    let block = &mut grads[layer.weights.start..layer.bias.end];
    block.split_at_mut(layer.weights.len())
}

#[inline]
fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn check_unit_cube(x: &Vector3<f64>) -> Result<()> {
    if x.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "point {:?} outside the unit cube",
            (x.x, x.y, x.z)
        )))
    }
}

#[cfg(test)]
mod tests;
