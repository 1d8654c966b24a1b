//! Multiresolution hash grid and frequency encodings.

use std::f64::consts::PI;

use nalgebra::Vector3;

const PRIMES: [u32; 3] = [73_856_093, 19_349_663, 83_492_791];

/// Per-level lattice geometry of a hash grid. Holds no parameters; the
/// feature tables live in the field's flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid {
    pub levels: usize,
    pub table_size: usize,
    pub features: usize,
    resolutions: Vec<u32>,
    dense: Vec<bool>,
}

/// The eight trilinear corners touched by one point at one level.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Corners {
    pub index: [u32; 8],
    pub weight: [f64; 8],
}

impl HashGrid {
    pub fn new(
        levels: usize,
        table_size: usize,
        features: usize,
        base_resolution: u32,
        per_level_scale: f64,
    ) -> Self {
        let resolutions: Vec<u32> = (0..levels)
            .map(|l| (base_resolution as f64 * per_level_scale.powi(l as i32)).floor() as u32)
            .collect();
        let dense = resolutions
            .iter()
            .map(|&r| {
                let side = r as u64 + 1;
                side * side * side <= table_size as u64
            })
            .collect();
        Self {
            levels,
            table_size,
            features,
            resolutions,
            dense,
        }
    }

    pub fn resolution(&self, level: usize) -> u32 {
        self.resolutions[level]
    }

    /// True if the level indexes its table directly instead of hashing.
    pub fn is_dense(&self, level: usize) -> bool {
        self.dense[level]
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }

    pub fn param_count(&self) -> usize {
        self.levels * self.table_size * self.features
    }

    /// Table slot of lattice vertex `(i, j, k)` at `level`.
    #[inline]
    pub fn vertex_index(&self, level: usize, i: u32, j: u32, k: u32) -> u32 {
        if self.dense[level] {
            let side = self.resolutions[level] + 1;
            i + side * (j + side * k)
        } else {
            let h =
                i.wrapping_mul(PRIMES[0]) ^ j.wrapping_mul(PRIMES[1]) ^ k.wrapping_mul(PRIMES[2]);
            h & (self.table_size as u32 - 1)
        }
    }

    #[inline]
    pub fn corners(&self, level: usize, x: &Vector3<f64>) -> Corners {
        let res = self.resolutions[level];
        let mut cell = [0u32; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let p = x[a] * res as f64;
            let c = (p.floor().max(0.0) as u32).min(res - 1);
            cell[a] = c;
            frac[a] = p - c as f64;
        }
        let mut out = Corners::default();
        for n in 0..8 {
            let (dx, dy, dz) = (n & 1, (n >> 1) & 1, (n >> 2) & 1);
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            out.weight[n] = wx * wy * wz;
            out.index[n] = self.vertex_index(
                level,
                cell[0] + dx as u32,
                cell[1] + dy as u32,
                cell[2] + dz as u32,
            );
        }
        out
    }

    /// Offset of `(level, slot)` inside the table block of the parameter vector.
    #[inline]
    pub fn table_offset(&self, level: usize, slot: u32) -> usize {
        (level * self.table_size + slot as usize) * self.features
    }

    /// Interpolated features of `x` into `out` (length `levels * features`),
    /// optionally recording the corners for the backward pass.
    pub fn encode(
        &self,
        tables: &[f64],
        x: &Vector3<f64>,
        out: &mut [f64],
        mut record: Option<&mut [Corners]>,
    ) {
        let f = self.features;
        for level in 0..self.levels {
            let corners = self.corners(level, x);
            let dst = &mut out[level * f..(level + 1) * f];
            dst.fill(0.0);
            for n in 0..8 {
                let w = corners.weight[n];
                let base = self.table_offset(level, corners.index[n]);
                for (d, t) in dst.iter_mut().zip(&tables[base..base + f]) {
                    *d += w * t;
                }
            }
            if let Some(rec) = record.as_deref_mut() {
                rec[level] = corners;
            }
        }
    }
}

/// `[sin(2^j pi v), cos(2^j pi v)]` for `j < octaves`, per component.
pub fn frequency_encode(values: &[f64], octaves: usize, out: &mut [f64]) {
    let mut o = 0;
    for &v in values {
        let mut freq = PI;
        for _ in 0..octaves {
            let (s, c) = (freq * v).sin_cos();
            out[o] = s;
            out[o + 1] = c;
            o += 2;
            freq *= 2.0;
        }
    }
}
