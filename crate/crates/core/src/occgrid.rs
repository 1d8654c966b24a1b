//! Probabilistic occupancy grid carried across frames.
//!
//! At each frame boundary the grid is blurred by a normalized 3D kernel,
//! modelling unknown motion. During the frame, every evaluated sample raises
//! (or, in literal mode, rescales) the probability of its voxel. Ray samples
//! are rejected when their voxel falls below a threshold, except for a fixed
//! stride of samples per ray that is always kept.

use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::renderer::RaySample;

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    resolution: usize,
    values: Vec<f64>,
    pub frame_index: usize,
    pub iteration_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    /// `G <- s * G` whenever `s >= G`.
    Literal,
    /// `G <- max(G, s)`.
    #[default]
    MonotoneMax,
}

/// Maps a density to an occupancy probability over one voxel width,
/// `1 - exp(-sigma / N)`.
#[inline]
pub fn occupancy_score(sigma: f64, resolution: usize) -> f64 {
    1.0 - (-sigma / resolution as f64).exp()
}

impl OccupancyGrid {
    pub fn filled(resolution: usize, value: f64) -> Self {
        assert!(resolution > 0, "grid resolution must be positive");
        Self {
            resolution,
            values: vec![value.clamp(0.0, 1.0); resolution.pow(3)],
            frame_index: 0,
            iteration_index: 0,
        }
    }

    pub fn from_values(resolution: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != resolution.pow(3) {
            return Err(Error::Shape(format!(
                "{} values for a {resolution}^3 grid",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("occupancy values must lie in [0, 1]".into()));
        }
        Ok(Self {
            resolution,
            values,
            frame_index: 0,
            iteration_index: 0,
        })
    }

    #[inline]
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution * (j + self.resolution * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    /// Linear index of the voxel containing `x`; points on the far faces
    /// belong to the last voxel.
    #[inline]
    pub fn voxel_of(&self, x: &Vector3<f64>) -> usize {
        let n = self.resolution;
        let cell = |v: f64| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
        self.index(cell(x.x), cell(x.y), cell(x.z))
    }

    #[inline]
    pub fn value_at(&self, x: &Vector3<f64>) -> f64 {
        self.values[self.voxel_of(x)]
    }

    /// Center of voxel `(i, j, k)` in the unit cube.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let n = self.resolution as f64;
        Vector3::new(
            (i as f64 + 0.5) / n,
            (j as f64 + 0.5) / n,
            (k as f64 + 0.5) / n,
        )
    }

    /// Convolves with `kernel` (clamp-to-edge), clamps to [0, 1], and starts
    /// the next frame.
    pub fn transition(&self, kernel: &TransitionKernel) -> Result<OccupancyGrid> {
        let n = self.resolution;
        let size = kernel.size;
        if size > n {
            return Err(Error::Config(format!(
                "{size}^3 kernel larger than {n}^3 grid"
            )));
        }
        let r = (size / 2) as isize;
        let clamp = |v: isize| v.clamp(0, n as isize - 1) as usize;
        let mut out = vec![0.0; self.values.len()];
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let mut acc = 0.0;
                    let mut w = kernel.weights.iter();
                    for dz in -r..=r {
                        let z = clamp(k as isize + dz);
                        for dy in -r..=r {
                            let y = clamp(j as isize + dy);
                            let row = n * (y + n * z);
                            for dx in -r..=r {
                                let x = clamp(i as isize + dx);
                                acc += w.next().expect("kernel size") * self.values[row + x];
                            }
                        }
                    }
                    out[i + n * (j + n * k)] = acc.clamp(0.0, 1.0);
                }
            }
        }
        Ok(OccupancyGrid {
            resolution: n,
            values: out,
            frame_index: self.frame_index + 1,
            iteration_index: 0,
        })
    }

    pub fn update_at(&mut self, x: &Vector3<f64>, sigma: f64, mode: UpdateMode) {
        let score = occupancy_score(sigma.max(0.0), self.resolution);
        let v = self.voxel_of(x);
        let g = self.values[v];
        self.values[v] = match mode {
            UpdateMode::MonotoneMax => g.max(score),
            UpdateMode::Literal if score < g => g,
            UpdateMode::Literal => (score * g).clamp(0.0, 1.0),
        };
    }

    /// Marks the end of one optimization step.
    pub fn advance_iteration(&mut self) {
        self.iteration_index += 1;
    }

    /// Mean occupancy, a cheap summary for logging.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Raw little-endian f32 values (x fastest) plus a JSON sidecar
    /// `{resolution, frame_index}` at `path.json`.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = path.with_extension("json");
        let meta = serde_json::json!({
            "resolution": self.resolution,
            "frame_index": self.frame_index,
        });
        std::fs::write(&sidecar, meta.to_string()).map_err(|e| Error::io(&sidecar, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionKernel {
    size: usize,
    weights: Vec<f64>,
    pub stddev: f64,
}

impl TransitionKernel {
    /// Normalized isotropic Gaussian over a `size^3` window (`size` odd).
    pub fn gaussian(size: usize, stddev: f64) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::Config(format!("kernel size {size} must be odd")));
        }
        if !(stddev > 0.0) {
            return Err(Error::Config("kernel stddev must be positive".into()));
        }
        let r = (size / 2) as isize;
        let mut weights = Vec::with_capacity(size.pow(3));
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let d2 = (dx * dx + dy * dy + dz * dz) as f64;
                    weights.push((-d2 / (2.0 * stddev * stddev)).exp());
                }
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self {
            size,
            weights,
            stddev,
        })
    }

    /// Center weight 1, all others 0.
    pub fn identity(size: usize) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::Config(format!("kernel size {size} must be odd")));
        }
        let mut weights = vec![0.0; size.pow(3)];
        weights[size.pow(3) / 2] = 1.0;
        Ok(Self {
            size,
            weights,
            stddev: 0.0,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Weights ordered with dx fastest, then dy, then dz.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn center_weight(&self) -> f64 {
        self.weights[self.weights.len() / 2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Keep-interval `R`: sample `i` always survives when `i % R == R / 2`.
    pub interval: usize,
    pub sigma_min_start: f64,
    pub sigma_min_end: f64,
    /// Frame at which the threshold reaches `sigma_min_end`.
    pub sigma_min_end_frame: usize,
    pub update_mode: UpdateMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            interval: 20,
            sigma_min_start: 1.0,
            sigma_min_end: 0.05,
            sigma_min_end_frame: 10,
            update_mode: UpdateMode::MonotoneMax,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::Config(
                "rejection interval must be at least 1".into(),
            ));
        }
        if !(0.0 <= self.sigma_min_end
            && self.sigma_min_end <= self.sigma_min_start
            && self.sigma_min_start <= 1.0)
        {
            return Err(Error::Config(
                "need 0 <= sigma_min_end <= sigma_min_start <= 1".into(),
            ));
        }
        if self.sigma_min_end_frame < 1 {
            return Err(Error::Config(
                "sigma_min_end_frame must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Linear decay from `sigma_min_start` at frame 1 to `sigma_min_end` at
/// `sigma_min_end_frame`, constant afterwards. Frame 0 (warm-up) uses the
/// frame-1 value.
pub fn threshold_schedule(frame_index: usize, config: &SamplerConfig) -> f64 {
    let end_frame = config.sigma_min_end_frame;
    if frame_index <= 1 {
        return config.sigma_min_start;
    }
    if frame_index >= end_frame {
        return config.sigma_min_end;
    }
    let s = (frame_index - 1) as f64 / (end_frame - 1) as f64;
    config.sigma_min_start + s * (config.sigma_min_end - config.sigma_min_start)
}

/// Keeps samples whose voxel value is at least `threshold`, plus every
/// sample with `index % interval == interval / 2`. Order is preserved.
pub fn rejection_filter(
    grid: &OccupancyGrid,
    samples: &[RaySample],
    threshold: f64,
    interval: usize,
) -> Vec<RaySample> {
    let keep_slot = interval / 2;
    samples
        .iter()
        .filter(|s| s.index % interval == keep_slot || grid.value_at(&s.x) >= threshold)
        .copied()
        .collect()
}

/// Global re-estimation: every voxel takes the maximum occupancy score of
/// `points_per_voxel` uniform points inside it, ignoring its previous value.
/// `density` evaluates a batch of points.
pub fn global_update_baseline<R, F>(
    grid: &OccupancyGrid,
    mut density: F,
    points_per_voxel: usize,
    rng: &mut R,
) -> Result<OccupancyGrid>
where
    R: Rng + ?Sized,
    F: FnMut(&[Vector3<f64>]) -> Result<Vec<f64>>,
{
    let n = grid.resolution;
    let ppv = points_per_voxel.max(1);
    let mut values = vec![0.0; grid.values.len()];
    let mut batch = Vec::with_capacity(n * n * ppv);
    for k in 0..n {
        batch.clear();
        for j in 0..n {
            for i in 0..n {
                for _ in 0..ppv {
                    let jitter = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
                    let p = (Vector3::new(i as f64, j as f64, k as f64) + jitter) / n as f64;
                    batch.push(p.map(|v| v.clamp(0.0, 1.0)));
                }
            }
        }
        let sigmas = density(&batch)?;
        if sigmas.len() != batch.len() {
            return Err(Error::Shape(format!(
                "{} densities for {} points",
                sigmas.len(),
                batch.len()
            )));
        }
        for (v, chunk) in sigmas.chunks_exact(ppv).enumerate() {
            let best = chunk
                .iter()
                .fold(0.0f64, |m, s| m.max(occupancy_score(s.max(0.0), n)));
            values[k * n * n + v] = best;
        }
    }
    Ok(OccupancyGrid {
        resolution: n,
        values,
        frame_index: grid.frame_index,
        iteration_index: grid.iteration_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(i: usize, x: Vector3<f64>) -> RaySample {
        RaySample {
            x,
            t: i as f64,
            delta: 1.0,
            index: i,
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values: Vec<f64> = (0..8usize.pow(3)).map(|_| rng.gen()).collect();
        let grid = OccupancyGrid::from_values(8, values).unwrap();
        let out = grid
            .transition(&TransitionKernel::identity(3).unwrap())
            .unwrap();
        assert_eq!(out.values(), grid.values());
        assert_eq!(out.frame_index, 1);
        assert_eq!(out.iteration_index, 0);
    }

    #[test]
    fn constant_grid_is_fixed_point() {
        let grid = OccupancyGrid::filled(6, 0.37);
        let out = grid
            .transition(&TransitionKernel::gaussian(3, 0.8).unwrap())
            .unwrap();
        for v in out.values() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = TransitionKernel::gaussian(3, 0.8).unwrap();
        assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let w = |dx: usize, dy: usize, dz: usize| k.weights()[dx + 3 * (dy + 3 * dz)];
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    assert_eq!(w(dx, dy, dz), w(2 - dx, dy, dz));
                    assert_eq!(w(dx, dy, dz), w(dx, 2 - dy, dz));
                    assert_eq!(w(dx, dy, dz), w(dx, dy, 2 - dz));
                }
            }
        }
        assert!(k.center_weight() < 1.0);
    }

    #[test]
    fn oversized_kernel_rejected() {
        let grid = OccupancyGrid::filled(2, 0.5);
        assert!(matches!(
            grid.transition(&TransitionKernel::gaussian(3, 1.0).unwrap()),
            Err(Error::Config(_))
        ));
        assert!(TransitionKernel::gaussian(4, 1.0).is_err());
    }

    #[test]
    fn update_cases() {
        let x = Vector3::repeat(0.5);
        let sigma_for = |s: f64, n: usize| -(1.0 - s).ln() * n as f64;
        for mode in [UpdateMode::Literal, UpdateMode::MonotoneMax] {
            let mut g = OccupancyGrid::filled(4, 0.5);
            g.update_at(&x, sigma_for(0.3, 4), mode);
            assert!((g.value_at(&x) - 0.5).abs() < 1e-12);
        }
        let mut lit = OccupancyGrid::filled(4, 0.2);
        lit.update_at(&x, sigma_for(0.9, 4), UpdateMode::Literal);
        assert!((lit.value_at(&x) - 0.18).abs() < 1e-12);
        let mut max = OccupancyGrid::filled(4, 0.2);
        max.update_at(&x, sigma_for(0.9, 4), UpdateMode::MonotoneMax);
        assert!((max.value_at(&x) - 0.9).abs() < 1e-12);

        let mut zero = OccupancyGrid::filled(4, 0.0);
        for s in [0.0, 1.0, 50.0, 1e4] {
            zero.update_at(&x, s, UpdateMode::Literal);
        }
        assert_eq!(zero.value_at(&x), 0.0);
    }

    #[test]
    fn rejection_keeps_stride_on_empty_grid() {
        let grid = OccupancyGrid::filled(8, 0.0);
        let samples: Vec<_> = (0..40).map(|i| sample(i, Vector3::repeat(0.5))).collect();
        let kept: Vec<usize> = rejection_filter(&grid, &samples, 0.5, 20)
            .iter()
            .map(|s| s.index)
            .collect();
        assert_eq!(kept, vec![10, 30]);

        let full = OccupancyGrid::filled(8, 0.6);
        assert_eq!(rejection_filter(&full, &samples, 0.5, 20).len(), 40);
        assert_eq!(rejection_filter(&grid, &samples, 0.0, 20).len(), 40);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = SamplerConfig::default();
        assert_eq!(threshold_schedule(1, &cfg), 1.0);
        assert_eq!(threshold_schedule(10, &cfg), 0.05);
        assert_eq!(threshold_schedule(50, &cfg), 0.05);
        assert_eq!(threshold_schedule(0, &cfg), 1.0);
        let mid = threshold_schedule(5, &cfg);
        assert!((mid - (1.0 - 0.95 * 4.0 / 9.0)).abs() < 1e-12);
        for f in 1..12 {
            assert!(threshold_schedule(f + 1, &cfg) <= threshold_schedule(f, &cfg));
        }
    }

    #[test]
    fn global_update_extremes() {
        let grid = OccupancyGrid::filled(4, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = global_update_baseline(&grid, |p| Ok(vec![0.0; p.len()]), 2, &mut rng).unwrap();
        assert!(empty.values().iter().all(|v| *v == 0.0));
        let full = global_update_baseline(&grid, |p| Ok(vec![1e4; p.len()]), 1, &mut rng).unwrap();
        assert!(full.values().iter().all(|v| *v > 0.999));
    }

    #[test]
    fn dump_writes_raw_and_sidecar() {
        let mut grid = OccupancyGrid::filled(3, 0.25);
        grid.frame_index = 4;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.raw");
        grid.dump(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 27 * 4);
        assert_eq!(f32::from_le_bytes(bytes[..4].try_into().unwrap()), 0.25);
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("grid.json")).unwrap())
                .unwrap();
        assert_eq!(meta["resolution"], 3);
        assert_eq!(meta["frame_index"], 4);
    }
}
