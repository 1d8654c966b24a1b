//! Discrete volume rendering over occupancy-filtered ray samples.

use std::ops::Range;

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::encoding::frequency_encode;
use crate::field::TIME_OCTAVES;
use crate::field::{Conditioning, FieldOutput, FieldTape, RadianceField};
use crate::geometry::{Camera, CameraRig, Ray};
use crate::occgrid::{rejection_filter, OccupancyGrid};
use crate::projcolor::projected_color_stats;
use crate::raster::{Image, Rgb};
use crate::scene::FrameObservation;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySample {
    pub x: Vector3<f64>,
    pub t: f64,
    pub delta: f64,
    /// Position of the sample among the ray's uniform bins.
    pub index: usize,
}

/// A sample after field evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadedSample {
    pub t: f64,
    pub delta: f64,
    pub sigma: f64,
    pub color: Rgb,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderResult {
    /// Accumulated radiance, not including the background.
    pub color: Rgb,
    pub final_transmittance: f64,
    pub expected_depth: f64,
    pub sample_count: usize,
}

impl RenderResult {
    pub const EMPTY: Self = Self {
        color: [0.0; 3],
        final_transmittance: 1.0,
        expected_depth: 0.0,
        sample_count: 0,
    };

    /// Radiance composited over `background` with the remaining transmittance.
    pub fn over(&self, background: &Rgb) -> Rgb {
        let t = self.final_transmittance;
        [
            self.color[0] + t * background[0],
            self.color[1] + t * background[1],
            self.color[2] + t * background[2],
        ]
    }
}

/// `n` samples over `[near, far]`, one per equal bin: bin midpoints when
/// `jitter` is `None`, otherwise uniformly placed within each bin.
pub fn sample_uniform<R: Rng + ?Sized>(
    ray: &Ray,
    near: f64,
    far: f64,
    n: usize,
    jitter: Option<&mut R>,
) -> Vec<RaySample> {
    let width = (far - near) / n as f64;
    let mut out = Vec::with_capacity(n);
    match jitter {
        None => {
            for i in 0..n {
                let t = near + (i as f64 + 0.5) * width;
                out.push(RaySample {
                    x: ray.at(t),
                    t,
                    delta: width,
                    index: i,
                });
            }
        }
        Some(rng) => {
            for i in 0..n {
                let t = near + (i as f64 + rng.gen::<f64>()) * width;
                out.push(RaySample {
                    x: ray.at(t),
                    t,
                    delta: width,
                    index: i,
                });
            }
        }
    }
    out
}

/// Weights `w_i = T_i (1 - exp(-sigma_i delta_i))` with
/// `T_i = exp(-sum_{j<i} sigma_j delta_j)`.
pub fn composite(samples: &[ShadedSample]) -> Result<RenderResult> {
    let mut color = [0.0; 3];
    let mut optical = 0.0f64;
    let mut weight_sum = 0.0f64;
    let mut depth_sum = 0.0;
    for s in samples {
        if !(s.sigma >= 0.0) || !(s.delta >= 0.0) {
            return Err(Error::Contract(format!(
                "negative density {} or interval {}",
                s.sigma, s.delta
            )));
        }
        let tau = s.sigma * s.delta;
        let w = (-optical).exp() * (1.0 - (-tau).exp());
        for c in 0..3 {
            color[c] += w * s.color[c];
        }
        weight_sum += w;
        depth_sum += w * s.t;
        optical += tau;
    }
    Ok(RenderResult {
        color,
        final_transmittance: (-optical).exp(),
        expected_depth: depth_sum / weight_sum.max(1e-10),
        sample_count: samples.len(),
    })
}

/// Gradients of `dl_color . (color + T_final * background) + dl_depth * depth`
/// with respect to every sample's density and color.
pub fn composite_backward(
    samples: &[ShadedSample],
    background: &Rgb,
    dl_color: &Rgb,
    dl_depth: f64,
) -> (Vec<f64>, Vec<Rgb>) {
    let n = samples.len();
    let mut weights = Vec::with_capacity(n);
    let mut trans_after = Vec::with_capacity(n);
    let mut optical = 0.0f64;
    for s in samples {
        let tau = s.sigma * s.delta;
        let before = (-optical).exp();
        optical += tau;
        let after = (-optical).exp();
        weights.push(before * (1.0 - (-tau).exp()));
        trans_after.push(after);
    }
    let final_t = (-optical).exp();
    let weight_sum: f64 = weights.iter().sum();
    let depth_num: f64 = weights.iter().zip(samples).map(|(w, s)| w * s.t).sum();
    let denom = weight_sum.max(1e-10);
    let depth = depth_num / denom;
    let bg_term: f64 = (0..3).map(|c| dl_color[c] * background[c]).sum::<f64>() * final_t;

    let mut d_sigma = vec![0.0; n];
    let mut d_color = vec![[0.0; 3]; n];
    // suffix sums over i > k
    let mut tail_c = 0.0;
    let mut tail_t = 0.0;
    let mut tail_w = 0.0;
    for k in (0..n).rev() {
        let s = &samples[k];
        let wc: f64 = (0..3).map(|c| dl_color[c] * s.color[c]).sum();
        let dc = s.delta * (trans_after[k] * wc - tail_c) - s.delta * bg_term;
        let dn = s.delta * (trans_after[k] * s.t - tail_t);
        let dw = s.delta * (trans_after[k] - tail_w);
        let dd = if weight_sum > 1e-10 {
            (dn - depth * dw) / denom
        } else {
            dn / denom
        };
        d_sigma[k] = dc + dl_depth * dd;
        d_color[k] = [
            weights[k] * dl_color[0],
            weights[k] * dl_color[1],
            weights[k] * dl_color[2],
        ];
        tail_c += weights[k] * wc;
        tail_t += weights[k] * s.t;
        tail_w += weights[k];
    }
    (d_sigma, d_color)
}

/// Where the per-sample conditioning vector comes from.
#[derive(Clone, Copy, Debug)]
pub enum ConditionSource<'a> {
    /// Projected color statistics from the current frame's training images.
    Frame {
        observation: &'a FrameObservation,
        rig: &'a CameraRig,
    },
    /// Normalized time for the space-time baseline.
    Time(f64),
    None,
}

impl ConditionSource<'_> {
    pub(crate) fn fill(
        &self,
        kind: Conditioning,
        x: &Vector3<f64>,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        match (kind, self) {
            (Conditioning::ProjectedColor, ConditionSource::Frame { observation, rig }) => {
                let s = projected_color_stats(x, observation, rig);
                out.extend_from_slice(&s.mean);
                out.extend_from_slice(&s.variance);
            }
            (Conditioning::SpaceTime, ConditionSource::Time(t)) => {
                let mut buf = [0.0; 2 * TIME_OCTAVES];
                frequency_encode(&[*t], TIME_OCTAVES, &mut buf);
                out.extend_from_slice(&buf);
            }
            (Conditioning::None, _) => {}
            (kind, _) => {
                return Err(Error::Contract(format!(
                    "{kind:?} field given mismatched condition source"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    /// Occupancy value below which non-stride samples are rejected.
    pub threshold: f64,
    pub interval: usize,
    pub background: Rgb,
    /// Seed for jittered sampling; `None` samples bin midpoints.
    pub jitter_seed: Option<u64>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 128,
            threshold: 0.0,
            interval: 20,
            background: [0.0; 3],
            jitter_seed: None,
        }
    }
}

/// A ray with its sampling bounds.
#[derive(Clone, Copy, Debug)]
pub struct PixelRay {
    pub ray: Ray,
    pub near: f64,
    pub far: f64,
}

impl PixelRay {
    pub fn from_camera(camera: &Camera, px: u32, py: u32) -> Self {
        Self {
            ray: camera.ray_through(px as f64 + 0.5, py as f64 + 0.5),
            near: camera.near,
            far: camera.far,
        }
    }
}

/// Samples, field outputs and composited results for a batch of rays.
#[derive(Debug, Default)]
pub struct MarchedBatch {
    pub spans: Vec<Range<usize>>,
    pub samples: Vec<RaySample>,
    pub outputs: Vec<FieldOutput>,
    pub results: Vec<RenderResult>,
}

impl MarchedBatch {
    pub fn shaded(&self, ray: usize) -> Vec<ShadedSample> {
        let span = self.spans[ray].clone();
        self.samples[span.clone()]
            .iter()
            .zip(&self.outputs[span])
            .map(|(s, o)| ShadedSample {
                t: s.t,
                delta: s.delta,
                sigma: o.sigma,
                color: o.color,
            })
            .collect()
    }
}

/// Ray pipeline: clip to the unit cube, sample uniformly, drop samples in
/// unoccupied voxels, condition, evaluate the field, composite.
pub fn march_rays<R: Rng + ?Sized>(
    field: &RadianceField,
    grid: Option<&OccupancyGrid>,
    rays: &[PixelRay],
    cond: &ConditionSource,
    config: &RenderConfig,
    mut rng: Option<&mut R>,
    tape: Option<&mut FieldTape>,
) -> Result<MarchedBatch> {
    let mut spans = Vec::with_capacity(rays.len());
    let mut samples = Vec::new();
    for pr in rays {
        let start = samples.len();
        if let Some((a, b)) = pr.ray.clip_to_box(0.0, 1.0) {
            let (a, b) = (a.max(pr.near), b.min(pr.far));
            if a < b {
                let mut ray_samples =
                    sample_uniform(&pr.ray, a, b, config.samples_per_ray, rng.as_deref_mut());
                for s in &mut ray_samples {
                    s.x = s.x.map(|v| v.clamp(0.0, 1.0));
                }
                match grid {
                    Some(g) => samples.extend(rejection_filter(
                        g,
                        &ray_samples,
                        config.threshold,
                        config.interval,
                    )),
                    None => samples.extend(ray_samples),
                }
            }
        }
        spans.push(start..samples.len());
    }

    let kind = field.conditioning();
    let mut cond_values = Vec::with_capacity(samples.len() * kind.dim());
    let mut xs = Vec::with_capacity(samples.len());
    let mut dirs = Vec::with_capacity(samples.len());
    for (r, span) in spans.iter().enumerate() {
        for s in &samples[span.clone()] {
            cond.fill(kind, &s.x, &mut cond_values)?;
            xs.push(s.x);
            dirs.push(rays[r].ray.direction);
        }
    }
    let outputs = field.forward(&xs, &dirs, &cond_values, tape)?;
    let mut batch = MarchedBatch {
        spans,
        samples,
        outputs,
        results: Vec::with_capacity(rays.len()),
    };
    for r in 0..rays.len() {
        batch.results.push(composite(&batch.shaded(r))?);
    }
    Ok(batch)
}

#[derive(Clone, Debug)]
pub struct RenderedView {
    pub image: Image,
    pub depth: Vec<f64>,
    pub mean_samples_per_ray: f64,
}

const RENDER_CHUNK: usize = 256;

/// Renders every pixel of `camera`.
pub fn render_image(
    field: &RadianceField,
    grid: Option<&OccupancyGrid>,
    camera: &Camera,
    cond: &ConditionSource,
    config: &RenderConfig,
) -> Result<RenderedView> {
    let (w, h) = (camera.width, camera.height);
    let rays: Vec<PixelRay> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| PixelRay::from_camera(camera, x, y))
        .collect();
    let chunks: Vec<Result<(Vec<Rgb>, Vec<f64>, usize)>> = rays
        .par_chunks(RENDER_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut rng = config.jitter_seed.map(|s| {
                ChaCha8Rng::seed_from_u64(s ^ (ci as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
            });
            let batch = march_rays(field, grid, chunk, cond, config, rng.as_mut(), None)?;
            let colors = batch
                .results
                .iter()
                .map(|r| r.over(&config.background))
                .collect();
            let depths = batch.results.iter().map(|r| r.expected_depth).collect();
            Ok((colors, depths, batch.samples.len()))
        })
        .collect();
    let mut pixels = Vec::with_capacity(rays.len());
    let mut depth = Vec::with_capacity(rays.len());
    let mut total = 0;
    for chunk in chunks {
        let (c, d, n) = chunk?;
        pixels.extend(c);
        depth.extend(d);
        total += n;
    }
    Ok(RenderedView {
        image: Image::from_pixels(w, h, pixels)?,
        depth,
        mean_samples_per_ray: total as f64 / rays.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::LN_2;

    fn shaded(sigma: f64, delta: f64, t: f64, color: Rgb) -> ShadedSample {
        ShadedSample {
            t,
            delta,
            sigma,
            color,
        }
    }

    fn z_ray() -> Ray {
        Ray {
            origin: Vector3::zeros(),
            direction: Vector3::z(),
            pixel: (0.0, 0.0),
        }
    }

    #[test]
    fn single_bin_sample() {
        let s = sample_uniform::<ChaCha8Rng>(&z_ray(), 1.0, 3.0, 1, None);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].t, 2.0);
        assert_eq!(s[0].delta, 2.0);
    }

    #[test]
    fn midpoints() {
        let s = sample_uniform::<ChaCha8Rng>(&z_ray(), 0.0, 1.0, 4, None);
        let t: Vec<f64> = s.iter().map(|s| s.t).collect();
        assert_eq!(t, vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn jitter_stays_in_bins_and_replays() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let sa = sample_uniform(&z_ray(), 0.5, 2.5, 16, Some(&mut a));
        let sb = sample_uniform(&z_ray(), 0.5, 2.5, 16, Some(&mut b));
        assert_eq!(sa, sb);
        for (i, s) in sa.iter().enumerate() {
            let lo = 0.5 + i as f64 * 0.125;
            assert!(s.t >= lo && s.t < lo + 0.125);
            assert_eq!(s.index, i);
        }
    }

    #[test]
    fn empty_space_is_transparent() {
        let r = composite(&[
            shaded(0.0, 0.1, 1.0, [1.0; 3]),
            shaded(0.0, 0.1, 1.1, [1.0; 3]),
        ])
        .unwrap();
        assert_eq!(r.color, [0.0; 3]);
        assert_eq!(r.final_transmittance, 1.0);
        assert_eq!(r.expected_depth, 0.0);
    }

    #[test]
    fn two_half_opaque_samples() {
        let r = composite(&[
            shaded(LN_2, 1.0, 1.0, [1.0, 0.0, 0.0]),
            shaded(LN_2 / 2.0, 2.0, 2.0, [0.0, 1.0, 0.0]),
        ])
        .unwrap();
        assert_abs_diff_eq!(r.color[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.color[1], 0.25, epsilon = 1e-15);
        assert_eq!(r.color[2], 0.0);
        assert_abs_diff_eq!(r.final_transmittance, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(
            r.expected_depth,
            (0.5 * 1.0 + 0.25 * 2.0) / 0.75,
            epsilon = 1e-14
        );
    }

    #[test]
    fn negative_inputs_rejected() {
        assert!(matches!(
            composite(&[shaded(-1.0, 0.1, 0.0, [0.0; 3])]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            composite(&[shaded(1.0, -0.1, 0.0, [0.0; 3])]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<ShadedSample> = (0..12)
            .map(|i| {
                shaded(
                    rng.gen_range(0.0..4.0),
                    0.1,
                    1.0 + 0.1 * i as f64,
                    [rng.gen(), rng.gen(), rng.gen()],
                )
            })
            .collect();
        let bg = [0.3, 0.6, 0.9];
        let gc = [0.7, -1.1, 0.4];
        let gd = 0.8;
        let loss = |s: &[ShadedSample]| {
            let r = composite(s).unwrap();
            let c = r.over(&bg);
            (0..3).map(|i| gc[i] * c[i]).sum::<f64>() + gd * r.expected_depth
        };
        let (ds, dc) = composite_backward(&samples, &bg, &gc, gd);
        let h = 1e-6;
        for k in 0..samples.len() {
            let mut up = samples.clone();
            let mut down = samples.clone();
            up[k].sigma += h;
            down[k].sigma -= h;
            let fd = (loss(&up) - loss(&down)) / (2.0 * h);
            assert!(
                (fd - ds[k]).abs() < 1e-6 * (1.0 + fd.abs()),
                "sigma {k}: {fd} vs {}",
                ds[k]
            );
            for c in 0..3 {
                let mut up = samples.clone();
                let mut down = samples.clone();
                up[k].color[c] += h;
                down[k].color[c] -= h;
                let fd = (loss(&up) - loss(&down)) / (2.0 * h);
                assert!((fd - dc[k][c]).abs() < 1e-6);
            }
        }
    }
}
