//! Multi-view projected color statistics used to condition the field.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::CameraRig;
use crate::raster::{Image, Rgb};
use crate::scene::FrameObservation;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedColorStats {
    pub mean: Rgb,
    /// Population variance per channel.
    pub variance: Rgb,
    pub valid_count: usize,
}

impl ProjectedColorStats {
    /// No camera sees the point.
    pub const UNOBSERVED: Self = Self {
        mean: [0.0; 3],
        variance: [1.0; 3],
        valid_count: 0,
    };

    pub fn from_samples(samples: &[Rgb]) -> Self {
        if samples.is_empty() {
            return Self::UNOBSERVED;
        }
        let n = samples.len() as f64;
        let mut mean = [0.0; 3];
        for s in samples {
            for c in 0..3 {
                mean[c] += s[c];
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut variance = [0.0; 3];
        for s in samples {
            for c in 0..3 {
                let d = s[c] - mean[c];
                variance[c] += d * d;
            }
        }
        for v in &mut variance {
            *v /= n;
        }
        Self {
            mean,
            variance,
            valid_count: samples.len(),
        }
    }
}

/// Bilinear lookup at continuous pixel coordinates (centers at half-integers),
/// clamping to the edge pixels.
pub fn bilinear_sample(image: &Image, uv: (f64, f64)) -> Result<Rgb> {
    let (w, h) = (image.width() as f64, image.height() as f64);
    if !(uv.0 >= 0.0 && uv.0 < w && uv.1 >= 0.0 && uv.1 < h) {
        return Err(Error::Contract(format!(
            "sample ({}, {}) outside {w}x{h} image",
            uv.0, uv.1
        )));
    }
    Ok(bilinear_unchecked(image, uv))
}

#[inline]
pub(crate) fn bilinear_unchecked(image: &Image, (u, v): (f64, f64)) -> Rgb {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let x = u - 0.5;
    let y = v - 0.5;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let xa = x0.clamp(0, w - 1) as u32;
    let xb = (x0 + 1).clamp(0, w - 1) as u32;
    let ya = y0.clamp(0, h - 1) as u32;
    let yb = (y0 + 1).clamp(0, h - 1) as u32;
    let (p00, p10, p01, p11) = (
        image.get(xa, ya),
        image.get(xb, ya),
        image.get(xa, yb),
        image.get(xb, yb),
    );
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = p00[c] + fx * (p10[c] - p00[c]);
        let bottom = p01[c] + fx * (p11[c] - p01[c]);
        out[c] = top + fy * (bottom - top);
    }
    out
}

/// Mean and population variance of the colors `x` projects to in every
/// training camera that sees it. Occlusion is not modelled.
pub fn projected_color_stats(
    x: &Vector3<f64>,
    frame: &FrameObservation,
    rig: &CameraRig,
) -> ProjectedColorStats {
    let mut samples = [[0.0; 3]; 64];
    let mut spill = Vec::new();
    let mut n = 0;
    for (cam, image) in rig.train_cameras.iter().zip(&frame.images) {
        let p = cam.project_point(x);
        if !p.valid {
            continue;
        }
        let c = bilinear_unchecked(image, p.uv);
        if n < samples.len() {
            samples[n] = c;
        } else {
            spill.push(c);
        }
        n += 1;
    }
    if spill.is_empty() {
        ProjectedColorStats::from_samples(&samples[..n])
    } else {
        let mut all = samples.to_vec();
        all.extend(spill);
        ProjectedColorStats::from_samples(&all)
    }
}
