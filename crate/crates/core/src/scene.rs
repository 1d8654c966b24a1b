//! Procedural dynamic scenes, their analytic ground-truth renderer and the
//! on-disk dataset format.
//!
//! Scenes are unions of constant-density, constant-color spheres and boxes
//! moving along piecewise-linear paths inside the unit cube. The oracle
//! renderer integrates the volume rendering equation in closed form over
//! the exact ray/primitive intervals, so it is independent of the sampled
//! renderer used in training.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_forward_facing_rig, Camera, CameraRig, Lens, Ray};
use crate::raster::{Image, Rgb};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

impl Shape {
    fn extent(&self) -> Vector3<f64> {
        match self {
            Shape::Sphere { radius } => Vector3::repeat(*radius),
            Shape::Box { half_extents } => Vector3::from(*half_extents),
        }
    }

    /// Ray parameter interval inside the shape centered at `center`.
    fn intersect(&self, center: &Vector3<f64>, ray: &Ray) -> Option<(f64, f64)> {
        match self {
            Shape::Sphere { radius } => {
                let oc = ray.origin - center;
                let b = oc.dot(&ray.direction);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some((-b - s, -b + s))
            }
            Shape::Box { half_extents } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    let lo = center[a] - half_extents[a];
                    let hi = center[a] + half_extents[a];
                    let (o, d) = (ray.origin[a], ray.direction[a]);
                    if d.abs() < 1e-15 {
                        if o <= lo || o >= hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((lo - o) / d, (hi - o) / d);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                }
                (t0 < t1).then_some((t0, t1))
            }
        }
    }

    fn contains(&self, center: &Vector3<f64>, x: &Vector3<f64>) -> bool {
        match self {
            Shape::Sphere { radius } => (x - center).norm_squared() <= radius * radius,
            Shape::Box { half_extents } => {
                (0..3).all(|a| (x[a] - center[a]).abs() <= half_extents[a])
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame: usize,
    pub center: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub color: Rgb,
    pub density: f64,
    /// Piecewise-linear center path over frame index; held constant
    /// before the first and after the last keyframe.
    pub trajectory: Vec<Keyframe>,
}

impl Primitive {
    pub fn center_at(&self, k: usize) -> Vector3<f64> {
        let path = &self.trajectory;
        let first = &path[0];
        if k <= first.frame {
            return Vector3::from(first.center);
        }
        for pair in path.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if k <= b.frame {
                let s = (k - a.frame) as f64 / (b.frame - a.frame) as f64;
                return Vector3::from(a.center).lerp(&Vector3::from(b.center), s);
            }
        }
        Vector3::from(path[path.len() - 1].center)
    }

    pub fn contains(&self, k: usize, x: &Vector3<f64>) -> bool {
        self.shape.contains(&self.center_at(k), x)
    }
}

/// Rig layout stored alongside a scene spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub rows: usize,
    pub cols: usize,
    pub spread_deg: f64,
    pub distance: f64,
    pub look_at: [f64; 3],
    pub width: u32,
    pub height: u32,
    pub fov_deg: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        let lens = Lens::default();
        Self {
            rows: 3,
            cols: 4,
            spread_deg: 40.0,
            distance: 2.0,
            look_at: [0.5, 0.5, 0.5],
            width: lens.width,
            height: lens.height,
            fov_deg: lens.fov_deg,
            near: lens.near,
            far: lens.far,
        }
    }
}

impl RigSpec {
    pub fn build(&self) -> Result<CameraRig> {
        let lens = Lens {
            width: self.width,
            height: self.height,
            fov_deg: self.fov_deg,
            near: self.near,
            far: self.far,
        };
        make_forward_facing_rig(
            self.rows,
            self.cols,
            self.spread_deg,
            self.distance,
            Vector3::from(self.look_at),
            &lens,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: Rgb,
    #[serde(default)]
    pub primitives: Vec<Primitive>,
    pub frame_count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rig: RigSpec,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count == 0 {
            return Err(Error::Config("frame_count must be at least 1".into()));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("background outside [0, 1]".into()));
        }
        for (n, p) in self.primitives.iter().enumerate() {
            if !(p.density >= 0.0) || !p.density.is_finite() {
                return Err(Error::Config(format!(
                    "primitive {n}: density must be >= 0"
                )));
            }
            if p.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Config(format!(
                    "primitive {n}: color outside [0, 1]"
                )));
            }
            if p.trajectory.is_empty() {
                return Err(Error::Config(format!("primitive {n}: empty trajectory")));
            }
            if p.trajectory.windows(2).any(|w| w[0].frame >= w[1].frame) {
                return Err(Error::Config(format!(
                    "primitive {n}: keyframes must have increasing frame indices"
                )));
            }
            let extent = p.shape.extent();
            if extent.iter().any(|e| !(*e > 0.0)) {
                return Err(Error::Config(format!("primitive {n}: non-positive size")));
            }
            for k in 0..self.frame_count {
                let c = p.center_at(k);
                let inside = (0..3).all(|a| c[a] - extent[a] >= 0.0 && c[a] + extent[a] <= 1.0);
                if !inside {
                    return Err(Error::Config(format!(
                        "primitive {n} leaves the unit cube at frame {k}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SceneSpec = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
        spec.validate().map_err(|e| Error::parse(path, e))?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::parse(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// True if any primitive contains `x` at frame `k`.
    pub fn occupied(&self, k: usize, x: &Vector3<f64>) -> bool {
        self.primitives
            .iter()
            .any(|p| p.density > 0.0 && p.contains(k, x))
    }
}

/// Exact radiance along one ray at frame `k` over `[t_near, t_far]`.
pub fn oracle_ray(spec: &SceneSpec, ray: &Ray, k: usize, t_near: f64, t_far: f64) -> Rgb {
    // (t, entering?, primitive)
    let mut events: Vec<(f64, bool, usize)> = Vec::new();
    for (n, p) in spec.primitives.iter().enumerate() {
        if p.density <= 0.0 {
            continue;
        }
        if let Some((a, b)) = p.shape.intersect(&p.center_at(k), ray) {
            let (a, b) = (a.max(t_near), b.min(t_far));
            if a < b {
                events.push((a, true, n));
                events.push((b, false, n));
            }
        }
    }
    let bg = spec.background;
    if events.is_empty() {
        return bg;
    }
    events.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));

    let mut active: Vec<usize> = Vec::new();
    let mut transmittance = 1.0;
    let mut color = [0.0; 3];
    let mut prev_t = events[0].0;
    for &(t, entering, n) in &events {
        let len = t - prev_t;
        if len > 0.0 && !active.is_empty() {
            let mut sigma = 0.0;
            let mut weighted = [0.0; 3];
            for &m in &active {
                let p = &spec.primitives[m];
                sigma += p.density;
                for c in 0..3 {
                    weighted[c] += p.density * p.color[c];
                }
            }
            let alpha = 1.0 - (-sigma * len).exp();
            for c in 0..3 {
                color[c] += transmittance * alpha * weighted[c] / sigma;
            }
            transmittance *= 1.0 - alpha;
        }
        if entering {
            active.push(n);
        } else if let Some(pos) = active.iter().position(|&m| m == n) {
            active.swap_remove(pos);
        }
        prev_t = t;
    }
    for c in 0..3 {
        color[c] += transmittance * bg[c];
    }
    color
}

pub fn oracle_render(spec: &SceneSpec, camera: &Camera, k: usize) -> Image {
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<Rgb> = (0..w as usize * h as usize)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % w as usize) as f64, (i / w as usize) as f64);
            let ray = camera.ray_through(x + 0.5, y + 0.5);
            oracle_ray(spec, &ray, k, camera.near, camera.far)
        })
        .collect();
    Image::from_pixels(w, h, pixels).expect("pixel count matches camera")
}

/// The training-camera images of one frame, ordered like `rig.train_cameras`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameObservation {
    pub index: usize,
    pub images: Vec<Image>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub rig: CameraRig,
    pub background: Rgb,
    /// Per frame, camera id to image. Holds train cameras and, when present, test cameras.
    pub frames: Vec<BTreeMap<String, Image>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    background: Rgb,
    frame_count: usize,
}

impl Dataset {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn image(&self, k: usize, camera_id: &str) -> Result<&Image> {
        self.frames
            .get(k)
            .and_then(|f| f.get(camera_id))
            .ok_or_else(|| Error::Data(format!("no image for camera {camera_id} at frame {k}")))
    }

    pub fn observation(&self, k: usize) -> Result<FrameObservation> {
        let images = self
            .rig
            .train_cameras
            .iter()
            .map(|cam| self.image(k, &cam.id).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(FrameObservation { index: k, images })
    }

    fn check(&self) -> Result<()> {
        let (w, h) = self.rig.image_size();
        for (k, frame) in self.frames.iter().enumerate() {
            for cam in &self.rig.train_cameras {
                if !frame.contains_key(&cam.id) {
                    return Err(Error::Data(format!("frame {k} lacks camera {}", cam.id)));
                }
            }
            for (id, img) in frame {
                if (img.width(), img.height()) != (w, h) {
                    return Err(Error::Data(format!(
                        "frame {k} camera {id}: image is {}x{}, expected {w}x{h}",
                        img.width(),
                        img.height()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.rig.write_json(&dir.join("cameras.json"))?;
        let meta = DatasetMeta {
            background: self.background,
            frame_count: self.frames.len(),
        };
        let meta_path = dir.join("meta.json");
        std::fs::write(
            &meta_path,
            serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )
        .map_err(|e| Error::io(&meta_path, e))?;
        for cam in self.rig.cameras() {
            let cam_dir = dir.join("frames").join(&cam.id);
            std::fs::create_dir_all(&cam_dir).map_err(|e| Error::io(&cam_dir, e))?;
            for (k, frame) in self.frames.iter().enumerate() {
                if let Some(img) = frame.get(&cam.id) {
                    img.write_png(&cam_dir.join(frame_file(k)))?;
                }
            }
        }
        Ok(())
    }

    /// Loads `cameras.json`, optional `meta.json`, and
    /// `frames/<camera-id>/<k:05>.png`. Without `meta.json` the frame count
    /// is taken from the first training camera's directory and the
    /// background defaults to black.
    pub fn load(dir: &Path) -> Result<Self> {
        let rig = CameraRig::load_json(&dir.join("cameras.json"))?;
        let meta_path = dir.join("meta.json");
        let meta: Option<DatasetMeta> = if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::parse(&meta_path, e))?)
        } else {
            None
        };
        let frames_dir = dir.join("frames");
        let frame_count = match &meta {
            Some(m) => m.frame_count,
            None => {
                let first = frames_dir.join(&rig.train_cameras[0].id);
                let entries = std::fs::read_dir(&first).map_err(|e| Error::io(&first, e))?;
                entries
                    .filter_map(|e| e.ok())
                    .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
                    .count()
            }
        };
        if frame_count == 0 {
            return Err(Error::Data(format!(
                "{}: dataset has no frames",
                dir.display()
            )));
        }
        let (w, h) = rig.image_size();
        let mut frames = vec![BTreeMap::new(); frame_count];
        for cam in rig.cameras() {
            let is_train = rig.train_cameras.iter().any(|c| c.id == cam.id);
            let cam_dir = frames_dir.join(&cam.id);
            if !is_train && !cam_dir.exists() {
                continue;
            }
            for (k, frame) in frames.iter_mut().enumerate() {
                let path = cam_dir.join(frame_file(k));
                if !path.exists() {
                    return Err(Error::Data(format!(
                        "{}: missing image for camera {} at frame {k}",
                        path.display(),
                        cam.id
                    )));
                }
                let img = Image::read_png(&path)?;
                if (img.width(), img.height()) != (w, h) {
                    return Err(Error::Data(format!(
                        "{}: image is {}x{}, camera {} expects {w}x{h}",
                        path.display(),
                        img.width(),
                        img.height(),
                        cam.id
                    )));
                }
                frame.insert(cam.id.clone(), img);
            }
        }
        let dataset = Dataset {
            rig,
            background: meta.map(|m| m.background).unwrap_or([0.0; 3]),
            frames,
        };
        dataset.check()?;
        Ok(dataset)
    }
}

fn frame_file(k: usize) -> String {
    format!("{k:05}.png")
}

pub fn generate_scene(spec: &SceneSpec, rig: &CameraRig) -> Result<Dataset> {
    spec.validate()?;
    let frames = (0..spec.frame_count)
        .map(|k| {
            rig.cameras()
                .map(|cam| (cam.id.clone(), oracle_render(spec, cam, k)))
                .collect()
        })
        .collect();
    Ok(Dataset {
        rig: rig.clone(),
        background: spec.background,
        frames,
    })
}

/// Ready-made scenes used by the CLI defaults, tests and experiments.
pub mod presets {
    use super::*;

    fn still(center: [f64; 3]) -> Vec<Keyframe> {
        vec![Keyframe { frame: 0, center }]
    }

    /// A few constant-color primitives that never move.
    pub fn static_scene(frame_count: usize) -> SceneSpec {
        SceneSpec {
            background: [1.0, 1.0, 1.0],
            primitives: vec![
                Primitive {
                    shape: Shape::Sphere { radius: 0.2 },
                    color: [0.85, 0.2, 0.15],
                    density: 60.0,
                    trajectory: still([0.4, 0.45, 0.55]),
                },
                Primitive {
                    shape: Shape::Box {
                        half_extents: [0.12, 0.12, 0.12],
                    },
                    color: [0.15, 0.35, 0.8],
                    density: 60.0,
                    trajectory: still([0.68, 0.62, 0.45]),
                },
            ],
            frame_count,
            seed: 0,
            rig: RigSpec::default(),
        }
    }

    /// One sphere sweeping across the cube next to a static box.
    pub fn moving_sphere(frame_count: usize) -> SceneSpec {
        let last = frame_count.saturating_sub(1).max(1);
        SceneSpec {
            background: [1.0, 1.0, 1.0],
            primitives: vec![
                Primitive {
                    shape: Shape::Sphere { radius: 0.15 },
                    color: [0.9, 0.25, 0.1],
                    density: 60.0,
                    trajectory: vec![
                        Keyframe {
                            frame: 0,
                            center: [0.2, 0.4, 0.5],
                        },
                        Keyframe {
                            frame: last,
                            center: [0.8, 0.55, 0.5],
                        },
                    ],
                },
                Primitive {
                    shape: Shape::Box {
                        half_extents: [0.1, 0.1, 0.1],
                    },
                    color: [0.1, 0.5, 0.3],
                    density: 60.0,
                    trajectory: still([0.5, 0.75, 0.6]),
                },
            ],
            frame_count,
            seed: 0,
            rig: RigSpec::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sphere_at(center: [f64; 3], radius: f64, density: f64, color: Rgb) -> Primitive {
        Primitive {
            shape: Shape::Sphere { radius },
            color,
            density,
            trajectory: vec![Keyframe { frame: 0, center }],
        }
    }

    fn empty_spec() -> SceneSpec {
        SceneSpec {
            background: [0.2, 0.4, 0.6],
            primitives: vec![],
            frame_count: 2,
            seed: 3,
            rig: RigSpec {
                rows: 1,
                cols: 2,
                width: 16,
                height: 12,
                ..RigSpec::default()
            },
        }
    }

    fn axis_ray(z0: f64) -> Ray {
        Ray {
            origin: Vector3::new(0.5, 0.5, z0),
            direction: Vector3::new(0.0, 0.0, 1.0),
            pixel: (0.0, 0.0),
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let spec = empty_spec();
        let rig = spec.rig.build().unwrap();
        let data = generate_scene(&spec, &rig).unwrap();
        for frame in &data.frames {
            for img in frame.values() {
                assert!(img.pixels().iter().all(|p| *p == spec.background));
            }
        }
    }

    #[test]
    fn half_opacity_closed_form() {
        let mut spec = empty_spec();
        let radius = 0.1;
        // chord length 2r, sigma * L = ln 2
        let density = std::f64::consts::LN_2 / (2.0 * radius);
        spec.primitives
            .push(sphere_at([0.5, 0.5, 0.5], radius, density, [1.0, 0.0, 0.5]));
        let c = oracle_ray(&spec, &axis_ray(-1.0), 0, 0.0, 10.0);
        let b = spec.background;
        let expect = [0.5 + 0.5 * b[0], 0.5 * b[1], 0.25 + 0.5 * b[2]];
        for i in 0..3 {
            assert_abs_diff_eq!(c[i], expect[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn overlapping_primitives_integrate_summed_density() {
        let mut spec = empty_spec();
        spec.primitives
            .push(sphere_at([0.5, 0.5, 0.5], 0.2, 3.0, [1.0, 0.0, 0.0]));
        spec.primitives.push(Primitive {
            shape: Shape::Box {
                half_extents: [0.05, 0.05, 0.05],
            },
            color: [0.0, 0.0, 1.0],
            density: 7.0,
            trajectory: vec![Keyframe {
                frame: 0,
                center: [0.5, 0.5, 0.5],
            }],
        });
        let ray = axis_ray(-1.0);
        let got = oracle_ray(&spec, &ray, 0, 0.0, 10.0);
        // midpoint-rule quadrature of the continuous integral
        let n = 400_000;
        let (t0, t1) = (1.0, 2.0);
        let dt = (t1 - t0) / n as f64;
        let mut trans = 1.0;
        let mut acc = [0.0; 3];
        for i in 0..n {
            let x = ray.at(t0 + (i as f64 + 0.5) * dt);
            let (mut s, mut sc) = (0.0, [0.0; 3]);
            for p in &spec.primitives {
                if p.contains(0, &x) {
                    s += p.density;
                    for c in 0..3 {
                        sc[c] += p.density * p.color[c];
                    }
                }
            }
            if s > 0.0 {
                let a = 1.0 - (-s * dt).exp();
                for c in 0..3 {
                    acc[c] += trans * a * sc[c] / s;
                }
                trans *= 1.0 - a;
            }
        }
        for c in 0..3 {
            acc[c] += trans * spec.background[c];
            assert_abs_diff_eq!(got[c], acc[c], epsilon = 1e-4);
        }
    }

    #[test]
    fn leaving_unit_cube_is_rejected() {
        let mut spec = empty_spec();
        spec.primitives.push(Primitive {
            shape: Shape::Sphere { radius: 0.1 },
            color: [0.5; 3],
            density: 1.0,
            trajectory: vec![
                Keyframe {
                    frame: 0,
                    center: [0.5, 0.5, 0.5],
                },
                Keyframe {
                    frame: 1,
                    center: [0.95, 0.5, 0.5],
                },
            ],
        });
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let rig = spec.rig.build().unwrap();
        assert!(generate_scene(&spec, &rig).is_err());
    }

    #[test]
    fn trajectory_interpolates_and_clamps() {
        let p = Primitive {
            shape: Shape::Sphere { radius: 0.1 },
            color: [0.5; 3],
            density: 1.0,
            trajectory: vec![
                Keyframe {
                    frame: 2,
                    center: [0.2, 0.5, 0.5],
                },
                Keyframe {
                    frame: 6,
                    center: [0.6, 0.5, 0.5],
                },
            ],
        };
        assert_abs_diff_eq!(p.center_at(0).x, 0.2);
        assert_abs_diff_eq!(p.center_at(4).x, 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(p.center_at(9).x, 0.6);
    }

    #[test]
    fn static_scene_frames_identical() {
        let mut spec = presets::static_scene(3);
        spec.rig.width = 24;
        spec.rig.height = 24;
        let rig = spec.rig.build().unwrap();
        let data = generate_scene(&spec, &rig).unwrap();
        assert_eq!(data.frames[0], data.frames[1]);
        assert_eq!(data.frames[1], data.frames[2]);
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = presets::moving_sphere(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.toml");
        spec.save(&path).unwrap();
        assert_eq!(SceneSpec::load(&path).unwrap(), spec);
    }
}
