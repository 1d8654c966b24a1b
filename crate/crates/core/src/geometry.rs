//! Pinhole cameras, pixel rays and world-to-image projection.
//!
//! Pixel coordinates are continuous with pixel centers at half-integers:
//! pixel `(i, j)` covers `[i, i+1) x [j, j+1)` and its center is
//! `(i + 0.5, j + 0.5)`. Cameras follow the OpenCV convention (x right,
//! y down, z forward) and the extrinsics map world to camera coordinates,
//! `x_cam = R * x_world + t`.

use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub near: f64,
    pub far: f64,
    projection: Matrix3x4<f64>,
    center: Vector3<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        width: u32,
        height: u32,
        (fx, fy, cx, cy): (f64, f64, f64, f64),
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let id = id.into();
        if width == 0 || height == 0 {
            return Err(Error::Config(format!("camera {id}: empty image size")));
        }
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Config(format!(
                "camera {id}: focal lengths must be positive"
            )));
        }
        if !(near > 0.0 && near < far) {
            return Err(Error::Config(format!("camera {id}: need 0 < near < far")));
        }
        let ortho = rotation * rotation.transpose() - Matrix3::identity();
        if ortho.amax() >= 1e-6 {
            return Err(Error::Config(format!(
                "camera {id}: rotation is not orthonormal"
            )));
        }
        let intrinsics = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        let mut extrinsics = Matrix3x4::zeros();
        extrinsics.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        extrinsics.set_column(3, &translation);
        Ok(Self {
            id,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            near,
            far,
            projection: intrinsics * extrinsics,
            center: -(rotation.transpose() * translation),
        })
    }

    /// `P = K [R | t]`.
    #[inline]
    pub fn projection_matrix(&self) -> &Matrix3x4<f64> {
        &self.projection
    }

    /// Camera center in world coordinates.
    #[inline]
    pub fn center(&self) -> Vector3<f64> {
        self.center
    }

    /// Optical axis (+z of the camera frame) expressed in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn ray_for_pixel(&self, u: f64, v: f64) -> Result<Ray> {
        if !(u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64) {
            return Err(Error::PixelOutOfBounds {
                u,
                v,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.ray_through(u + 0.5, v + 0.5))
    }

    /// Ray through continuous image coordinates, no bounds check.
    pub(crate) fn ray_through(&self, px: f64, py: f64) -> Ray {
        let local = Vector3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        let direction = (self.rotation.transpose() * local).normalize();
        Ray {
            origin: self.center,
            direction,
            pixel: (px, py),
        }
    }

    pub fn project_point(&self, x: &Vector3<f64>) -> Projection {
        let p = project_homogeneous(&self.projection, x);
        let valid = p.depth > 0.0
            && p.uv.0 >= 0.0
            && p.uv.0 < self.width as f64
            && p.uv.1 >= 0.0
            && p.uv.1 < self.height as f64;
        Projection { valid, ..p }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    /// Continuous image coordinates the ray passes through.
    pub pixel: (f64, f64),
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }

    /// Parametric entry/exit of the axis-aligned box `[lo, hi]^3`, if any.
    pub fn clip_to_box(&self, lo: f64, hi: f64) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let o = self.origin[a];
            let d = self.direction[a];
            if d.abs() < 1e-15 {
                if o < lo || o > hi {
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

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub uv: (f64, f64),
    pub depth: f64,
    pub valid: bool,
}

/// Applies a 3x4 projection and perspective divide. Validity is left to the caller.
#[inline]
pub fn project_homogeneous(p: &Matrix3x4<f64>, x: &Vector3<f64>) -> Projection {
    let h = p * Vector4::new(x.x, x.y, x.z, 1.0);
    Projection {
        uv: (h.x / h.z, h.y / h.z),
        depth: h.z,
        valid: h.z > 0.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub train_cameras: Vec<Camera>,
    pub test_cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn new(train_cameras: Vec<Camera>, test_cameras: Vec<Camera>) -> Result<Self> {
        let first = train_cameras
            .first()
            .ok_or_else(|| Error::Config("rig has no training cameras".into()))?;
        let (w, h) = (first.width, first.height);
        let mut seen = std::collections::HashSet::new();
        for cam in train_cameras.iter().chain(&test_cameras) {
            if (cam.width, cam.height) != (w, h) {
                return Err(Error::Config(format!(
                    "camera {} is {}x{}, rig uses {w}x{h}",
                    cam.id, cam.width, cam.height
                )));
            }
            if !seen.insert(cam.id.as_str()) {
                return Err(Error::Config(format!("duplicate camera id {}", cam.id)));
            }
        }
        Ok(Self {
            train_cameras,
            test_cameras,
        })
    }

    pub fn image_size(&self) -> (u32, u32) {
        (self.train_cameras[0].width, self.train_cameras[0].height)
    }

    pub fn cameras(&self) -> impl Iterator<Item = &Camera> {
        self.train_cameras.iter().chain(&self.test_cameras)
    }

    pub fn camera(&self, id: &str) -> Option<&Camera> {
        self.cameras().find(|c| c.id == id)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<CameraRecord> =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for rec in records {
            let role = rec.role;
            let cam = rec.into_camera().map_err(|e| Error::parse(path, e))?;
            match role {
                CameraRole::Train => train.push(cam),
                CameraRole::Test => test.push(cam),
            }
        }
        CameraRig::new(train, test).map_err(|e| Error::parse(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let records: Vec<CameraRecord> = self
            .train_cameras
            .iter()
            .map(|c| CameraRecord::from_camera(c, CameraRole::Train))
            .chain(
                self.test_cameras
                    .iter()
                    .map(|c| CameraRecord::from_camera(c, CameraRole::Test)),
            )
            .collect();
        let text = serde_json::to_string_pretty(&records).expect("camera records serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraRole {
    Train,
    Test,
}

/// One entry of `cameras.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    pub t: [f64; 3],
    pub near: f64,
    pub far: f64,
    pub role: CameraRole,
}

impl CameraRecord {
    fn from_camera(cam: &Camera, role: CameraRole) -> Self {
        let r = &cam.rotation;
        Self {
            id: cam.id.clone(),
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            t: [cam.translation.x, cam.translation.y, cam.translation.z],
            near: cam.near,
            far: cam.far,
            role,
        }
    }

    fn into_camera(self) -> Result<Camera> {
        Camera::new(
            self.id,
            self.width,
            self.height,
            (self.fx, self.fy, self.cx, self.cy),
            Matrix3::from_row_slice(&self.rotation),
            Vector3::from(self.t),
            self.near,
            self.far,
        )
    }
}

/// Image format shared by every camera of a generated rig.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lens {
    pub width: u32,
    pub height: u32,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    pub near: f64,
    pub far: f64,
}

impl Lens {
    pub fn focal(&self) -> f64 {
        self.width as f64 / (2.0 * (self.fov_deg.to_radians() / 2.0).tan())
    }
}

impl Default for Lens {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fov_deg: 40.0,
            near: 0.5,
            far: 4.0,
        }
    }
}

/// World-to-camera rotation for a camera at `eye` looking at `target`,
/// with image-down roughly along world +y.
pub fn look_at_rotation(eye: &Vector3<f64>, target: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let forward = target - eye;
    if forward.norm() < 1e-12 {
        return Err(Error::Config(
            "look-at target coincides with camera position".into(),
        ));
    }
    let forward = forward.normalize();
    let down_hint = Vector3::new(0.0, 1.0, 0.0);
    let right = down_hint.cross(&forward);
    if right.norm() < 1e-9 {
        return Err(Error::Config(
            "viewing direction parallel to the up axis".into(),
        ));
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    Ok(Matrix3::from_rows(&[
        right.transpose(),
        down.transpose(),
        forward.transpose(),
    ]))
}

fn camera_looking_at(
    id: String,
    eye: Vector3<f64>,
    target: &Vector3<f64>,
    lens: &Lens,
) -> Result<Camera> {
    let rotation = look_at_rotation(&eye, target)?;
    let translation = -(rotation * eye);
    let f = lens.focal();
    Camera::new(
        id,
        lens.width,
        lens.height,
        (f, f, lens.width as f64 / 2.0, lens.height as f64 / 2.0),
        rotation,
        translation,
        lens.near,
        lens.far,
    )
}

/// `rows x cols` training cameras spread over a spherical patch of angular
/// width `spread_deg` around the -z axis of `look_at`, all aimed at `look_at`,
/// plus one test camera at the patch center.
pub fn make_forward_facing_rig(
    rows: usize,
    cols: usize,
    spread_deg: f64,
    distance: f64,
    look_at: Vector3<f64>,
    lens: &Lens,
) -> Result<CameraRig> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config(
            "rig needs at least one row and column".into(),
        ));
    }
    if !(spread_deg > 0.0 && spread_deg < 180.0) {
        return Err(Error::Config(format!(
            "spread {spread_deg} not in (0, 180)"
        )));
    }
    if !(distance > 0.0) {
        return Err(Error::Config(
            "look-at target coincides with camera position".into(),
        ));
    }
    let spread = spread_deg.to_radians();
    let offset = |i: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            -spread / 2.0 + spread * i as f64 / (n - 1) as f64
        }
    };
    let eye_at = |azimuth: f64, elevation: f64| {
        look_at
            + distance
                * Vector3::new(
                    azimuth.sin() * elevation.cos(),
                    elevation.sin(),
                    -azimuth.cos() * elevation.cos(),
                )
    };
    let mut train = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let eye = eye_at(offset(c, cols), offset(r, rows));
            train.push(camera_looking_at(
                format!("cam{:02}", r * cols + c),
                eye,
                &look_at,
                lens,
            )?);
        }
    }
    let test = camera_looking_at("test".into(), eye_at(0.0, 0.0), &look_at, lens)?;
    CameraRig::new(train, vec![test])
}
