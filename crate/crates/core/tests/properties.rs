use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

use flynerf_core::geometry::{look_at_rotation, Camera, CameraRig};
use flynerf_core::occgrid::{rejection_filter, OccupancyGrid, TransitionKernel};
use flynerf_core::projcolor::{bilinear_sample, projected_color_stats, ProjectedColorStats};
use flynerf_core::raster::{Image, Rgb};
use flynerf_core::renderer::{composite, RaySample, ShadedSample};
use flynerf_core::scene::FrameObservation;

fn camera_at(id: &str, eye: Vector3<f64>, target: Vector3<f64>, w: u32, h: u32) -> Camera {
    let rotation: Matrix3<f64> = look_at_rotation(&eye, &target).unwrap();
    let translation = -(rotation * eye);
    let f = 1.2 * w as f64;
    Camera::new(
        id,
        w,
        h,
        (f, f, w as f64 / 2.0, h as f64 / 2.0),
        rotation,
        translation,
        0.1,
        10.0,
    )
    .unwrap()
}

fn vec3(range: std::ops::Range<f64>) -> impl Strategy<Value = Vector3<f64>> {
    (range.clone(), range.clone(), range).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn rgb() -> impl Strategy<Value = Rgb> {
    (0.0..1.0, 0.0..1.0, 0.0..1.0).prop_map(|(r, g, b)| [r, g, b])
}

fn shaded() -> impl Strategy<Value = Vec<ShadedSample>> {
    prop::collection::vec((0.0..0.1f64, 0.0..100.0f64, rgb()), 1..64).prop_map(|v| {
        let mut t = 0.0;
        v.into_iter()
            .map(|(delta, sigma, color)| {
                t += delta;
                ShadedSample {
                    t,
                    delta,
                    sigma,
                    color,
                }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn pixel_ray_projects_back_to_its_pixel(
        eye in vec3(-2.0..-0.5),
        u in 0.0..31.0f64,
        v in 0.0..23.0f64,
        depth in 0.2..5.0f64,
    ) {
        let cam = camera_at("c", eye, Vector3::new(0.5, 0.5, 0.5), 32, 24);
        let ray = cam.ray_for_pixel(u, v).unwrap();
        let p = cam.project_point(&ray.at(depth));
        prop_assert!(p.valid);
        prop_assert!((p.uv.0 - (u + 0.5)).abs() < 1e-8);
        prop_assert!((p.uv.1 - (v + 0.5)).abs() < 1e-8);
    }

    #[test]
    fn projection_is_invariant_to_scaling_the_world(
        eye in vec3(-2.0..-0.5),
        x in vec3(0.2..0.8),
        s in 0.25..4.0f64,
    ) {
        let target = Vector3::new(0.5, 0.5, 0.5);
        let a = camera_at("a", eye, target, 32, 32);
        let b = camera_at("b", eye * s, target * s, 32, 32);
        let pa = a.project_point(&x);
        let pb = b.project_point(&(x * s));
        prop_assert!((pa.uv.0 - pb.uv.0).abs() < 1e-8 && (pa.uv.1 - pb.uv.1).abs() < 1e-8);
        prop_assert!((pa.depth * s - pb.depth).abs() < 1e-8);
    }

    #[test]
    fn projected_stats_ignore_sample_order(samples in prop::collection::vec(rgb(), 1..20), seed in any::<u64>()) {
        let mut shuffled = samples.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed.rotate_left(i as u32) % (i as u64 + 1)) as usize);
        }
        let a = ProjectedColorStats::from_samples(&samples);
        let b = ProjectedColorStats::from_samples(&shuffled);
        prop_assert_eq!(a.valid_count, b.valid_count);
        for c in 0..3 {
            prop_assert!((a.mean[c] - b.mean[c]).abs() < 1e-12);
            prop_assert!((a.variance[c] - b.variance[c]).abs() < 1e-12);
            prop_assert!(a.variance[c] >= 0.0);
        }
    }

    #[test]
    fn projected_stats_match_brute_force(
        eyes in prop::collection::vec(vec3(-1.5..-0.5), 1..5),
        x in vec3(0.0..1.0),
        pixels in prop::collection::vec(rgb(), 64),
    ) {
        let target = Vector3::new(0.5, 0.5, 0.5);
        let cams: Vec<Camera> = eyes.iter().enumerate().map(|(i, e)| camera_at(&format!("c{i}"), *e, target, 8, 8)).collect();
        let images: Vec<Image> = (0..cams.len())
            .map(|i| {
                let mut px = pixels.clone();
                px.rotate_left(i * 7);
                Image::from_pixels(8, 8, px).unwrap()
            })
            .collect();
        let rig = CameraRig::new(cams.clone(), vec![]).unwrap();
        let frame = FrameObservation { index: 0, images: images.clone() };
        let got = projected_color_stats(&x, &frame, &rig);
        let seen: Vec<Rgb> = cams
            .iter()
            .zip(&images)
            .filter_map(|(c, img)| {
                let p = c.project_point(&x);
                p.valid.then(|| bilinear_sample(img, p.uv).unwrap())
            })
            .collect();
        let want = ProjectedColorStats::from_samples(&seen);
        prop_assert_eq!(got.valid_count, want.valid_count);
        for c in 0..3 {
            prop_assert!((got.mean[c] - want.mean[c]).abs() < 1e-12);
            prop_assert!((got.variance[c] - want.variance[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_conserves_energy(samples in shaded()) {
        let white: Vec<ShadedSample> = samples.iter().map(|s| ShadedSample { color: [1.0; 3], ..*s }).collect();
        let r = composite(&white).unwrap();
        prop_assert!((r.color[0] + r.final_transmittance - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.final_transmittance));
    }

    #[test]
    fn denser_samples_never_raise_transmittance(samples in shaded(), i in any::<prop::sample::Index>(), extra in 0.0..50.0f64) {
        let before = composite(&samples).unwrap().final_transmittance;
        let mut denser = samples.clone();
        denser[i.index(samples.len())].sigma += extra;
        prop_assert!(composite(&denser).unwrap().final_transmittance <= before + 1e-15);
    }

    #[test]
    fn rejection_keeps_an_ordered_subset(
        values in prop::collection::vec(0.0..1.0f64, 64),
        points in prop::collection::vec((vec3(0.0..1.0), 0usize..100), 0..50),
        threshold in 0.0..1.0f64,
    ) {
        let grid = OccupancyGrid::from_values(4, values).unwrap();
        let samples: Vec<RaySample> = points
            .iter()
            .enumerate()
            .map(|(i, (x, index))| RaySample { x: *x, t: i as f64, delta: 0.1, index: *index })
            .collect();
        let kept = rejection_filter(&grid, &samples, threshold, 20);
        prop_assert!(kept.windows(2).all(|w| w[0].t < w[1].t));
        for s in &kept {
            prop_assert!(samples.contains(s));
        }
        prop_assert_eq!(rejection_filter(&grid, &samples, 0.0, 20).len(), samples.len());
        let stride_only = rejection_filter(&grid, &samples, 1.5, 20);
        prop_assert!(stride_only.iter().all(|s| s.index % 20 == 10));
        prop_assert!(kept.len() >= stride_only.len());
    }

    #[test]
    fn transition_conserves_interior_mass(
        values in prop::collection::vec(0.0..1.0f64, 8 * 8 * 8),
        stddev in 0.3..2.0f64,
    ) {
        let n = 12;
        let mut padded = vec![0.0; n * n * n];
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    padded[((z + 2) * n + y + 2) * n + x + 2] = values[(z * 8 + y) * 8 + x];
                }
            }
        }
        let grid = OccupancyGrid::from_values(n, padded).unwrap();
        let out = grid.transition(&TransitionKernel::gaussian(3, stddev).unwrap()).unwrap();
        let (before, after): (f64, f64) = (grid.values().iter().sum(), out.values().iter().sum());
        prop_assert!((before - after).abs() < 1e-9 * before.max(1.0));
        prop_assert!(out.values().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(out.frame_index, grid.frame_index + 1);
    }
}
