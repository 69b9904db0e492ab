//! Property tests for the module invariants.

use camrope::geometry::{align_metric_scale, compute_plucker_map, normalize_to_reference, CameraFrame, Trajectory};
use camrope::image::Image;
use camrope::metrics::{psnr, rotation_angle, ssim, trajectory_errors, SsimParams};
use camrope::rope::{make_phases, rope_camera, rope_video, rotate, AxisFrequencyTable, AxisLayout, RopePhases, TokenPos};
use camrope::tasking::{assign_timestamps, sample_task, sample_task_phase, TaskKind, TaskMixture, TASK_TABLE};
use camrope::world::{make_trajectory, render, Primitive, SceneSpec, Shape, TrajectoryKind, TrajectoryParams};
use nalgebra::{Matrix3, Rotation2, Rotation3, Unit, Vector2, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn table_strategy() -> impl Strategy<Value = AxisFrequencyTable> {
    (1usize..12, any::<bool>()).prop_map(|(pairs, additive)| {
        let layout = if additive {
            AxisLayout::Additive
        } else {
            AxisLayout::default_split(pairs)
        };
        AxisFrequencyTable::new(2 * pairs, 10_000.0, layout).unwrap()
    })
}

fn pos() -> impl Strategy<Value = TokenPos> {
    (0usize..64, 0usize..64, 0usize..64).prop_map(|(x, y, t)| TokenPos::new(x, y, t))
}

fn vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

proptest! {
    #[test]
    fn rope_rotation_matches_planar_rotations(table in table_strategy(), p in pos(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..table.dim()).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let out = rope_video(&u, p, &table).unwrap();
        let ph = make_phases(p, &table);
        for j in 0..table.pairs() {
            let r = Rotation2::new(ph.phases[j]) * Vector2::new(u[2 * j], u[2 * j + 1]);
            prop_assert!((out[2 * j] - r.x).abs() < 1e-12);
            prop_assert!((out[2 * j + 1] - r.y).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_is_an_isometry(u in vector(16), phases in prop::collection::vec(-1e3f64..1e3, 8)) {
        let ph = RopePhases { phases, source_position: TokenPos::default(), base: 1e4 };
        let r = rotate(&u, &ph).unwrap();
        prop_assert!((norm(&r) - norm(&u)).abs() < 1e-12 * norm(&u).max(1.0));
    }

    #[test]
    fn rope_rotations_compose(u in vector(12), a in prop::collection::vec(-6.0f64..6.0, 6), b in prop::collection::vec(-6.0f64..6.0, 6)) {
        let pa = RopePhases { phases: a, source_position: TokenPos::default(), base: 1e4 };
        let pb = RopePhases { phases: b, source_position: TokenPos::default(), base: 1e4 };
        let two = rotate(&rotate(&u, &pa).unwrap(), &pb).unwrap();
        let one = rotate(&u, &pa.compose(&pb)).unwrap();
        for (x, y) in two.iter().zip(&one) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_scores_depend_on_offsets_only(table in table_strategy(), m in pos(), n in pos(), shift in pos(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..table.dim()).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let k: Vec<f64> = (0..table.dim()).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let add = |a: TokenPos| TokenPos::new(a.x + shift.x, a.y + shift.y, a.t + shift.t);
        let s0 = dot(&rope_video(&q, m, &table).unwrap(), &rope_video(&k, n, &table).unwrap());
        let s1 = dot(&rope_video(&q, add(m), &table).unwrap(), &rope_video(&k, add(n), &table).unwrap());
        prop_assert!((s0 - s1).abs() < 1e-9);
    }

    #[test]
    fn camera_rope_ignores_time(table in table_strategy(), p in pos(), t in 0usize..10_000, u in vector(24)) {
        let u = &u[..table.dim()];
        let a = rope_camera(u, p, &table).unwrap();
        let b = rope_camera(u, TokenPos { t, ..p }, &table).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn camera_strategy() -> impl Strategy<Value = CameraFrame> {
    (
        prop::array::uniform3(-1.0f64..1.0),
        0.0f64..3.1,
        prop::array::uniform3(-3.0f64..3.0),
        10.0f64..60.0,
    )
        .prop_filter_map("axis", |(axis, angle, t, f)| {
            let axis = Unit::try_new(Vector3::from(axis), 1e-3)?;
            let mut c = CameraFrame::identity(6, 5, f);
            c.rotation = *Rotation3::from_axis_angle(&axis, angle).matrix();
            c.translation = Vector3::from(t);
            Some(c)
        })
}

proptest! {
    #[test]
    fn plucker_moment_shifts_with_camera_center(cam in camera_strategy(), delta in prop::array::uniform3(-2.0f64..2.0)) {
        let delta = Vector3::from(delta);
        let mut moved = cam.clone();
        // New center o + delta means t' = -R (o + delta).
        moved.translation = -(cam.rotation * (cam.center() + delta));
        let a = compute_plucker_map(&cam).unwrap();
        let b = compute_plucker_map(&moved).unwrap();
        for v in 0..cam.height {
            for u in 0..cam.width {
                let d = a.direction(v, u);
                prop_assert!((d.norm() - 1.0).abs() < 1e-12);
                prop_assert!(a.moment(v, u).dot(&d).abs() < 1e-9);
                let expect = a.moment(v, u) + delta.cross(&d);
                prop_assert!((b.moment(v, u) - expect).amax() < 1e-9);
                prop_assert!((b.direction(v, u) - d).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn plucker_maps_differ_for_different_poses(cam in camera_strategy(), angle in 1e-3f64..1.0) {
        let mut other = cam.clone();
        other.rotation = Rotation3::from_axis_angle(&Vector3::y_axis(), angle).matrix() * cam.rotation;
        prop_assert_ne!(compute_plucker_map(&cam).unwrap(), compute_plucker_map(&other).unwrap());
        prop_assert_eq!(compute_plucker_map(&cam).unwrap(), compute_plucker_map(&cam.clone()).unwrap());
    }

    #[test]
    fn scale_alignment_inverts_rescaling(cams in prop::collection::vec(camera_strategy(), 2..6), s in 0.01f64..100.0) {
        let frames: Vec<CameraFrame> = cams.into_iter().enumerate().map(|(i, c)| c.with_timestamp(i as f64)).collect();
        prop_assume!(frames.iter().any(|f| f.translation.norm() > 1e-3));
        let gt = Trajectory::new(frames.clone()).unwrap();
        let pred = Trajectory::new(camrope::geometry::scale_translations(&frames, s)).unwrap();
        let a = align_metric_scale(&pred, &gt).unwrap();
        prop_assert!((a.scale * s - 1.0).abs() < 1e-9);
        let e = trajectory_errors(&pred, &gt, true).unwrap();
        prop_assert!(e.trans_err < 1e-9 * (1.0 + frames.iter().map(|f| f.translation.norm()).sum::<f64>()));
    }

    #[test]
    fn normalization_makes_reference_identity_and_keeps_relative_poses(cams in prop::collection::vec(camera_strategy(), 1..5), r in 0usize..5) {
        let r = r % cams.len();
        let out = normalize_to_reference(&cams, r).unwrap();
        prop_assert_eq!(out[r].rotation, Matrix3::identity());
        for (a, b) in cams.iter().zip(&out) {
            // Relative pose to the reference is preserved.
            let rel_in = a.pose_matrix() * cams[r].pose_matrix().try_inverse().unwrap();
            prop_assert!((rel_in - b.pose_matrix()).amax() < 1e-9);
        }
    }

    #[test]
    fn rotation_error_ignores_global_rotation(cams in prop::collection::vec(camera_strategy(), 1..5), noise in prop::collection::vec(camera_strategy(), 5), g in camera_strategy()) {
        let n = cams.len();
        let gt: Vec<CameraFrame> = cams.iter().enumerate().map(|(i, c)| c.clone().with_timestamp(i as f64)).collect();
        let pred: Vec<CameraFrame> = gt.iter().zip(&noise).map(|(c, z)| CameraFrame { rotation: z.rotation * c.rotation, ..c.clone() }).collect();
        let rotate_all = |fs: &[CameraFrame]| -> Vec<CameraFrame> {
            fs.iter().map(|c| CameraFrame { rotation: c.rotation * g.rotation, ..c.clone() }).collect()
        };
        let e0 = trajectory_errors(&Trajectory::new(pred.clone()).unwrap(), &Trajectory::new(gt.clone()).unwrap(), false).unwrap();
        let e1 = trajectory_errors(&Trajectory::new(rotate_all(&pred)).unwrap(), &Trajectory::new(rotate_all(&gt)).unwrap(), false).unwrap();
        prop_assert!((e0.rot_err - e1.rot_err).abs() < 1e-6 * n as f64);
    }

    #[test]
    fn clamping_leaves_valid_rotations_alone(a in camera_strategy(), b in camera_strategy()) {
        let rel = Rotation3::from_matrix_unchecked(a.rotation * b.rotation.transpose());
        prop_assert!((rotation_angle(&a.rotation, &b.rotation) - rel.angle()).abs() < 1e-6);
        let cos = ((a.rotation * b.rotation.transpose()).trace() - 1.0) / 2.0;
        prop_assert!((cos.clamp(-1.0, 1.0) - cos).abs() < 1e-12);
    }
}

fn image_strategy() -> impl Strategy<Value = (Image, Image)> {
    (prop::collection::vec(0.0f64..1.0, 3 * 64), prop::collection::vec(0.0f64..1.0, 3 * 64)).prop_map(|(a, b)| {
        let mk = |data| Image { width: 8, height: 8, data };
        (mk(a), mk(b))
    })
}

proptest! {
    #[test]
    fn psnr_is_symmetric_and_ssim_bounded((a, b) in image_strategy()) {
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert!(psnr(&a, &b, 1.0).unwrap() >= 0.0);
        let params = SsimParams { window: 4, ..Default::default() };
        let s = ssim(&a, &b, params).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((ssim(&a, &a, params).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampled_tasks_come_from_the_table(seed in any::<u64>(), warm in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix = TaskMixture::default();
        for _ in 0..20 {
            let spec = sample_task_phase(&mut rng, &mix, warm).unwrap();
            prop_assert!(spec.in_table());
            prop_assert!(spec.task != TaskKind::MultiViewVideoNVS);
            let row = TASK_TABLE.iter().find(|r| r.0 == spec.task).unwrap();
            prop_assert!(row.1.contains(&spec.context_shape) && row.2.contains(&spec.target_shape));
            if warm {
                prop_assert_eq!(spec.task, TaskKind::MultiViewImageNVS);
            }
            let ts = assign_timestamps(&spec, &mut rng, 2.0, 13);
            let all: Vec<f64> = ts.context.iter().chain(&ts.target).copied().collect();
            prop_assert!(all.iter().all(|&t| (0.0..=6.0).contains(&t)));
            if spec.task.is_nvs() {
                prop_assert!(ts.target.iter().all(|t| ts.context.contains(t)));
            }
        }
        let _ = sample_task(&mut rng, &mix).unwrap();
    }

    #[test]
    fn single_primitive_color_agrees_across_views(seed in any::<u64>(), az in 0.1f64..1.5, t in 0.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scene = SceneSpec::random(seed, &Default::default(), &mut rng).unwrap();
        scene.primitives.truncate(1);
        let p: &Primitive = &scene.primitives[0];
        prop_assume!(p.color != scene.background);
        let cams: Vec<CameraFrame> = [0.0, az]
            .iter()
            .map(|&a| {
                let tp = TrajectoryParams { azimuth: a, frames: 1, t0: t, ..Default::default() };
                make_trajectory(TrajectoryKind::Static, &tp).unwrap().frames()[0].clone()
            })
            .collect();
        for cam in &cams {
            let img = render(&scene, cam);
            for v in 0..img.height {
                for u in 0..img.width {
                    let px = img.pixel(v, u);
                    prop_assert!(px == p.color || px == scene.background);
                }
            }
        }
    }

    #[test]
    fn render_depends_only_on_pose_and_time(seed in any::<u64>(), k in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = SceneSpec::random(seed, &Default::default(), &mut rng).unwrap();
        let tp = TrajectoryParams { frames: 5, ..Default::default() };
        let orbit = make_trajectory(TrajectoryKind::Orbit, &tp).unwrap();
        let cam = &orbit.frames()[k];
        let mut rebuilt = CameraFrame::identity(cam.width, cam.height, cam.focal.0).with_timestamp(cam.timestamp);
        rebuilt.set_pose_matrix(&cam.pose_matrix());
        prop_assert_eq!(render(&scene, cam), render(&scene, &rebuilt));
    }
}

#[test]
fn spheres_are_solid_discs() {
    let scene = SceneSpec {
        primitives: vec![Primitive {
            shape: Shape::Sphere { radius: 0.5 },
            path: [[0.0; 3]; 3],
            color: [1.0, 0.0, 0.0],
        }],
        ..SceneSpec::empty(0, [0.0; 3])
    };
    let cam = CameraFrame::look_at(Vector3::new(0.0, -4.0, 0.0), Vector3::zeros(), Vector3::z(), 32, 32, 34.0, 0.0).unwrap();
    let img = render(&scene, &cam);
    // Apparent radius f * r / sqrt(D^2 - r^2) pixels around the center.
    let rad = 34.0 * 0.5 / (16.0f64 - 0.25).sqrt();
    for v in 0..32 {
        for u in 0..32 {
            let dist = ((u as f64 + 0.5 - 16.0).powi(2) + (v as f64 + 0.5 - 16.0).powi(2)).sqrt();
            if (dist - rad).abs() > 0.75 {
                assert_eq!(img.pixel(v, u)[0] == 1.0, dist < rad, "pixel ({u}, {v})");
            }
        }
    }
}
