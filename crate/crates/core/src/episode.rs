//! Training and evaluation episodes: a scene, a task, rendered context and
//! target frames with their cameras, and the on-disk archive format.
//!
//! Archive layout:
//!
//! ```text
//! <dir>/meta              key = value lines
//! <dir>/poses.txt         context frames, then target frames
//! <dir>/scene.json        scene description
//! <dir>/frames/context.rgb
//! <dir>/frames/target.rgb
//! ```
//!
//! Frames of a clip are stored view-major: all frames of view 0 in time
//! order, then view 1, and so on.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{format_poses, parse_poses, CameraFrame};
use crate::image::{decode_frames, encode_frames, Image};
use crate::io;
use crate::tasking::{assign_timestamps, Shape, TaskKind, TaskSpec};
use crate::world::{make_trajectory, render, SceneParams, SceneSpec, TrajectoryKind, TrajectoryParams};

/// How episodes are staged: image size, camera ranges and timeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeParams {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub fps: f64,
    /// Frames available on the scene timeline.
    pub clip_frames: usize,
    pub radius: (f64, f64),
    pub elevation: (f64, f64),
    /// Largest azimuth difference between any view and the first context
    /// view, radians.
    pub view_spread: f64,
    /// Largest azimuth swept by a moving camera over one clip, radians.
    pub max_sweep: f64,
    pub scene: SceneParams,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            focal: 34.0,
            fps: 2.0,
            clip_frames: 13,
            radius: (3.6, 4.4),
            elevation: (0.15, 0.6),
            view_spread: 0.8,
            max_sweep: 0.6,
            scene: SceneParams {
                duration: 6.0,
                ..SceneParams::default()
            },
        }
    }
}

impl EpisodeParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width >= 1
            && self.height >= 1
            && self.focal > 0.0
            && self.fps > 0.0
            && self.clip_frames >= 1
            && self.radius.0 > 0.0
            && self.radius.1 >= self.radius.0
            && self.elevation.1 >= self.elevation.0
            && self.elevation.0.abs().max(self.elevation.1.abs()) < PI / 2.0 - 0.01
            && self.view_spread >= 0.0
            && self.max_sweep >= 0.0
            && (self.clip_frames - 1) as f64 / self.fps <= self.scene.duration + 1e-9;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent episode parameters: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub view: usize,
    pub image: Image,
    pub camera: CameraFrame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: TaskSpec,
    pub seed: u64,
    pub scene: SceneSpec,
    pub fps: f64,
    pub context: Vec<Frame>,
    pub target: Vec<Frame>,
}

/// Optional departures from the random staging, used by evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Staging {
    /// Forces the target camera path.
    pub target_kind: Option<TrajectoryKind>,
}

#[derive(Clone, Copy)]
struct ViewPose {
    azimuth: f64,
    elevation: f64,
    radius: f64,
}

impl Episode {
    pub fn context_images(&self) -> Vec<Image> {
        self.context.iter().map(|f| f.image.clone()).collect()
    }

    pub fn target_images(&self) -> Vec<Image> {
        self.target.iter().map(|f| f.image.clone()).collect()
    }

    pub fn size(&self) -> (usize, usize) {
        let f = self.target.first().or(self.context.first()).expect("non-empty episode");
        (f.image.width, f.image.height)
    }

    /// Context frame whose timestamp is closest to `t`, earliest view first.
    pub fn nearest_context(&self, t: f64) -> Option<&Frame> {
        self.context.iter().min_by(|a, b| {
            (a.camera.timestamp - t)
                .abs()
                .total_cmp(&(b.camera.timestamp - t).abs())
        })
    }
}

/// Stages and renders one episode. Fully determined by the arguments.
pub fn generate_episode(
    spec: &TaskSpec,
    seed: u64,
    params: &EpisodeParams,
    staging: Staging,
) -> Result<Episode> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = SceneSpec::random(seed, &params.scene, &mut rng)?;
    let times = assign_timestamps(spec, &mut rng, params.fps, params.clip_frames);

    let base = ViewPose {
        azimuth: rng.random_range(0.0..2.0 * PI),
        elevation: rng.random_range(params.elevation.0..=params.elevation.1),
        radius: rng.random_range(params.radius.0..=params.radius.1),
    };
    let jitter = |rng: &mut ChaCha8Rng, spread: f64| ViewPose {
        azimuth: base.azimuth + if spread > 0.0 { rng.random_range(-spread..=spread) } else { 0.0 },
        elevation: rng.random_range(params.elevation.0..=params.elevation.1),
        radius: rng.random_range(params.radius.0..=params.radius.1),
    };

    let (cv, _) = spec.context_shape;
    let mut context = Vec::new();
    let mut first_ctx: Option<ViewPose> = None;
    for view in 0..cv {
        let pose = if view == 0 {
            base
        } else {
            jitter(&mut rng, params.view_spread)
        };
        let kind = random_kind(&mut rng, times.context.len());
        let cams = clip_cameras(&mut rng, params, &pose, kind, &times.context)?;
        for camera in cams {
            context.push(Frame {
                view,
                image: render(&scene, &camera),
                camera,
            });
        }
        if view == 0 {
            first_ctx = Some(pose);
        }
    }

    let (tv, _) = spec.target_shape;
    let mut target = Vec::new();
    for view in 0..tv {
        let pose = match (spec.task, &first_ctx) {
            // The commanded path starts from the conditioning image's camera.
            (TaskKind::I2VCamCtrl, Some(p)) => *p,
            (TaskKind::T2VCamCtrl, _) if view == 0 => base,
            _ => jitter(&mut rng, params.view_spread),
        };
        let kind = staging
            .target_kind
            .unwrap_or_else(|| random_kind(&mut rng, times.target.len()));
        let cams = clip_cameras(&mut rng, params, &pose, kind, &times.target)?;
        for camera in cams {
            target.push(Frame {
                view,
                image: render(&scene, &camera),
                camera,
            });
        }
    }
    Ok(Episode {
        task: *spec,
        seed,
        scene,
        fps: params.fps,
        context,
        target,
    })
}

fn random_kind(rng: &mut ChaCha8Rng, frames: usize) -> TrajectoryKind {
    if frames <= 1 {
        TrajectoryKind::Static
    } else {
        TrajectoryKind::ALL[rng.random_range(0..TrajectoryKind::ALL.len())]
    }
}

/// Cameras for one view's clip, one per timestamp.
fn clip_cameras(
    rng: &mut ChaCha8Rng,
    params: &EpisodeParams,
    pose: &ViewPose,
    kind: TrajectoryKind,
    times: &[f64],
) -> Result<Vec<CameraFrame>> {
    if times.is_empty() {
        return Ok(Vec::new());
    }
    let sweep = match kind {
        TrajectoryKind::TranslateUp | TrajectoryKind::TranslateDown => {
            rng.random_range(0.05..=0.25)
        }
        TrajectoryKind::Orbit => 2.0 * PI * rng.random_range(0.02..=0.1),
        _ => rng.random_range(0.1 * params.max_sweep..=params.max_sweep.max(1e-6)),
    };
    let tp = TrajectoryParams {
        pivot: [0.0; 3],
        radius: pose.radius,
        azimuth: pose.azimuth,
        elevation: pose.elevation,
        sweep,
        zoom: 0.25,
        frames: times.len(),
        fps: params.fps,
        t0: times[0],
        width: params.width,
        height: params.height,
        focal: params.focal,
    };
    let traj = make_trajectory(kind, &tp)?;
    Ok(traj
        .into_frames()
        .into_iter()
        .zip(times)
        .map(|(f, &t)| f.with_timestamp(t))
        .collect())
}

fn fmt_shape(s: Shape) -> String {
    format!("{}x{}", s.0, s.1)
}

fn parse_shape(s: &str) -> Option<Shape> {
    let (a, b) = s.split_once('x')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

/// Writes the archive and returns a SHA-256 over its files.
pub fn write_episode(dir: &Path, ep: &Episode) -> Result<String> {
    let (w, h) = ep.size();
    let meta = format!(
        "task = {}\nseed = {}\nscene_hash = {}\ncontext_shape = {}\ntarget_shape = {}\ndelta = {}\nfps = {:?}\nwidth = {w}\nheight = {h}\n",
        ep.task.task.tag(),
        ep.seed,
        ep.scene.content_hash(),
        fmt_shape(ep.task.context_shape),
        fmt_shape(ep.task.target_shape),
        ep.task.delta.map_or("none".to_string(), |d| d.to_string()),
        ep.fps,
    );
    let cams: Vec<CameraFrame> = ep
        .context
        .iter()
        .chain(&ep.target)
        .map(|f| f.camera.clone())
        .collect();
    let poses = format_poses(&cams);
    let scene = serde_json::to_string_pretty(&ep.scene).expect("scene serializes");
    let ctx = encode_frames(&ep.context_images())?;
    let tgt = encode_frames(&ep.target_images())?;
    io::write_atomic(&dir.join("meta"), meta.as_bytes())?;
    io::write_atomic(&dir.join("poses.txt"), poses.as_bytes())?;
    io::write_atomic(&dir.join("scene.json"), scene.as_bytes())?;
    io::write_atomic(&dir.join("frames/context.rgb"), &ctx)?;
    io::write_atomic(&dir.join("frames/target.rgb"), &tgt)?;
    Ok(archive_hash(&[meta.as_bytes(), poses.as_bytes(), scene.as_bytes(), &ctx, &tgt]))
}

fn archive_hash(parts: &[&[u8]]) -> String {
    let mut all = Vec::new();
    for p in parts {
        all.extend_from_slice(&(p.len() as u64).to_le_bytes());
        all.extend_from_slice(p);
    }
    io::sha256_hex(&all)
}

pub fn parse_meta(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Loads an archive written by [`write_episode`] and its hash.
pub fn read_episode(dir: &Path) -> Result<(Episode, String)> {
    let meta_path = dir.join("meta");
    let meta_text = io::read_to_string(&meta_path)?;
    let meta = parse_meta(&meta_text);
    let bad = |msg: String| Error::Parse {
        path: meta_path.clone(),
        msg,
    };
    let get = |k: &str| meta.get(k).ok_or_else(|| bad(format!("missing key `{k}`")));
    let task: TaskKind = get("task")?.parse()?;
    let seed: u64 = get("seed")?.parse().map_err(|_| bad("bad seed".into()))?;
    let cs = parse_shape(get("context_shape")?).ok_or_else(|| bad("bad context_shape".into()))?;
    let ts = parse_shape(get("target_shape")?).ok_or_else(|| bad("bad target_shape".into()))?;
    let delta = match get("delta")?.as_str() {
        "none" => None,
        d => Some(d.parse().map_err(|_| bad("bad delta".into()))?),
    };
    let fps: f64 = get("fps")?.parse().map_err(|_| bad("bad fps".into()))?;
    let w: usize = get("width")?.parse().map_err(|_| bad("bad width".into()))?;
    let h: usize = get("height")?.parse().map_err(|_| bad("bad height".into()))?;

    let poses_text = io::read_to_string(&dir.join("poses.txt"))?;
    let cams = parse_poses(&poses_text, w, h).map_err(|e| match e {
        Error::Parse { msg, .. } => Error::Parse {
            path: dir.join("poses.txt"),
            msg,
        },
        other => other,
    })?;
    let scene_text = io::read_to_string(&dir.join("scene.json"))?;
    let scene: SceneSpec = serde_json::from_str(&scene_text).map_err(|e| Error::Parse {
        path: dir.join("scene.json"),
        msg: e.to_string(),
    })?;
    let ctx_bytes = io::read_bytes(&dir.join("frames/context.rgb"))?;
    let tgt_bytes = io::read_bytes(&dir.join("frames/target.rgb"))?;
    let ctx_imgs = decode_frames(&ctx_bytes)?;
    let tgt_imgs = decode_frames(&tgt_bytes)?;
    let (nc, nt) = (cs.0 * cs.1, ts.0 * ts.1);
    if ctx_imgs.len() != nc || tgt_imgs.len() != nt || cams.len() != nc + nt {
        return Err(bad(format!(
            "archive holds {} context, {} target frames and {} poses; meta expects {nc} and {nt}",
            ctx_imgs.len(),
            tgt_imgs.len(),
            cams.len()
        )));
    }
    let frames = |imgs: Vec<Image>, cams: &[CameraFrame], per_view: usize| -> Vec<Frame> {
        imgs.into_iter()
            .zip(cams)
            .enumerate()
            .map(|(i, (image, camera))| Frame {
                view: i / per_view.max(1),
                image,
                camera: camera.clone(),
            })
            .collect()
    };
    let ep = Episode {
        task: TaskSpec {
            task,
            context_shape: cs,
            target_shape: ts,
            delta,
        },
        seed,
        scene,
        fps,
        context: frames(ctx_imgs, &cams[..nc], cs.1),
        target: frames(tgt_imgs, &cams[nc..], ts.1),
    };
    let hash = archive_hash(&[
        meta_text.as_bytes(),
        poses_text.as_bytes(),
        scene_text.as_bytes(),
        &ctx_bytes,
        &tgt_bytes,
    ]);
    Ok((ep, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasking::TaskMixture;

    #[test]
    fn nvs_targets_share_context_times() {
        let m = TaskMixture::default();
        let spec = m.spec(TaskKind::MonoVideoNVS, (1, 3), (1, 3));
        let ep = generate_episode(&spec, 7, &EpisodeParams::default(), Staging::default()).unwrap();
        assert_eq!(ep.context.len(), 3);
        for (c, t) in ep.context.iter().zip(&ep.target) {
            assert_eq!(c.camera.timestamp, t.camera.timestamp);
        }
    }

    #[test]
    fn i2v_target_starts_at_context_camera() {
        let m = TaskMixture::default();
        let spec = m.spec(TaskKind::I2VCamCtrl, (1, 1), (1, 5));
        let ep = generate_episode(&spec, 3, &EpisodeParams::default(), Staging::default()).unwrap();
        let (c, t) = (&ep.context[0].camera, &ep.target[0].camera);
        assert!((c.rotation - t.rotation).amax() < 1e-12);
        assert!((c.translation - t.translation).amax() < 1e-12);
    }

    #[test]
    fn static_staging_holds_the_camera() {
        let m = TaskMixture::default();
        let spec = m.spec(TaskKind::V2VCamCtrl, (1, 3), (1, 3));
        let staging = Staging {
            target_kind: Some(TrajectoryKind::Static),
        };
        let ep = generate_episode(&spec, 11, &EpisodeParams::default(), staging).unwrap();
        let first = &ep.target[0].camera;
        assert!(ep.target.iter().all(|f| f.camera.rotation == first.rotation
            && f.camera.translation == first.translation));
    }

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = TaskMixture::default();
        let spec = m.spec(TaskKind::MultiViewImageNVS, (3, 1), (1, 1));
        let ep = generate_episode(&spec, 5, &EpisodeParams::default(), Staging::default()).unwrap();
        let h1 = write_episode(dir.path(), &ep).unwrap();
        let (back, h2) = read_episode(dir.path()).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(back.scene, ep.scene);
        assert_eq!(back.task, ep.task);
        for (a, b) in back.context.iter().chain(&back.target).zip(ep.context.iter().chain(&ep.target)) {
            assert_eq!(a.view, b.view);
            assert_eq!(a.camera, b.camera);
            assert_eq!(a.image, b.image);
        }
        assert_eq!(back, ep);
    }
}
