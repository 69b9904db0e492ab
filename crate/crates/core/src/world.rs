//! Procedural 4D scenes: flat-shaded spheres and boxes moving along
//! low-order polynomial paths, rendered with exact pinhole cameras.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraFrame, Trajectory};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned box.
    Cuboid { half_extent: [f64; 3] },
}

impl Shape {
    /// Largest distance from the center to any surface point along an axis.
    fn axis_reach(&self) -> [f64; 3] {
        match *self {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Cuboid { half_extent } => half_extent,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// Center path `c0 + c1·t + c2·t²`.
    pub path: [[f64; 3]; 3],
    pub color: [f64; 3],
}

impl Primitive {
    pub fn center(&self, t: f64) -> Vector3<f64> {
        let [c0, c1, c2] = self.path;
        Vector3::from_fn(|i, _| c0[i] + c1[i] * t + c2[i] * t * t)
    }

    /// Ray parameter of the first hit with `origin + s·dir`, `s > 0`.
    fn intersect(&self, t: f64, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let c = self.center(t);
        match self.shape {
            Shape::Sphere { radius } => {
                let oc = origin - c;
                let b = oc.dot(dir);
                let cc = oc.norm_squared() - radius * radius;
                let disc = b * b - cc;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                [-b - sq, -b + sq].into_iter().find(|&s| s > 0.0)
            }
            Shape::Cuboid { half_extent } => {
                let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                for i in 0..3 {
                    let (mn, mx) = (c[i] - half_extent[i], c[i] + half_extent[i]);
                    if dir[i].abs() < 1e-15 {
                        if origin[i] < mn || origin[i] > mx {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((mn - origin[i]) / dir[i], (mx - origin[i]) / dir[i]);
                    lo = lo.max(a.min(b));
                    hi = hi.min(a.max(b));
                }
                if hi < lo.max(0.0) {
                    return None;
                }
                Some(if lo > 0.0 { lo } else { hi })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    /// Primitives stay inside `[-bounds, bounds]³`.
    pub bounds: f64,
    /// Seconds.
    pub duration: f64,
}

/// Ranges for procedurally drawn scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub min_primitives: usize,
    pub max_primitives: usize,
    pub bounds: f64,
    pub duration: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Largest distance a primitive center travels over the duration.
    pub max_travel: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            min_primitives: 1,
            max_primitives: 3,
            bounds: 1.5,
            duration: 4.0,
            min_size: 0.3,
            max_size: 0.6,
            max_travel: 1.2,
        }
    }
}

/// 8-bit palette so rendered frames are exactly representable on disk.
const PALETTE: [[u8; 3]; 10] = [
    [230, 57, 70],
    [29, 53, 87],
    [69, 123, 157],
    [241, 196, 15],
    [46, 204, 113],
    [155, 89, 182],
    [236, 240, 241],
    [52, 73, 94],
    [230, 126, 34],
    [26, 188, 156],
];

fn palette(i: usize) -> [f64; 3] {
    PALETTE[i % PALETTE.len()].map(|c| c as f64 / 255.0)
}

impl SceneSpec {
    pub fn empty(seed: u64, background: [f64; 3]) -> Self {
        Self {
            seed,
            primitives: Vec::new(),
            background,
            bounds: 1.5,
            duration: 4.0,
        }
    }

    /// Draws a scene whose primitive paths provably stay inside the bounds.
    pub fn random<R: Rng + ?Sized>(seed: u64, params: &SceneParams, rng: &mut R) -> Result<Self> {
        if params.min_primitives > params.max_primitives
            || !(params.min_size > 0.0 && params.max_size >= params.min_size)
            || params.max_size >= params.bounds
            || params.duration <= 0.0
        {
            return Err(Error::InvalidParams("inconsistent scene parameters".into()));
        }
        let count = rng.random_range(params.min_primitives..=params.max_primitives);
        let bg = rng.random_range(0..PALETTE.len());
        let mut colors: Vec<usize> = (0..PALETTE.len()).filter(|&c| c != bg).collect();
        let mut primitives = Vec::with_capacity(count);
        for _ in 0..count {
            let size = rng.random_range(params.min_size..=params.max_size);
            let shape = if rng.random_bool(0.6) {
                Shape::Sphere { radius: size }
            } else {
                let h = [
                    size * rng.random_range(0.6..=1.0),
                    size * rng.random_range(0.6..=1.0),
                    size * rng.random_range(0.6..=1.0),
                ];
                Shape::Cuboid { half_extent: h }
            };
            let reach = shape.axis_reach();
            let travel = rng.random_range(0.0..=params.max_travel);
            let heading = random_unit(rng);
            let curve = rng.random_range(-0.5..=0.5);
            let dur = params.duration;
            // Endpoints of the linear part; the quadratic bulge is added
            // orthogonally and stays within `curve * travel / 4`.
            let mut c0 = [0.0; 3];
            let mut c1 = [0.0; 3];
            let mut c2 = [0.0; 3];
            let bulge_dir = heading.cross(&Vector3::z());
            let bulge_dir = if bulge_dir.norm() > 1e-6 {
                bulge_dir.normalize()
            } else {
                Vector3::x()
            };
            let bulge = curve * travel;
            for i in 0..3 {
                let slack = params.bounds - reach[i] - (travel * heading[i]).abs() - bulge.abs();
                let slack = slack.max(0.0);
                let start = rng.random_range(-slack..=slack) - 0.5 * travel * heading[i];
                // c(t) = start + travel*h*s + bulge*d*4 s(1-s), s = t/dur.
                c0[i] = start;
                c1[i] = (travel * heading[i] + 4.0 * bulge * bulge_dir[i]) / dur;
                c2[i] = -4.0 * bulge * bulge_dir[i] / (dur * dur);
            }
            let ci = colors.remove(rng.random_range(0..colors.len()));
            primitives.push(Primitive {
                shape,
                path: [c0, c1, c2],
                color: palette(ci),
            });
        }
        let scene = Self {
            seed,
            primitives,
            background: palette(bg),
            bounds: params.bounds,
            duration: params.duration,
        };
        scene.validate()?;
        Ok(scene)
    }

    /// Checks every primitive against the bounds using the exact extrema of
    /// its quadratic path on `[0, duration]`.
    pub fn validate(&self) -> Result<()> {
        for (k, p) in self.primitives.iter().enumerate() {
            let reach = p.shape.axis_reach();
            for i in 0..3 {
                let [c0, c1, c2] = [p.path[0][i], p.path[1][i], p.path[2][i]];
                let f = |t: f64| c0 + c1 * t + c2 * t * t;
                let mut ts = vec![0.0, self.duration];
                if c2 != 0.0 {
                    let tv = -c1 / (2.0 * c2);
                    if tv > 0.0 && tv < self.duration {
                        ts.push(tv);
                    }
                }
                for t in ts {
                    if f(t).abs() + reach[i] > self.bounds + 1e-9 {
                        return Err(Error::InvalidParams(format!(
                            "primitive {k} leaves the world bounds on axis {i} at t = {t}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Stable content hash of the scene description.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scene serializes");
        crate::io::sha256_hex(&json)
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).sqrt();
    Vector3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Painter's-algorithm render at `camera.timestamp`: primitives are drawn
/// far to near by the camera-space depth of their centers (ties broken by
/// index), each covering exactly the pixels whose center ray hits it.
pub fn render(scene: &SceneSpec, camera: &CameraFrame) -> Image {
    let (w, h) = (camera.width, camera.height);
    let t = camera.timestamp;
    let mut img = Image::filled(w, h, scene.background);
    let mut order: Vec<(usize, f64)> = scene
        .primitives
        .iter()
        .enumerate()
        .map(|(i, p)| (i, camera.to_camera(&p.center(t)).z))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let origin = camera.center();
    let dirs: Vec<Vector3<f64>> = (0..h)
        .flat_map(|v| (0..w).map(move |u| (u, v)))
        .map(|(u, v)| camera.ray_direction(u, v))
        .collect();
    for (i, _) in order {
        let p = &scene.primitives[i];
        for v in 0..h {
            for u in 0..w {
                if p.intersect(t, &origin, &dirs[v * w + u]).is_some() {
                    for c in 0..3 {
                        img.set(c, v, u, p.color[c]);
                    }
                }
            }
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Static,
    ArcLeft,
    ArcRight,
    TranslateUp,
    TranslateDown,
    SpiralZoom,
    Orbit,
}

impl TrajectoryKind {
    pub const ALL: [TrajectoryKind; 7] = [
        TrajectoryKind::Static,
        TrajectoryKind::ArcLeft,
        TrajectoryKind::ArcRight,
        TrajectoryKind::TranslateUp,
        TrajectoryKind::TranslateDown,
        TrajectoryKind::SpiralZoom,
        TrajectoryKind::Orbit,
    ];
}

/// Parameters shared by every analytic camera path. Cameras sit on a
/// sphere around `pivot` (world `+Z` up) and look at it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryParams {
    pub pivot: [f64; 3],
    pub radius: f64,
    /// Start azimuth around `+Z`, radians.
    pub azimuth: f64,
    /// Elevation above the pivot's horizontal plane, radians.
    pub elevation: f64,
    /// Total angle (arcs, spiral, orbit) in radians, or total distance as a
    /// fraction of `radius` (translations).
    pub sweep: f64,
    /// Fraction of the radius removed by the end of a spiral.
    pub zoom: f64,
    pub frames: usize,
    pub fps: f64,
    pub t0: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            pivot: [0.0; 3],
            radius: 4.0,
            azimuth: 0.0,
            elevation: 0.35,
            sweep: 0.6,
            zoom: 0.3,
            frames: 3,
            fps: 2.0,
            t0: 0.0,
            width: 32,
            height: 32,
            focal: 34.0,
        }
    }
}

impl TrajectoryParams {
    fn validate(&self) -> Result<()> {
        let ok = self.radius > 0.0
            && self.radius.is_finite()
            && self.elevation.abs() < PI / 2.0 - 1e-3
            && self.sweep.is_finite()
            && (0.0..1.0).contains(&self.zoom)
            && self.frames >= 1
            && self.fps > 0.0
            && self.t0.is_finite()
            && self.width >= 1
            && self.height >= 1
            && self.focal > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("trajectory parameters out of range: {self:?}")))
        }
    }

    fn eye(&self, azimuth: f64, radius: f64) -> Vector3<f64> {
        let p = Vector3::from(self.pivot);
        p + radius
            * Vector3::new(
                self.elevation.cos() * azimuth.cos(),
                self.elevation.cos() * azimuth.sin(),
                self.elevation.sin(),
            )
    }
}

pub fn make_trajectory(kind: TrajectoryKind, params: &TrajectoryParams) -> Result<Trajectory> {
    params.validate()?;
    let pivot = Vector3::from(params.pivot);
    let up = Vector3::z();
    let n = params.frames;
    let start = CameraFrame::look_at(
        params.eye(params.azimuth, params.radius),
        pivot,
        up,
        params.width,
        params.height,
        params.focal,
        params.t0,
    )?;
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let s = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let ts = params.t0 + i as f64 / params.fps;
        let frame = match kind {
            TrajectoryKind::Static => start.clone(),
            TrajectoryKind::ArcLeft | TrajectoryKind::ArcRight | TrajectoryKind::Orbit => {
                let sign = if kind == TrajectoryKind::ArcRight { -1.0 } else { 1.0 };
                let az = params.azimuth + sign * params.sweep * s;
                if kind == TrajectoryKind::Orbit && (s == 1.0) && is_full_turn(params.sweep) {
                    start.clone()
                } else {
                    CameraFrame::look_at(
                        params.eye(az, params.radius),
                        pivot,
                        up,
                        params.width,
                        params.height,
                        params.focal,
                        ts,
                    )?
                }
            }
            TrajectoryKind::TranslateUp | TrajectoryKind::TranslateDown => {
                let sign = if kind == TrajectoryKind::TranslateDown { -1.0 } else { 1.0 };
                let shift = Vector3::z() * (sign * params.sweep * params.radius * s);
                let mut f = start.clone();
                f.translation = -(f.rotation * (start.center() + shift));
                f
            }
            TrajectoryKind::SpiralZoom => CameraFrame::look_at(
                params.eye(
                    params.azimuth + params.sweep * s,
                    params.radius * (1.0 - params.zoom * s),
                ),
                pivot,
                up,
                params.width,
                params.height,
                params.focal,
                ts,
            )?,
        };
        frames.push(frame.with_timestamp(ts));
    }
    Trajectory::new(frames)
}

fn is_full_turn(sweep: f64) -> bool {
    let turns = sweep / (2.0 * PI);
    (turns - turns.round()).abs() < 1e-12 && turns.round() != 0.0
}

/// Rotation about `+Z` by `angle`.
pub fn rotation_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}
