//! Pinhole cameras, Plücker ray maps and pose utilities.
//!
//! Extrinsics are world-to-camera: `X_cam = R * X_world + t`, so the camera
//! center in world coordinates is `o = -Rᵀ t`. The camera looks down `+Z`
//! with `+Y` pointing down the image. Rays pass through pixel centers
//! `(u + 0.5, v + 0.5)`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Tolerance on `‖RᵀR − I‖∞` and `|det R − 1|`.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub focal: (f64, f64),
    pub principal_point: (f64, f64),
    pub width: usize,
    pub height: usize,
    pub timestamp: f64,
}

impl CameraFrame {
    /// Identity pose looking down `+Z` with a symmetric field of view.
    pub fn identity(width: usize, height: usize, focal: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            focal: (focal, focal),
            principal_point: (width as f64 / 2.0, height as f64 / 2.0),
            width,
            height,
            timestamp: 0.0,
        }
    }

    /// Camera at `eye` looking at `target`, with `up` roughly the world up
    /// direction (image `-Y`).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: usize,
        height: usize,
        focal: f64,
        timestamp: f64,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidPose("eye coincides with target".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::InvalidPose("up vector parallel to view direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        // Rows are the camera axes expressed in world coordinates.
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Ok(Self {
            rotation,
            translation,
            focal: (focal, focal),
            principal_point: (width as f64 / 2.0, height as f64 / 2.0),
            width,
            height,
            timestamp,
        })
    }

    pub fn with_timestamp(mut self, timestamp: f64) -> Self {
        self.timestamp = timestamp;
        self
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// 4x4 world-to-camera matrix.
    pub fn pose_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn set_pose_matrix(&mut self, m: &Matrix4<f64>) {
        self.rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        self.translation = m.fixed_view::<3, 1>(0, 3).into_owned();
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let resid = (r.transpose() * r - Matrix3::identity()).amax();
        let det = r.determinant();
        if !(resid < ORTHONORMAL_TOL) || !((det - 1.0).abs() < ORTHONORMAL_TOL) {
            return Err(Error::InvalidPose(format!(
                "rotation not orthonormal (residual {resid:e}, det {det})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) || !self.timestamp.is_finite() {
            return Err(Error::InvalidPose("non-finite translation or timestamp".into()));
        }
        let (fx, fy) = self.focal;
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics(format!(
                "image size must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// World point to camera coordinates.
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pinhole projection to continuous pixel coordinates; `None` behind
    /// the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let c = self.to_camera(p);
        if c.z <= 0.0 {
            return None;
        }
        Some((
            self.focal.0 * c.x / c.z + self.principal_point.0,
            self.focal.1 * c.y / c.z + self.principal_point.1,
        ))
    }

    /// Unit world-frame direction through the center of pixel `(u, v)`.
    pub fn ray_direction(&self, u: usize, v: usize) -> Vector3<f64> {
        let d_cam = Vector3::new(
            (u as f64 + 0.5 - self.principal_point.0) / self.focal.0,
            (v as f64 + 0.5 - self.principal_point.1) / self.focal.1,
            1.0,
        );
        (self.rotation.transpose() * d_cam).normalize()
    }

    /// Same pose at a coarser or finer pixel grid; intrinsics scale with the
    /// image.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            focal: (self.focal.0 * sx, self.focal.1 * sy),
            principal_point: (self.principal_point.0 * sx, self.principal_point.1 * sy),
            width,
            height,
            ..self.clone()
        }
    }
}

/// Per-pixel `(d, o × d)` with shape `6 x H x W`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PluckerMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl PluckerMap {
    #[inline]
    pub fn at(&self, channel: usize, v: usize, u: usize) -> f64 {
        self.data[(channel * self.height + v) * self.width + u]
    }

    pub fn direction(&self, v: usize, u: usize) -> Vector3<f64> {
        Vector3::new(self.at(0, v, u), self.at(1, v, u), self.at(2, v, u))
    }

    pub fn moment(&self, v: usize, u: usize) -> Vector3<f64> {
        Vector3::new(self.at(3, v, u), self.at(4, v, u), self.at(5, v, u))
    }
}

pub fn compute_plucker_map(frame: &CameraFrame) -> Result<PluckerMap> {
    frame.validate()?;
    let (w, h) = (frame.width, frame.height);
    let o = frame.center();
    let mut data = vec![0.0; 6 * h * w];
    for v in 0..h {
        for u in 0..w {
            let d = frame.ray_direction(u, v);
            let m = o.cross(&d);
            for (c, val) in d.iter().chain(m.iter()).enumerate() {
                data[(c * h + v) * w + u] = *val;
            }
        }
    }
    Ok(PluckerMap {
        width: w,
        height: h,
        data,
    })
}

/// Expresses every pose relative to `frames[reference_index]`, which becomes
/// the identity. Intrinsics and timestamps are untouched.
pub fn normalize_to_reference(
    frames: &[CameraFrame],
    reference_index: usize,
) -> Result<Vec<CameraFrame>> {
    if frames.is_empty() {
        return Err(Error::EmptyInput);
    }
    let reference = frames.get(reference_index).ok_or_else(|| {
        Error::InvalidParams(format!(
            "reference index {reference_index} out of range for {} frames",
            frames.len()
        ))
    })?;
    reference.validate()?;
    let r = reference.rotation;
    let t = reference.translation;
    // Closed-form inverse of [R | t].
    let mut inv = Matrix4::identity();
    inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&r.transpose());
    inv.fixed_view_mut::<3, 1>(0, 3)
        .copy_from(&(-(r.transpose() * t)));
    let mut out = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let mut g = f.clone();
        if i == reference_index {
            g.rotation = Matrix3::identity();
            g.translation = Vector3::zeros();
        } else {
            g.set_pose_matrix(&(f.pose_matrix() * inv));
        }
        out.push(g);
    }
    Ok(out)
}

/// Multiplies every translation (and hence every camera center) by `scale`.
pub fn scale_translations(frames: &[CameraFrame], scale: f64) -> Vec<CameraFrame> {
    frames
        .iter()
        .map(|f| CameraFrame {
            translation: f.translation * scale,
            ..f.clone()
        })
        .collect()
}

/// Time-ordered camera path sharing one image size.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    frames: Vec<CameraFrame>,
}

impl Trajectory {
    pub fn new(frames: Vec<CameraFrame>) -> Result<Self> {
        if let Some(first) = frames.first() {
            for f in &frames {
                f.validate()?;
                if (f.width, f.height) != (first.width, first.height) {
                    return Err(Error::shape(format!(
                        "trajectory mixes image sizes {}x{} and {}x{}",
                        first.width, first.height, f.width, f.height
                    )));
                }
            }
        }
        if frames
            .windows(2)
            .any(|w| !(w[1].timestamp > w[0].timestamp))
        {
            return Err(Error::InvalidParams(
                "trajectory timestamps must be strictly increasing".into(),
            ));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[CameraFrame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<CameraFrame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Result of a least-squares scale fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleAlignment {
    pub scale: f64,
    /// Set when every predicted translation is zero; `scale` is then 1.
    pub degenerate: bool,
}

/// Least-squares `s` minimizing `Σ ‖s·t_pred − t_gt‖²`.
pub fn align_metric_scale(pred: &Trajectory, gt: &Trajectory) -> Result<ScaleAlignment> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if pred.len() < 2 {
        return Err(Error::InvalidParams(
            "scale alignment needs at least two frames".into(),
        ));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (p, g) in pred.frames().iter().zip(gt.frames()) {
        num += p.translation.dot(&g.translation);
        den += p.translation.norm_squared();
    }
    if den > 0.0 {
        Ok(ScaleAlignment {
            scale: num / den,
            degenerate: false,
        })
    } else {
        Ok(ScaleAlignment {
            scale: 1.0,
            degenerate: true,
        })
    }
}

/// Formats frames in the whitespace pose-file layout
/// `timestamp fx fy cx cy r00 .. r22 t0 t1 t2`, one frame per line, with 17
/// significant digits per value.
pub fn format_poses(frames: &[CameraFrame]) -> String {
    let mut s = String::new();
    for f in frames {
        let mut vals = vec![
            f.timestamp,
            f.focal.0,
            f.focal.1,
            f.principal_point.0,
            f.principal_point.1,
        ];
        for r in 0..3 {
            for c in 0..3 {
                vals.push(f.rotation[(r, c)]);
            }
        }
        vals.extend(f.translation.iter());
        let line: Vec<String> = vals.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

/// Parses the pose-file layout. Image size is not part of the format and
/// is supplied by the caller. Blank lines and `#` comments are skipped.
pub fn parse_poses(text: &str, width: usize, height: usize) -> Result<Vec<CameraFrame>> {
    let mut frames = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: "<poses>".into(),
                msg: format!("line {}: {e}", lineno + 1),
            })?;
        if vals.len() != 17 {
            return Err(Error::Parse {
                path: "<poses>".into(),
                msg: format!("line {}: expected 17 values, found {}", lineno + 1, vals.len()),
            });
        }
        frames.push(CameraFrame {
            timestamp: vals[0],
            focal: (vals[1], vals[2]),
            principal_point: (vals[3], vals[4]),
            rotation: Matrix3::from_row_slice(&vals[5..14]),
            translation: Vector3::new(vals[14], vals[15], vals[16]),
            width,
            height,
        });
    }
    Ok(frames)
}

pub fn write_pose_file(path: &Path, frames: &[CameraFrame]) -> Result<()> {
    crate::io::write_atomic(path, format_poses(frames).as_bytes())
}

pub fn read_pose_file(path: &Path, width: usize, height: usize) -> Result<Vec<CameraFrame>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text, width, height).map_err(|e| match e {
        Error::Parse { msg, .. } => Error::Parse {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn frame_at_principal(translation: Vector3<f64>) -> CameraFrame {
        // 2x2 image, principal point on the center of pixel (0, 0).
        CameraFrame {
            rotation: Matrix3::identity(),
            translation,
            focal: (10.0, 10.0),
            principal_point: (0.5, 0.5),
            width: 2,
            height: 2,
            timestamp: 0.0,
        }
    }

    #[test]
    fn identity_camera_principal_ray() {
        let map = compute_plucker_map(&frame_at_principal(Vector3::zeros())).unwrap();
        assert_eq!(map.direction(0, 0), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(map.moment(0, 0), Vector3::zeros());
    }

    #[test]
    fn translated_camera_moment() {
        // o = -Rᵀt = (-1, 0, 0); m = o × (0, 0, 1) = (0*1 - 0*0, 0*0 - (-1)*1, 0) = (0, 1, 0).
        let map = compute_plucker_map(&frame_at_principal(Vector3::new(1.0, 0.0, 0.0))).unwrap();
        assert_eq!(map.direction(0, 0), Vector3::new(0.0, 0.0, 1.0));
        let m = map.moment(0, 0);
        let (ox, oy, oz) = (-1.0, 0.0, 0.0);
        let (dx, dy, dz) = (0.0, 0.0, 1.0);
        let want = Vector3::new(oy * dz - oz * dy, oz * dx - ox * dz, ox * dy - oy * dx);
        assert_eq!(m, want);
        assert_eq!(m, Vector3::new(0.0, 1.0, 0.0));
    }

    #[test]
    fn rejects_bad_rotation_and_focal() {
        let mut f = frame_at_principal(Vector3::zeros());
        f.rotation[(0, 0)] = 1.1;
        assert!(matches!(compute_plucker_map(&f), Err(Error::InvalidPose(_))));
        let mut f = frame_at_principal(Vector3::zeros());
        f.rotation = -Matrix3::identity();
        assert!(matches!(compute_plucker_map(&f), Err(Error::InvalidPose(_))));
        let mut f = frame_at_principal(Vector3::zeros());
        f.focal.1 = 0.0;
        assert!(matches!(
            compute_plucker_map(&f),
            Err(Error::InvalidIntrinsics(_))
        ));
    }

    #[test]
    fn look_at_projects_target_to_principal_point() {
        let f = CameraFrame::look_at(
            Vector3::new(3.0, -1.0, 2.0),
            Vector3::new(0.1, 0.2, 0.3),
            Vector3::new(0.0, 0.0, 1.0),
            32,
            32,
            30.0,
            0.0,
        )
        .unwrap();
        f.validate().unwrap();
        let (u, v) = f.project(&Vector3::new(0.1, 0.2, 0.3)).unwrap();
        assert!((u - 16.0).abs() < 1e-12 && (v - 16.0).abs() < 1e-12);
        assert!((f.center() - Vector3::new(3.0, -1.0, 2.0)).norm() < 1e-12);
        // World up maps to image up (negative v).
        let (_, v_up) = f.project(&Vector3::new(0.1, 0.2, 0.8)).unwrap();
        assert!(v_up < 16.0);
    }

    #[test]
    fn normalize_single_and_empty() {
        let f = CameraFrame::look_at(
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::zeros(),
            Vector3::z(),
            4,
            4,
            3.0,
            0.0,
        )
        .unwrap();
        let n = normalize_to_reference(std::slice::from_ref(&f), 0).unwrap();
        assert_eq!(n[0].rotation, Matrix3::identity());
        assert_eq!(n[0].translation, Vector3::zeros());
        assert!(matches!(normalize_to_reference(&[], 0), Err(Error::EmptyInput)));
    }

    #[test]
    fn scale_alignment_simple_cases() {
        let frames: Vec<CameraFrame> = (0..3)
            .map(|i| {
                let mut f = frame_at_principal(Vector3::new(i as f64, 1.0, -2.0 * i as f64));
                f.timestamp = i as f64;
                f
            })
            .collect();
        let gt = Trajectory::new(frames.clone()).unwrap();
        assert_eq!(align_metric_scale(&gt, &gt).unwrap().scale, 1.0);
        let doubled = Trajectory::new(scale_translations(&frames, 2.0)).unwrap();
        assert_eq!(align_metric_scale(&doubled, &gt).unwrap().scale, 0.5);
        let zero = Trajectory::new(scale_translations(&frames, 0.0)).unwrap();
        let fit = align_metric_scale(&zero, &gt).unwrap();
        assert!(fit.degenerate && fit.scale == 1.0);
    }

    #[test]
    fn trajectory_requires_increasing_time() {
        let a = frame_at_principal(Vector3::zeros());
        assert!(Trajectory::new(vec![a.clone(), a]).is_err());
    }

    #[test]
    fn pose_text_round_trip_is_bitwise() {
        let rot = Rotation3::from_euler_angles(0.3, -1.2, 2.9);
        let f = CameraFrame {
            rotation: *rot.matrix(),
            translation: Vector3::new(0.1, -1.0 / 3.0, 1e-17),
            focal: (std::f64::consts::PI * 10.0, 31.000000000000004),
            principal_point: (16.0, 15.9999),
            width: 32,
            height: 32,
            timestamp: 0.1 + 0.2,
        };
        let text = format_poses(std::slice::from_ref(&f));
        let back = parse_poses(&text, 32, 32).unwrap();
        assert_eq!(back, vec![f]);
        assert_eq!(format_poses(&back), text);
    }
}
