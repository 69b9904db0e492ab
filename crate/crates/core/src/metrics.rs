//! Image reconstruction and camera-trajectory metrics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{align_metric_scale, Trajectory};
use crate::image::Image;

/// PSNR in dB. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "psnr of {}x{} and {}x{} images",
            a.width, a.height, b.width, b.height
        )));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 8,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

/// Mean SSIM over every `window x window` position (stride 1, uniform
/// weights, population statistics) and every channel.
pub fn ssim(a: &Image, b: &Image, params: SsimParams) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape("ssim of differently sized images"));
    }
    let win = params.window;
    if win == 0 || win > a.width.min(a.height) {
        return Err(Error::shape(format!(
            "ssim window {win} does not fit a {}x{} image",
            a.width, a.height
        )));
    }
    let c1 = (params.k1 * params.peak).powi(2);
    let c2 = (params.k2 * params.peak).powi(2);
    let (w, h) = (a.width, a.height);
    // Summed-area tables of x, y, x², y², xy per channel.
    let integral = |f: &dyn Fn(usize, usize, usize) -> f64, c: usize| -> Vec<f64> {
        let mut s = vec![0.0; (w + 1) * (h + 1)];
        for v in 0..h {
            let mut row = 0.0;
            for u in 0..w {
                row += f(c, v, u);
                s[(v + 1) * (w + 1) + u + 1] = s[v * (w + 1) + u + 1] + row;
            }
        }
        s
    };
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..Image::CHANNELS {
        let sx = integral(&|c, v, u| a.at(c, v, u), c);
        let sy = integral(&|c, v, u| b.at(c, v, u), c);
        let sxx = integral(&|c, v, u| a.at(c, v, u).powi(2), c);
        let syy = integral(&|c, v, u| b.at(c, v, u).powi(2), c);
        let sxy = integral(&|c, v, u| a.at(c, v, u) * b.at(c, v, u), c);
        let boxsum = |s: &[f64], v: usize, u: usize| {
            s[(v + win) * (w + 1) + u + win] - s[v * (w + 1) + u + win] - s[(v + win) * (w + 1) + u]
                + s[v * (w + 1) + u]
        };
        for v in 0..=h - win {
            for u in 0..=w - win {
                let mx = boxsum(&sx, v, u) / n;
                let my = boxsum(&sy, v, u) / n;
                let vx = (boxsum(&sxx, v, u) / n - mx * mx).max(0.0);
                let vy = (boxsum(&syy, v, u) / n - my * my).max(0.0);
                let cxy = boxsum(&sxy, v, u) / n - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}

/// Summed and per-frame-mean rotation and translation errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryErrors {
    /// Radians.
    pub rot_err: f64,
    pub trans_err: f64,
    pub rot_err_mean: f64,
    pub trans_err_mean: f64,
    pub per_frame_rot: Vec<f64>,
    pub per_frame_trans: Vec<f64>,
    pub scale: f64,
    pub scale_degenerate: bool,
}

/// Relative rotation angle between two rotations, in radians.
pub fn rotation_angle(r_pred: &nalgebra::Matrix3<f64>, r_gt: &nalgebra::Matrix3<f64>) -> f64 {
    let cos = ((r_pred * r_gt.transpose()).trace() - 1.0) / 2.0;
    cos.clamp(-1.0, 1.0).acos()
}

pub fn trajectory_errors(pred: &Trajectory, gt: &Trajectory, align_scale: bool) -> Result<TrajectoryErrors> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    let (scale, degenerate) = if align_scale && pred.len() >= 2 {
        let a = align_metric_scale(pred, gt)?;
        (a.scale, a.degenerate)
    } else {
        (1.0, false)
    };
    let mut rot = Vec::with_capacity(pred.len());
    let mut trans = Vec::with_capacity(pred.len());
    for (p, g) in pred.frames().iter().zip(gt.frames()) {
        rot.push(rotation_angle(&p.rotation, &g.rotation));
        trans.push((scale * p.translation - g.translation).norm());
    }
    let n = pred.len().max(1) as f64;
    Ok(TrajectoryErrors {
        rot_err: rot.iter().sum(),
        trans_err: trans.iter().sum(),
        rot_err_mean: rot.iter().sum::<f64>() / n,
        trans_err_mean: trans.iter().sum::<f64>() / n,
        per_frame_rot: rot,
        per_frame_trans: trans,
        scale,
        scale_degenerate: degenerate,
    })
}

/// Per-frame and aggregate metrics for one evaluated set of frames.
///
/// PSNR uses `inf` for exact matches. LPIPS is not computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub per_frame_psnr: Vec<f64>,
    pub per_frame_ssim: Vec<f64>,
    pub trajectory: Option<TrajectoryErrors>,
}

impl MetricReport {
    pub fn from_frames(generated: &[Image], gt: &[Image], params: SsimParams) -> Result<Self> {
        if generated.len() != gt.len() {
            return Err(Error::LengthMismatch {
                left: generated.len(),
                right: gt.len(),
            });
        }
        if gt.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut p = Vec::new();
        let mut s = Vec::new();
        for (a, b) in generated.iter().zip(gt) {
            p.push(psnr(a, b, params.peak)?);
            s.push(ssim(a, b, params)?);
        }
        let n = p.len() as f64;
        Ok(Self {
            psnr: p.iter().sum::<f64>() / n,
            ssim: s.iter().sum::<f64>() / n,
            per_frame_psnr: p,
            per_frame_ssim: s,
            trajectory: None,
        })
    }

    /// Flat `key = value` pairs with stable names.
    pub fn flat(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("frames".into(), self.per_frame_psnr.len().to_string());
        m.insert("lpips".into(), "not_computed".into());
        m.insert("psnr_db".into(), fmt_f(self.psnr));
        m.insert("ssim".into(), fmt_f(self.ssim));
        for (i, (p, s)) in self.per_frame_psnr.iter().zip(&self.per_frame_ssim).enumerate() {
            m.insert(format!("frame.{i:03}.psnr_db"), fmt_f(*p));
            m.insert(format!("frame.{i:03}.ssim"), fmt_f(*s));
        }
        if let Some(t) = &self.trajectory {
            m.insert("rot_err_rad".into(), fmt_f(t.rot_err));
            m.insert("rot_err_rad_mean".into(), fmt_f(t.rot_err_mean));
            m.insert("trans_err".into(), fmt_f(t.trans_err));
            m.insert("trans_err_mean".into(), fmt_f(t.trans_err_mean));
            m.insert("scale".into(), fmt_f(t.scale));
            m.insert("scale_degenerate".into(), t.scale_degenerate.to_string());
        }
        m
    }

    pub fn to_text(&self) -> String {
        self.flat()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// JSON form; infinite PSNR is written as the string `"inf"`.
    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self.flat()).expect("string map");
        v["per_frame_psnr_db"] = self.per_frame_psnr.iter().map(|p| json_f(*p)).collect();
        v["per_frame_ssim"] = self.per_frame_ssim.iter().map(|p| json_f(*p)).collect();
        serde_json::to_string_pretty(&v).expect("json")
    }

    /// Writes `<stem>.txt` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        crate::io::write_atomic(&dir.join(format!("{stem}.txt")), self.to_text().as_bytes())?;
        crate::io::write_atomic(&dir.join(format!("{stem}.json")), self.to_json().as_bytes())
    }
}

fn fmt_f(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x:.6}")
    }
}

fn json_f(x: f64) -> serde_json::Value {
    if x.is_finite() {
        serde_json::json!(x)
    } else {
        serde_json::json!("inf")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        let mut img = Image::filled(12, 10, [0.0; 3]);
        for c in 0..3 {
            for v in 0..10 {
                for u in 0..12 {
                    img.set(c, v, u, ((u * 7 + v * 3 + c * 5) % 17) as f64 / 16.0);
                }
            }
        }
        img
    }

    #[test]
    fn psnr_cases() {
        let a = ramp();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = Image::filled(4, 4, [0.5; 3]);
        let c = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&b, &c, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b, 1.0).is_err());
    }

    #[test]
    fn ssim_of_identical_and_constant_images() {
        let a = ramp();
        assert!((ssim(&a, &a, SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
        let k = Image::filled(8, 8, [0.3; 3]);
        assert!((ssim(&k, &k, SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Image::filled(4, 4, [0.0; 3]), &Image::filled(4, 4, [0.0; 3]), SsimParams::default()).is_err());
    }

    #[test]
    fn report_keys_and_infinite_psnr() {
        let a = ramp();
        let r = MetricReport::from_frames(&[a.clone()], &[a], SsimParams::default()).unwrap();
        let text = r.to_text();
        assert!(text.contains("psnr_db = inf"));
        assert!(text.contains("lpips = not_computed"));
        assert!(r.to_json().contains("\"inf\""));
    }
}
