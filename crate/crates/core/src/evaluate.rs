//! Held-out evaluation of a trained model against rendered ground truth
//! and the copy-nearest-context-frame baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{generate_episode, Episode, EpisodeParams, Staging};
use crate::error::Result;
use crate::image::Image;
use crate::metrics::{psnr, ssim, SsimParams};
use crate::model::{Model, Request};
use crate::tasking::TaskSpec;
use crate::train::held_out_seed;

/// Per-frame PSNR values above this are counted as this when averaging,
/// so an exact copy does not turn a mean into `inf`.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: String,
    pub episodes: usize,
    pub frames: usize,
    /// Mean per-frame PSNR of generated frames.
    pub psnr: f64,
    pub ssim: f64,
    /// Mean per-frame PSNR of the copy-nearest-context-frame baseline.
    pub psnr_copy: f64,
    pub all_finite: bool,
}

/// Generated target frames for `ep`, quantized to 8 bits as stored on disk.
pub fn generate_targets(model: &Model, ep: &Episode, sampler_steps: usize, sample_seed: u64) -> Result<Vec<Image>> {
    let prepared = model.prepare(&Request::from_episode(ep, false))?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let z = model.sample(&prepared, sampler_steps, &mut rng)?;
    Ok(prepared
        .decode_targets(&z, &model.config)?
        .iter()
        .map(Image::quantized)
        .collect())
}

/// For each target frame, the context frame nearest in time (first view on
/// ties). Empty when the episode has no context.
pub fn copy_baseline(ep: &Episode) -> Vec<Image> {
    ep.target
        .iter()
        .filter_map(|f| ep.nearest_context(f.camera.timestamp).map(|c| c.image.clone()))
        .collect()
}

fn capped(p: f64) -> f64 {
    p.min(PSNR_CAP_DB)
}

/// Samples `episodes` held-out episodes of `spec` and scores them.
pub fn evaluate_task(
    model: &Model,
    spec: &TaskSpec,
    staging: Staging,
    params: &EpisodeParams,
    episodes: usize,
    sampler_steps: usize,
    base_seed: u64,
) -> Result<TaskEval> {
    let mut p_sum = 0.0;
    let mut s_sum = 0.0;
    let mut c_sum = 0.0;
    let mut frames = 0usize;
    let mut copies = 0usize;
    let mut all_finite = true;
    for i in 0..episodes {
        let seed = held_out_seed(base_seed, i as u64);
        let ep = generate_episode(spec, seed, params, staging)?;
        let gen = generate_targets(model, &ep, sampler_steps, seed ^ 0x5EED)?;
        all_finite &= gen.iter().all(|g| g.data.iter().all(|v| v.is_finite()));
        for (g, t) in gen.iter().zip(&ep.target) {
            p_sum += capped(psnr(g, &t.image, 1.0)?);
            s_sum += ssim(g, &t.image, SsimParams::default())?;
            frames += 1;
        }
        for (c, t) in copy_baseline(&ep).iter().zip(&ep.target) {
            c_sum += capped(psnr(c, &t.image, 1.0)?);
            copies += 1;
        }
    }
    let n = frames.max(1) as f64;
    Ok(TaskEval {
        task: spec.task.tag().to_string(),
        episodes,
        frames,
        psnr: p_sum / n,
        ssim: s_sum / n,
        psnr_copy: if copies > 0 { c_sum / copies as f64 } else { f64::NAN },
        all_finite,
    })
}
