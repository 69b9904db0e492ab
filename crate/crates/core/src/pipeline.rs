//! The five batch commands behind the `camrope` binary.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! episodes/NNNNN/          gen-data archives
//! manifest.txt             gen-data: `index task seed sha256`
//! loss.log                 train: `step loss lr task_tag`
//! checkpoints/step_NNNNNNNN.ckpt, checkpoints/latest.ckpt
//! samples/NNNNN/{gt,generated}/
//! eval/NNNNN.{txt,json}, eval/summary.{txt,json}, eval/copy_baseline.{txt,json}
//! ablation.txt, ablation.json
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera_attention::AttentionVariant;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::episode::{generate_episode, read_episode, write_episode, Episode, Staging};
use crate::error::{Error, Result};
use crate::evaluate::{copy_baseline, evaluate_task, generate_targets, TaskEval};
use crate::geometry::Trajectory;
use crate::io;
use crate::metrics::{trajectory_errors, MetricReport, SsimParams, TrajectoryErrors};
use crate::model::Model;
use crate::tasking::{sample_task, TaskKind, TaskSpec};
use crate::train::{held_out_seed, training_seed, Trainer};

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

pub fn latest_checkpoint(out: &Path) -> PathBuf {
    checkpoint_dir(out).join("latest.ckpt")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub task: TaskSpec,
    pub seed: u64,
    pub hash: String,
}

/// Writes `gen_data.episodes` training-distribution archives and a manifest.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed()?);
    let mut entries = Vec::with_capacity(cfg.gen_data.episodes);
    let mut text = String::new();
    for index in 0..cfg.gen_data.episodes {
        let task = sample_task(&mut rng, &cfg.tasks)?;
        let seed = training_seed(&mut rng);
        let ep = generate_episode(&task, seed, &cfg.data, Staging::default())?;
        let hash = write_episode(&cfg.out_dir.join("episodes").join(format!("{index:05}")), &ep)?;
        writeln!(text, "{index} {} {seed} {hash}", task.task.tag()).unwrap();
        entries.push(ManifestEntry {
            index,
            task,
            seed,
            hash,
        });
    }
    io::write_atomic(&cfg.out_dir.join("manifest.txt"), text.as_bytes())?;
    Ok(entries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub resumed_from: Option<u64>,
    pub final_loss: Option<f64>,
}

/// Trains to `train.steps`, resuming from `checkpoints/latest.ckpt` when
/// present. On a numerical failure the log up to the failing step and the
/// last good checkpoint stay on disk and the error is returned.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    let log_path = out.join("loss.log");
    let latest = latest_checkpoint(out);
    let (mut trainer, mut log, resumed_from) = if latest.is_file() {
        let ck = Checkpoint::load(&latest, Some(&cfg.model))?;
        let step = ck.step;
        let old = if log_path.is_file() {
            io::read_to_string(&log_path)?
        } else {
            String::new()
        };
        // Drop lines past the checkpoint so the log matches the state.
        let kept: String = old
            .lines()
            .filter(|l| l.split(' ').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step))
            .map(|l| format!("{l}\n"))
            .collect();
        (Trainer::from_checkpoint(cfg.clone(), ck)?, kept, Some(step))
    } else {
        let t = Trainer::new(cfg.clone())?;
        save_checkpoint(&t, out)?;
        (t, String::new(), None)
    };
    let mut last = None;
    while trainer.step < cfg.train.steps {
        match trainer.train_step() {
            Ok(rec) => {
                log.push_str(&rec.log_line());
                log.push('\n');
                last = Some(rec.loss);
            }
            Err(e) => {
                io::write_atomic(&log_path, log.as_bytes())?;
                return Err(e);
            }
        }
        let every = cfg.train.checkpoint_every;
        if every > 0 && trainer.step % every == 0 && trainer.step < cfg.train.steps {
            io::write_atomic(&log_path, log.as_bytes())?;
            save_checkpoint(&trainer, out)?;
        }
    }
    io::write_atomic(&log_path, log.as_bytes())?;
    if resumed_from != Some(trainer.step) && trainer.step > 0 {
        save_checkpoint(&trainer, out)?;
    }
    Ok(TrainSummary {
        steps: trainer.step,
        resumed_from,
        final_loss: last,
    })
}

fn save_checkpoint(t: &Trainer, out: &Path) -> Result<()> {
    let ck = t.checkpoint();
    let bytes = ck.to_bytes();
    io::write_atomic(&checkpoint_dir(out).join(format!("step_{:08}.ckpt", ck.step)), &bytes)?;
    io::write_atomic(&latest_checkpoint(out), &bytes)
}

/// The request shape `sample` generates for.
pub fn sample_spec(cfg: &RunConfig) -> Result<TaskSpec> {
    let kind: TaskKind = cfg.sample.task.parse()?;
    let s = &cfg.sample;
    let ctx = if kind == TaskKind::T2VCamCtrl {
        (0, 0)
    } else {
        (s.context_views, s.context_frames)
    };
    Ok(cfg.tasks.spec(kind, ctx, (s.target_views, s.target_frames)))
}

/// Loads `sample.checkpoint`, or the run's latest checkpoint.
pub fn load_model(cfg: &RunConfig) -> Result<Model> {
    let path = cfg
        .sample
        .checkpoint
        .clone()
        .unwrap_or_else(|| latest_checkpoint(&cfg.out_dir));
    let ck = Checkpoint::load(&path, Some(&cfg.model))?;
    Ok(Model {
        config: ck.config,
        params: ck.params,
    })
}

/// Generates `sample.episodes` held-out episodes. Each lands in
/// `samples/NNNNN/gt` and, with the target frames replaced by samples,
/// `samples/NNNNN/generated`.
pub fn cmd_sample(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let spec = sample_spec(cfg)?;
    let model = load_model(cfg)?;
    let staging = Staging {
        target_kind: cfg.sample.target_trajectory,
    };
    let base = cfg.seed()?;
    let mut dirs = Vec::new();
    for i in 0..cfg.sample.episodes {
        let seed = held_out_seed(base, i as u64);
        let ep = generate_episode(&spec, seed, &cfg.data, staging)?;
        let frames = generate_targets(&model, &ep, cfg.sample.steps, seed ^ 0x5EED)?;
        let mut generated = ep.clone();
        for (f, img) in generated.target.iter_mut().zip(frames) {
            f.image = img;
        }
        let dir = samples_dir(cfg).join(format!("{i:05}"));
        write_episode(&dir.join("gt"), &ep)?;
        write_episode(&dir.join("generated"), &generated)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

fn samples_dir(cfg: &RunConfig) -> PathBuf {
    cfg.eval
        .samples_dir
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("samples"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub episodes: Vec<(String, MetricReport)>,
    /// Over every generated frame of every episode.
    pub aggregate: MetricReport,
    pub copy_baseline: Option<MetricReport>,
}

/// Scores one generated archive against its ground truth.
pub fn evaluate_pair(generated: &Episode, gt: &Episode, align_scale: bool) -> Result<MetricReport> {
    let mut report = MetricReport::from_frames(&generated.target_images(), &gt.target_images(), SsimParams::default())?;
    let cams = |ep: &Episode| Trajectory::new(ep.target.iter().map(|f| f.camera.clone()).collect());
    if let (Ok(p), Ok(g)) = (cams(generated), cams(gt)) {
        report.trajectory = Some(trajectory_errors(&p, &g, align_scale)?);
    }
    Ok(report)
}

/// Scores every `samples/*/generated` archive against its `gt` sibling.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalSummary> {
    let root = samples_dir(cfg);
    let mut names: Vec<String> = std::fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("gt/meta").is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!("no sample archives under {}", root.display())));
    }
    let eval_dir = cfg.out_dir.join("eval");
    let mut episodes = Vec::new();
    let (mut gen_all, mut gt_all, mut copy_all, mut gt_copied) = (vec![], vec![], vec![], vec![]);
    for name in names {
        let (gt, _) = read_episode(&root.join(&name).join("gt"))?;
        let (generated, _) = read_episode(&root.join(&name).join("generated"))?;
        let report = evaluate_pair(&generated, &gt, cfg.eval.align_scale)?;
        report.write(&eval_dir, &name)?;
        gen_all.extend(generated.target_images());
        gt_all.extend(gt.target_images());
        let copies = copy_baseline(&gt);
        if copies.len() == gt.target.len() {
            copy_all.extend(copies);
            gt_copied.extend(gt.target_images());
        }
        episodes.push((name, report));
    }
    let mut aggregate = MetricReport::from_frames(&gen_all, &gt_all, SsimParams::default())?;
    aggregate.trajectory = merge_trajectories(episodes.iter().filter_map(|(_, r)| r.trajectory.as_ref()));
    aggregate.write(&eval_dir, "summary")?;
    let copy = if copy_all.is_empty() {
        None
    } else {
        let r = MetricReport::from_frames(&copy_all, &gt_copied, SsimParams::default())?;
        r.write(&eval_dir, "copy_baseline")?;
        Some(r)
    };
    Ok(EvalSummary {
        episodes,
        aggregate,
        copy_baseline: copy,
    })
}

/// Sums and per-frame lists over episodes; `scale` is the mean of the
/// per-episode scales.
fn merge_trajectories<'a>(parts: impl Iterator<Item = &'a TrajectoryErrors>) -> Option<TrajectoryErrors> {
    let parts: Vec<&TrajectoryErrors> = parts.collect();
    if parts.is_empty() {
        return None;
    }
    let per_frame_rot: Vec<f64> = parts.iter().flat_map(|p| p.per_frame_rot.iter().copied()).collect();
    let per_frame_trans: Vec<f64> = parts.iter().flat_map(|p| p.per_frame_trans.iter().copied()).collect();
    let n = per_frame_rot.len().max(1) as f64;
    let rot_err: f64 = per_frame_rot.iter().sum();
    let trans_err: f64 = per_frame_trans.iter().sum();
    Some(TrajectoryErrors {
        rot_err,
        trans_err,
        rot_err_mean: rot_err / n,
        trans_err_mean: trans_err / n,
        per_frame_rot,
        per_frame_trans,
        scale: parts.iter().map(|p| p.scale).sum::<f64>() / parts.len() as f64,
        scale_degenerate: parts.iter().any(|p| p.scale_degenerate),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AttentionVariant,
    /// One entry per seed, in `ablate.seeds` order.
    pub runs: Vec<TaskEval>,
}

impl AblationRow {
    pub fn mean_psnr(&self) -> f64 {
        self.runs.iter().map(|r| r.psnr).sum::<f64>() / self.runs.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.runs.iter().map(|r| r.ssim).sum::<f64>() / self.runs.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: AttentionVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Seeds on which `a` scores at least `b`.
    pub fn wins(&self, a: AttentionVariant, b: AttentionVariant) -> usize {
        match (self.row(a), self.row(b)) {
            (Some(ra), Some(rb)) => ra.runs.iter().zip(&rb.runs).filter(|(x, y)| x.psnr >= y.psnr).count(),
            _ => 0,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# held-out MonoVideoNVS, {} steps per run, seeds {:?}\n", self.steps, self.seeds);
        write!(s, "{:<22} {:<34}", "variant", "description").unwrap();
        for seed in &self.seeds {
            write!(s, " {:>10}", format!("psnr@{seed}")).unwrap();
        }
        writeln!(s, " {:>10} {:>8} {:>10}", "psnr_mean", "ssim", "copy_psnr").unwrap();
        for r in &self.rows {
            write!(s, "{:<22} {:<34}", r.variant.name(), r.variant.description()).unwrap();
            for run in &r.runs {
                write!(s, " {:>10.4}", run.psnr).unwrap();
            }
            let copy = r.runs.first().map_or(f64::NAN, |x| x.psnr_copy);
            writeln!(s, " {:>10.4} {:>8.4} {:>10.4}", r.mean_psnr(), r.mean_ssim(), copy).unwrap();
        }
        s
    }
}

/// Trains one model per (variant, seed) with the same budget and scores
/// each on the same held-out MonoVideoNVS episodes.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationTable> {
    cfg.validate()?;
    let steps = cfg.ablate.steps.unwrap_or(cfg.train.steps);
    let spec = cfg.tasks.spec(
        TaskKind::MonoVideoNVS,
        (1, cfg.eval.context_frames),
        (1, cfg.eval.target_frames),
    );
    let mut rows = Vec::new();
    for variant in AttentionVariant::ALL {
        let mut runs = Vec::new();
        for &seed in &cfg.ablate.seeds {
            let mut run = cfg.clone();
            run.seed = Some(seed);
            run.model.variant = variant;
            run.train.steps = steps;
            let model = train_in_memory(run)?;
            runs.push(evaluate_task(
                &model,
                &spec,
                Staging::default(),
                &cfg.data,
                cfg.eval.episodes,
                cfg.eval.sampler_steps,
                seed,
            )?);
        }
        rows.push(AblationRow { variant, runs });
    }
    let table = AblationTable {
        seeds: cfg.ablate.seeds.clone(),
        steps,
        rows,
    };
    io::write_atomic(&cfg.out_dir.join("ablation.txt"), table.to_text().as_bytes())?;
    let json = serde_json::to_string_pretty(&table).expect("table serializes");
    io::write_atomic(&cfg.out_dir.join("ablation.json"), json.as_bytes())?;
    Ok(table)
}

/// Runs `train.steps` updates without touching the filesystem.
pub fn train_in_memory(cfg: RunConfig) -> Result<Model> {
    let steps = cfg.train.steps;
    let mut t = Trainer::new(cfg)?;
    while t.step < steps {
        t.train_step()?;
    }
    Ok(t.model)
}
