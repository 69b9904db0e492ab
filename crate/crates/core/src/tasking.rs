//! Multitask configuration sampling: which task, which context and target
//! shapes, and which timestamps the frames get.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    MonoImageNVS,
    MultiViewImageNVS,
    MonoVideoNVS,
    T2VCamCtrl,
    I2VCamCtrl,
    V2VCamCtrl,
    /// Multi-view video context. Evaluation only: never drawn for training.
    MultiViewVideoNVS,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::MonoImageNVS,
        TaskKind::MultiViewImageNVS,
        TaskKind::MonoVideoNVS,
        TaskKind::T2VCamCtrl,
        TaskKind::I2VCamCtrl,
        TaskKind::V2VCamCtrl,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            TaskKind::MonoImageNVS => "MonoImageNVS",
            TaskKind::MultiViewImageNVS => "MultiViewImageNVS",
            TaskKind::MonoVideoNVS => "MonoVideoNVS",
            TaskKind::T2VCamCtrl => "T2V_CamCtrl",
            TaskKind::I2VCamCtrl => "I2V_CamCtrl",
            TaskKind::V2VCamCtrl => "V2V_CamCtrl",
            TaskKind::MultiViewVideoNVS => "MultiViewVideoNVS",
        }
    }

    pub fn is_nvs(self) -> bool {
        matches!(
            self,
            TaskKind::MonoImageNVS
                | TaskKind::MultiViewImageNVS
                | TaskKind::MonoVideoNVS
                | TaskKind::MultiViewVideoNVS
        )
    }

    /// Position in [`TaskKind::ALL`]; `None` for evaluation-only kinds.
    fn index(self) -> Option<usize> {
        Self::ALL.iter().position(|&k| k == self)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .chain([TaskKind::MultiViewVideoNVS])
            .find(|k| k.tag().eq_ignore_ascii_case(s) || format!("{k:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown task tag `{s}`")))
    }
}

/// `(views, frames)`.
pub type Shape = (usize, usize);

/// Context and target shapes allowed for each task, in the order listed in
/// the training-configuration table.
pub const TASK_TABLE: [(TaskKind, &[Shape], &[Shape]); 6] = [
    (TaskKind::MonoImageNVS, &[(1, 1)], &[(1, 1)]),
    (TaskKind::MultiViewImageNVS, &[(3, 1), (2, 1)], &[(1, 1)]),
    (TaskKind::MonoVideoNVS, &[(1, 3)], &[(1, 3)]),
    (TaskKind::T2VCamCtrl, &[(0, 0)], &[(1, 3), (1, 5), (1, 10)]),
    (TaskKind::I2VCamCtrl, &[(1, 1)], &[(1, 3), (1, 5), (1, 10)]),
    (TaskKind::V2VCamCtrl, &[(1, 3)], &[(1, 3), (1, 5), (1, 10)]),
];

fn table_row(kind: TaskKind) -> (&'static [Shape], &'static [Shape]) {
    match kind.index() {
        Some(i) => (TASK_TABLE[i].1, TASK_TABLE[i].2),
        None => (&[], &[]),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub context_shape: Shape,
    pub target_shape: Shape,
    /// Largest allowed gap, in frames, between the first context and first
    /// target frame. `None` for tasks without a free offset (NVS, and T2V
    /// which has no context).
    pub delta: Option<usize>,
}

impl TaskSpec {
    /// True when the shapes and offset are allowed by [`TASK_TABLE`].
    pub fn in_table(&self) -> bool {
        let (ctx, tgt) = table_row(self.task);
        let delta_ok = match self.task {
            TaskKind::I2VCamCtrl | TaskKind::V2VCamCtrl => self.delta.is_some(),
            _ => self.delta.is_none(),
        };
        ctx.contains(&self.context_shape) && tgt.contains(&self.target_shape) && delta_ok
    }

    pub fn context_frames(&self) -> usize {
        self.context_shape.0 * self.context_shape.1
    }

    pub fn target_frames(&self) -> usize {
        self.target_shape.0 * self.target_shape.1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskWeights {
    #[serde(rename = "MonoImageNVS")]
    pub mono_image_nvs: f64,
    #[serde(rename = "MultiViewImageNVS")]
    pub multi_view_image_nvs: f64,
    #[serde(rename = "MonoVideoNVS")]
    pub mono_video_nvs: f64,
    #[serde(rename = "T2V_CamCtrl")]
    pub t2v: f64,
    #[serde(rename = "I2V_CamCtrl")]
    pub i2v: f64,
    #[serde(rename = "V2V_CamCtrl")]
    pub v2v: f64,
}

impl Default for TaskWeights {
    /// Uniform over the five task families; the two image NVS tasks share
    /// one family's weight.
    fn default() -> Self {
        Self {
            mono_image_nvs: 0.5,
            multi_view_image_nvs: 0.5,
            mono_video_nvs: 1.0,
            t2v: 1.0,
            i2v: 1.0,
            v2v: 1.0,
        }
    }
}

impl TaskWeights {
    pub fn one_hot(kind: TaskKind) -> Self {
        let mut w = [0.0; 6];
        w[kind.index().expect("trainable task")] = 1.0;
        Self::from_array(w)
    }

    pub fn from_array(w: [f64; 6]) -> Self {
        Self {
            mono_image_nvs: w[0],
            multi_view_image_nvs: w[1],
            mono_video_nvs: w[2],
            t2v: w[3],
            i2v: w[4],
            v2v: w[5],
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.mono_image_nvs,
            self.multi_view_image_nvs,
            self.mono_video_nvs,
            self.t2v,
            self.i2v,
            self.v2v,
        ]
    }
}

/// Task-mixture block of the training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskMixture {
    pub weights: TaskWeights,
    pub delta_i2v: Option<usize>,
    pub delta_v2v: usize,
    /// Context view counts offered to multi-view image NVS.
    pub multi_view_context_views: Vec<usize>,
    /// Target lengths offered to the camera-control tasks.
    pub camctrl_target_frames: Vec<usize>,
    /// Fraction of training steps restricted to multi-view image NVS.
    pub warmup_fraction: f64,
}

impl Default for TaskMixture {
    fn default() -> Self {
        Self {
            weights: TaskWeights::default(),
            delta_i2v: None,
            delta_v2v: 0,
            multi_view_context_views: vec![3, 2],
            camctrl_target_frames: vec![3, 5, 10],
            warmup_fraction: 0.05,
        }
    }
}

impl TaskMixture {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights.as_array();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidWeights(format!("{w:?}")));
        }
        let (mv, _) = table_row(TaskKind::MultiViewImageNVS);
        if self.multi_view_context_views.is_empty()
            || self
                .multi_view_context_views
                .iter()
                .any(|&v| !mv.contains(&(v, 1)))
        {
            return Err(Error::Config(format!(
                "multi-view context views {:?} outside the task table",
                self.multi_view_context_views
            )));
        }
        let (_, ct) = table_row(TaskKind::V2VCamCtrl);
        if self.camctrl_target_frames.is_empty()
            || self
                .camctrl_target_frames
                .iter()
                .any(|&f| !ct.contains(&(1, f)))
        {
            return Err(Error::Config(format!(
                "camera-control target lengths {:?} outside the task table",
                self.camctrl_target_frames
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn delta(&self, kind: TaskKind, context_frames: usize) -> Option<usize> {
        match kind {
            TaskKind::I2VCamCtrl => Some(self.delta_i2v.unwrap_or(context_frames)),
            TaskKind::V2VCamCtrl => Some(self.delta_v2v),
            _ => None,
        }
    }

    /// Builds the spec for `kind` with the given shapes, filling in Δ.
    pub fn spec(&self, kind: TaskKind, context_shape: Shape, target_shape: Shape) -> TaskSpec {
        TaskSpec {
            task: kind,
            context_shape,
            target_shape,
            delta: self.delta(kind, context_shape.1),
        }
    }
}

/// Categorical draw over task kinds, then a uniform draw over that kind's
/// context and target shapes.
pub fn sample_task<R: Rng + ?Sized>(rng: &mut R, mixture: &TaskMixture) -> Result<TaskSpec> {
    mixture.validate()?;
    let w = mixture.weights.as_array();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut kind = TaskKind::ALL[5];
    for (k, &wk) in TaskKind::ALL.iter().zip(&w) {
        if wk > 0.0 && u < wk {
            kind = *k;
            break;
        }
        u -= wk;
    }
    // Guard against the last positive weight being skipped by rounding.
    if w[kind.index().unwrap()] == 0.0 {
        kind = TaskKind::ALL[w.iter().rposition(|&x| x > 0.0).unwrap()];
    }
    let (ctx_menu, tgt_menu): (Vec<Shape>, Vec<Shape>) = match kind {
        TaskKind::MultiViewImageNVS => (
            mixture
                .multi_view_context_views
                .iter()
                .map(|&v| (v, 1))
                .collect(),
            vec![(1, 1)],
        ),
        TaskKind::T2VCamCtrl | TaskKind::I2VCamCtrl | TaskKind::V2VCamCtrl => (
            table_row(kind).0.to_vec(),
            mixture
                .camctrl_target_frames
                .iter()
                .map(|&f| (1, f))
                .collect(),
        ),
        _ => {
            let (c, t) = table_row(kind);
            (c.to_vec(), t.to_vec())
        }
    };
    let ctx = ctx_menu[rng.random_range(0..ctx_menu.len())];
    let tgt = tgt_menu[rng.random_range(0..tgt_menu.len())];
    Ok(mixture.spec(kind, ctx, tgt))
}

/// As [`sample_task`], but during warmup only multi-view image NVS is drawn.
pub fn sample_task_phase<R: Rng + ?Sized>(
    rng: &mut R,
    mixture: &TaskMixture,
    warmup: bool,
) -> Result<TaskSpec> {
    if warmup {
        let m = TaskMixture {
            weights: TaskWeights::one_hot(TaskKind::MultiViewImageNVS),
            ..mixture.clone()
        };
        sample_task(rng, &m)
    } else {
        sample_task(rng, mixture)
    }
}

/// Frame timestamps for one episode, in seconds. Context frames of every
/// view share the listed times; likewise for targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Timestamps {
    pub context: Vec<f64>,
    pub target: Vec<f64>,
}

/// Places the context and target clips on a timeline of `clip_frames`
/// frames sampled at `fps`. NVS targets reuse the context times. For
/// camera-control tasks the first target frame lands within Δ frames of the
/// first context frame, on either side.
pub fn assign_timestamps<R: Rng + ?Sized>(
    spec: &TaskSpec,
    rng: &mut R,
    fps: f64,
    clip_frames: usize,
) -> Timestamps {
    let (fc, ft) = (spec.context_shape.1, spec.target_shape.1);
    let (ctx_start, tgt_start): (i64, i64) = if spec.task.is_nvs() {
        (0, 0)
    } else if fc == 0 {
        (0, 0)
    } else {
        let delta = spec.delta.unwrap_or(0) as i64;
        (0, rng.random_range(-delta..=delta))
    };
    let lo = ctx_start.min(tgt_start);
    let hi = (ctx_start + fc as i64).max(tgt_start + ft as i64);
    let span = (hi - lo) as usize;
    let base = if clip_frames > span {
        rng.random_range(0..=(clip_frames - span)) as i64
    } else {
        0
    } - lo;
    let times = |start: i64, n: usize| -> Vec<f64> {
        (0..n as i64).map(|i| (base + start + i) as f64 / fps).collect()
    };
    let context = times(ctx_start, fc);
    let target = if spec.task.is_nvs() && fc == ft {
        context.clone()
    } else if spec.task.is_nvs() {
        // Image NVS: one target frame at the (single) context time.
        times(ctx_start, ft)
    } else {
        times(tgt_start, ft)
    };
    Timestamps { context, target }
}
