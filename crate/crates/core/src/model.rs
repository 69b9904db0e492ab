//! Desk-scale diffusion transformer over concatenated context and target
//! tokens, trained with rectified flow.
//!
//! Frames become latents by `2·rgb − 1` and tokens by `p_t x p_s x p_s`
//! patches. Each block is adaLN-modulated self-attention (camera fusion per
//! [`AttentionVariant`]), optional cross-attention to a conditioning vector,
//! and an MLP. Only target tokens are noised; the head's output is read off
//! target positions.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::camera_attention::{
    attention_forward_tape, camera_table, plucker_patches, AttentionVariant, CameraEncoderVars,
    CameraQkVars, FusionInputs, ScoreScale,
};
use crate::episode::{Episode, Frame};
use crate::error::{Error, Result};
use crate::geometry::{compute_plucker_map, normalize_to_reference, CameraFrame};
use crate::image::Image;
use crate::rope::{AxisFrequencyTable, AxisLayout, RopeCache, TokenPos, ROPE_BASE};
use crate::tensor::Matrix;

const LN_EPS: f64 = 1e-6;
/// Sampler divergence threshold on any latent value.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiTConfig {
    pub depth: usize,
    pub heads: usize,
    /// Token width.
    pub d: usize,
    /// Camera token width.
    pub d_c: usize,
    pub ffn_mult: usize,
    pub patch_t: usize,
    pub patch_s: usize,
    /// Rays per token side fed to the camera encoders.
    pub ray_patch: usize,
    /// Width of the optional conditioning vector; 0 disables
    /// cross-attention.
    pub cond_dim: usize,
    pub variant: AttentionVariant,
    /// Per-head rotary layout; `None` uses the default disjoint split.
    pub rope_layout: Option<AxisLayout>,
    pub rope_base: f64,
    /// Start modulation gates, camera encoder outputs and the velocity head
    /// at zero.
    pub zero_init: bool,
    /// Wrap the network in the analytic skip of [`Preconditioning`].
    pub precondition: bool,
    /// Per-value standard deviation assumed for clean latents.
    pub sigma_data: f64,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            heads: 4,
            d: 64,
            d_c: 64,
            ffn_mult: 4,
            patch_t: 1,
            patch_s: 8,
            ray_patch: 2,
            cond_dim: 0,
            variant: AttentionVariant::Rope2DSeparateQKCat,
            rope_layout: None,
            rope_base: ROPE_BASE,
            zero_init: true,
            precondition: true,
            sigma_data: 0.5,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d % self.heads != 0 || (self.d / self.heads) % 2 != 0 {
            return bad(format!("d = {} must split into {} even-width heads", self.d, self.heads));
        }
        if self.d_c % self.heads != 0 || (self.d_c / self.heads) % 2 != 0 || self.d_c == 0 {
            return bad(format!("d_c = {} must split into {} even-width heads", self.d_c, self.heads));
        }
        if self.variant.is_additive() && self.d_c != self.d {
            return bad(format!("{} needs d_c == d", self.variant));
        }
        if self.patch_t == 0 || self.patch_s == 0 || self.ray_patch == 0 || self.ffn_mult == 0 {
            return bad("patch sizes and ffn_mult must be positive".into());
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return bad("sigma_data must be positive".into());
        }
        if !(self.rope_base > 1.0) {
            return bad("rope_base must exceed 1".into());
        }
        self.rope_table()?;
        Ok(())
    }

    pub fn preconditioning(&self, tau: f64) -> Preconditioning {
        if self.precondition {
            Preconditioning::new(tau, self.sigma_data)
        } else {
            Preconditioning::IDENTITY
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn token_dim(&self) -> usize {
        Image::CHANNELS * self.patch_t * self.patch_s * self.patch_s
    }

    pub fn ray_dim(&self) -> usize {
        6 * self.patch_t * self.ray_patch * self.ray_patch
    }

    pub fn rope_table(&self) -> Result<AxisFrequencyTable> {
        let dh = self.head_dim();
        let layout = self
            .rope_layout
            .unwrap_or_else(|| AxisLayout::default_split(dh / 2));
        AxisFrequencyTable::new(dh, self.rope_base, layout)
            .map_err(|e| Error::Config(format!("rotary layout: {e}")))
    }
}

/// Input, skip and output scalings around the network `F`:
/// `v̂ = c_skip·z_τ + c_out·F(c_in·z_τ, ...)`.
///
/// With clean latents of per-value variance `σ²` and unit noise,
/// `c_skip` is the least-squares coefficient of `v = ε − z₀` on
/// `z_τ = (1 − τ)·z₀ + τ·ε`, `c_out` the standard deviation of what that
/// leaves, and `c_in` normalizes `z_τ` to unit variance. Clean context
/// latents are divided by `σ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioning {
    pub c_in: f64,
    pub c_skip: f64,
    pub c_out: f64,
    pub c_context: f64,
}

impl Preconditioning {
    pub const IDENTITY: Preconditioning = Preconditioning {
        c_in: 1.0,
        c_skip: 0.0,
        c_out: 1.0,
        c_context: 1.0,
    };

    pub fn new(tau: f64, sigma: f64) -> Self {
        let s2 = sigma * sigma;
        let var_z = (1.0 - tau).powi(2) * s2 + tau * tau;
        let cov = tau - (1.0 - tau) * s2;
        let c_skip = cov / var_z;
        let c_out = (1.0 + s2 - cov * cov / var_z).max(0.0).sqrt();
        Self {
            c_in: 1.0 / var_z.sqrt(),
            c_skip,
            c_out,
            c_context: 1.0 / sigma,
        }
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    /// Places every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape) -> Bound<'_> {
        Bound {
            store: self,
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }
}

/// Parameters as tape variables.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        self.vars[self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of every parameter, zeros where it did not contribute.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Matrix> {
        self.vars
            .iter()
            .zip(self.store.values())
            .map(|(&v, m)| grads.get_or_zeros(v, m.shape()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: DiTConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(config: DiTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, p, dc) = (config.d, config.token_dim(), config.d_c);
        let fd = d * config.ffn_mult;
        let ri = config.ray_dim();
        let mut ps = ParamStore::default();
        let lecun = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let zero_or = |rows: usize, cols: usize, rng: &mut R| {
            if config.zero_init {
                Matrix::zeros(rows, cols)
            } else {
                Matrix::randn(rows, cols, 0.5 * lecun(rows), rng)
            }
        };
        ps.push("embed.w", Matrix::randn(p, d, lecun(p), rng));
        ps.push("embed.b", Matrix::zeros(1, d));
        ps.push("role", Matrix::randn(2, d, 0.02, rng));
        ps.push("time.w1", Matrix::randn(d, d, lecun(d), rng));
        ps.push("time.b1", Matrix::zeros(1, d));
        ps.push("time.w2", Matrix::randn(d, d, lecun(d), rng));
        ps.push("time.b2", Matrix::zeros(1, d));
        for l in 0..config.depth {
            let n = |s: &str| format!("blocks.{l}.{s}");
            ps.push(n("mod.w"), zero_or(d, 6 * d, rng));
            ps.push(n("mod.b"), Matrix::zeros(1, 6 * d));
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                ps.push(n(w), Matrix::randn(d, d, lecun(d), rng));
            }
            ps.push(n("attn.bo"), Matrix::zeros(1, d));
            ps.push(n("cam.w1"), Matrix::randn(ri, 2 * ri, lecun(ri), rng));
            ps.push(n("cam.b1"), Matrix::zeros(1, 2 * ri));
            ps.push(n("cam.w2"), zero_or(2 * ri, dc, rng));
            ps.push(n("cam.b2"), Matrix::zeros(1, dc));
            if config.variant.has_camera_qk() {
                ps.push(n("camqk.wq"), Matrix::randn(dc, dc, lecun(dc), rng));
                ps.push(n("camqk.wk"), Matrix::randn(dc, dc, lecun(dc), rng));
            }
            if config.cond_dim > 0 {
                ps.push(n("cross.wc"), Matrix::randn(config.cond_dim, d, lecun(config.cond_dim), rng));
                ps.push(n("cross.null"), Matrix::randn(1, d, 0.02, rng));
                for w in ["cross.wq", "cross.wk", "cross.wv"] {
                    ps.push(n(w), Matrix::randn(d, d, lecun(d), rng));
                }
                ps.push(n("cross.wo"), zero_or(d, d, rng));
            }
            ps.push(n("ffn.w1"), Matrix::randn(d, fd, lecun(d), rng));
            ps.push(n("ffn.b1"), Matrix::zeros(1, fd));
            ps.push(n("ffn.w2"), Matrix::randn(fd, d, lecun(fd), rng));
            ps.push(n("ffn.b2"), Matrix::zeros(1, d));
        }
        ps.push("final.mod.w", zero_or(d, 2 * d, rng));
        ps.push("final.mod.b", Matrix::zeros(1, 2 * d));
        ps.push("head.w", zero_or(d, p, rng));
        ps.push("head.b", Matrix::zeros(1, p));
        Ok(Self { config, params: ps })
    }

    /// Velocity prediction for the target tokens, on a tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound<'_>,
        input: &Prepared,
        z_target: Var,
        tau: f64,
    ) -> Result<Var> {
        let cfg = &self.config;
        let d = cfg.d;
        let (nc, nt) = (input.context.rows(), input.target_count);
        if tape.value(z_target).shape() != (nt, cfg.token_dim()) {
            return Err(Error::shape(format!(
                "target latents are {:?}, expected {nt}x{}",
                tape.value(z_target).shape(),
                cfg.token_dim()
            )));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidParams(format!("diffusion time {tau} outside [0, 1]")));
        }
        let pre = cfg.preconditioning(tau);
        let z_in = tape.scale(z_target, pre.c_in);
        let x_in = if nc > 0 {
            let ctx = tape.leaf(input.context.map(|v| v * pre.c_context));
            tape.vstack(&[ctx, z_in])
        } else {
            z_in
        };
        let x = tape.matmul(x_in, bound.var("embed.w"));
        let x = tape.add_row(x, bound.var("embed.b"));
        let roles = tape.gather_rows(bound.var("role"), &input.roles);
        let mut x = tape.add(x, roles);

        let temb = tape.leaf(timestep_embedding(tau, d));
        let s = tape.matmul(temb, bound.var("time.w1"));
        let s = tape.add_row(s, bound.var("time.b1"));
        let s = tape.silu(s);
        let s = tape.matmul(s, bound.var("time.w2"));
        let s = tape.add_row(s, bound.var("time.b2"));
        let s = tape.silu(s);

        let rays = tape.leaf(input.rays.clone());
        let cond = if cfg.cond_dim > 0 {
            let c = input
                .cond
                .clone()
                .unwrap_or_else(|| vec![0.0; cfg.cond_dim]);
            if c.len() != cfg.cond_dim {
                return Err(Error::shape(format!(
                    "conditioning vector has {} values, model expects {}",
                    c.len(),
                    cfg.cond_dim
                )));
            }
            Some(tape.leaf(Matrix::row_vector(c)))
        } else {
            None
        };

        for l in 0..cfg.depth {
            let n = |s: &str| bound.var(&format!("blocks.{l}.{s}"));
            let m = tape.matmul(s, n("mod.w"));
            let m = tape.add_row(m, n("mod.b"));
            let chunk: Vec<Var> = (0..6).map(|i| tape.col_slice(m, i * d, d)).collect();

            let h = modulate(tape, x, chunk[0], chunk[1]);
            let q = tape.matmul(h, n("attn.wq"));
            let k = tape.matmul(h, n("attn.wk"));
            let v = tape.matmul(h, n("attn.wv"));
            let enc = CameraEncoderVars {
                w1: n("cam.w1"),
                b1: n("cam.b1"),
                w2: n("cam.w2"),
                b2: n("cam.b2"),
            };
            let cam = enc.apply(tape, rays);
            let camera_qk = cfg.variant.has_camera_qk().then(|| CameraQkVars {
                wq: n("camqk.wq"),
                wk: n("camqk.wk"),
                bq: None,
                bk: None,
            });
            let fusion = FusionInputs {
                q,
                k,
                v,
                camera: Some(cam),
                camera_qk,
                rope_video: input.rope_video.clone(),
                rope_spatial: input.rope_spatial.clone(),
                heads: cfg.heads,
            };
            let a = attention_forward_tape(tape, cfg.variant, &fusion, ScoreScale::Auto)?;
            let o = tape.matmul(a, n("attn.wo"));
            let o = tape.add_row(o, n("attn.bo"));
            let o = tape.mul_row(o, chunk[2]);
            x = tape.add(x, o);

            if let Some(c) = cond {
                let h = tape.layer_norm(x, LN_EPS);
                let q = tape.matmul(h, n("cross.wq"));
                let cv = tape.matmul(c, n("cross.wc"));
                let keys = tape.vstack(&[n("cross.null"), cv]);
                let k = tape.matmul(keys, n("cross.wk"));
                let v = tape.matmul(keys, n("cross.wv"));
                let a = tape.attention(q, k, v, cfg.heads, 1.0 / (cfg.head_dim() as f64).sqrt());
                let o = tape.matmul(a, n("cross.wo"));
                x = tape.add(x, o);
            }

            let h = modulate(tape, x, chunk[3], chunk[4]);
            let f = tape.matmul(h, n("ffn.w1"));
            let f = tape.add_row(f, n("ffn.b1"));
            let f = tape.silu(f);
            let f = tape.matmul(f, n("ffn.w2"));
            let f = tape.add_row(f, n("ffn.b2"));
            let f = tape.mul_row(f, chunk[5]);
            x = tape.add(x, f);
        }

        let m = tape.matmul(s, bound.var("final.mod.w"));
        let m = tape.add_row(m, bound.var("final.mod.b"));
        let shift = tape.col_slice(m, 0, d);
        let scale = tape.col_slice(m, d, d);
        let h = modulate(tape, x, shift, scale);
        let out = tape.matmul(h, bound.var("head.w"));
        let out = tape.add_row(out, bound.var("head.b"));
        let idx: Vec<usize> = (nc..nc + nt).collect();
        let out = tape.gather_rows(out, &idx);
        let out = if cfg.precondition {
            let f = tape.scale(out, pre.c_out);
            let skip = tape.scale(z_target, pre.c_skip);
            tape.add(f, skip)
        } else {
            out
        };
        if !tape.value(out).is_finite() {
            return Err(Error::Numerical("non-finite velocity prediction".into()));
        }
        Ok(out)
    }

    /// Velocity prediction outside of training.
    pub fn predict(&self, input: &Prepared, z_target: &Matrix, tau: f64) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let z = tape.leaf(z_target.clone());
        let out = self.forward(&mut tape, &bound, input, z, tau)?;
        Ok(tape.value(out).clone())
    }

    /// Builds the token sequence for `request`.
    pub fn prepare(&self, request: &Request) -> Result<Prepared> {
        prepare(&self.config, request)
    }

    /// Generates target latents by Euler integration from pure noise.
    pub fn sample<R: Rng + ?Sized>(&self, input: &Prepared, steps: usize, rng: &mut R) -> Result<Matrix> {
        self.sample_observed(input, steps, rng, |_, _, _| {})
    }

    /// As [`Model::sample`], calling `observe(step, context, target)` with
    /// the model inputs before every velocity evaluation.
    pub fn sample_observed<R: Rng + ?Sized>(
        &self,
        input: &Prepared,
        steps: usize,
        rng: &mut R,
        mut observe: impl FnMut(usize, &Matrix, &Matrix),
    ) -> Result<Matrix> {
        let z1 = Matrix::randn(input.target_count, self.config.token_dim(), 1.0, rng);
        let mut step = 0;
        euler_integrate(z1, steps, |z, tau| {
            observe(step, &input.context, z);
            step += 1;
            self.predict(input, z, tau)
        })
    }
}

/// `LN(x)·(1 + scale) + shift` with row-vector shift and scale.
fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Var {
    let h = tape.layer_norm(x, LN_EPS);
    let sc = tape.add_scalar(scale, 1.0);
    let h = tape.mul_row(h, sc);
    tape.add_row(h, shift)
}

/// Sinusoidal embedding of `tau` (scaled by 1000) into `dim` channels:
/// cosines then sines.
pub fn timestep_embedding(tau: f64, dim: usize) -> Matrix {
    let half = dim / 2;
    let mut out = Matrix::zeros(1, dim);
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = 1000.0 * tau * f;
        out.set(0, i, a.cos());
        out.set(0, half + i, a.sin());
    }
    out
}

/// Integrates `dz/dτ = v(z, τ)` from τ = 1 down to τ = 0 in `steps`
/// uniform Euler steps: `z ← z − Δτ·v(z, τ)`.
pub fn euler_integrate(
    z1: Matrix,
    steps: usize,
    mut velocity: impl FnMut(&Matrix, f64) -> Result<Matrix>,
) -> Result<Matrix> {
    if steps == 0 {
        return Err(Error::InvalidParams("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z1;
    for i in 0..steps {
        let tau = 1.0 - i as f64 * dt;
        let v = velocity(&z, tau)?;
        if v.shape() != z.shape() {
            return Err(Error::shape("velocity shape differs from state"));
        }
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi -= dt * vi;
        }
        if z.data().iter().any(|x| !x.is_finite() || x.abs() > DIVERGENCE_LIMIT) {
            return Err(Error::Numerical(format!(
                "sampler diverged at step {} of {steps}",
                i + 1
            )));
        }
    }
    Ok(z)
}

/// `z_τ = (1 − τ)·z₀ + τ·ε`.
pub fn interpolate(z0: &Matrix, eps: &Matrix, tau: f64) -> Matrix {
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(a, e)| (1.0 - tau) * a + tau * e)
        .collect();
    Matrix::from_vec(z0.rows(), z0.cols(), data)
}

/// `v* = ε − z₀`.
pub fn velocity_target(z0: &Matrix, eps: &Matrix) -> Matrix {
    let data = eps.data().iter().zip(z0.data()).map(|(e, a)| e - a).collect();
    Matrix::from_vec(z0.rows(), z0.cols(), data)
}

/// One training example: prepared tokens plus the noise and time draw.
pub struct FlowSample<'a> {
    pub input: &'a Prepared,
    pub eps: Matrix,
    pub tau: f64,
}

impl<'a> FlowSample<'a> {
    /// Draws `ε ~ N(0, I)` and `τ ~ U(0, 1)`.
    pub fn draw<R: Rng + ?Sized>(input: &'a Prepared, token_dim: usize, rng: &mut R) -> Self {
        Self::draw_with(input, token_dim, TauSampling::Uniform, rng)
    }

    pub fn draw_with<R: Rng + ?Sized>(
        input: &'a Prepared,
        token_dim: usize,
        schedule: TauSampling,
        rng: &mut R,
    ) -> Self {
        let eps = Matrix::randn(input.target_count, token_dim, 1.0, rng);
        let tau = schedule.sample(rng);
        Self { input, eps, tau }
    }
}

/// Distribution of the diffusion time during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TauSampling {
    #[default]
    Uniform,
    /// `τ = sigmoid(mean + std·n)`, `n ~ N(0, 1)`.
    LogitNormal { mean: f64, std: f64 },
}

impl TauSampling {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TauSampling::Uniform => Ok(()),
            TauSampling::LogitNormal { mean, std } if mean.is_finite() && std.is_finite() && std >= 0.0 => Ok(()),
            TauSampling::LogitNormal { .. } => {
                Err(Error::Config("logit-normal τ needs a finite mean and std >= 0".into()))
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            TauSampling::Uniform => rng.random::<f64>(),
            TauSampling::LogitNormal { mean, std } => {
                let n: f64 = rng.sample(rand_distr::StandardNormal);
                1.0 / (1.0 + (-(mean + std * n)).exp())
            }
        }
    }
}

/// Mean over samples of the per-sample velocity MSE, on a tape.
pub fn flow_loss_tape(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound<'_>,
    samples: &[FlowSample<'_>],
) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut total: Option<Var> = None;
    for s in samples {
        let z0 = s
            .input
            .target
            .as_ref()
            .ok_or_else(|| Error::shape("training needs clean target latents"))?;
        let zt = tape.leaf(interpolate(z0, &s.eps, s.tau));
        let out = model.forward(tape, bound, s.input, zt, s.tau)?;
        let l = tape.mse(out, Rc::new(velocity_target(z0, &s.eps)));
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l),
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / samples.len() as f64))
}

/// Loss value and per-parameter gradients for a batch.
pub fn loss_and_gradients(model: &Model, samples: &[FlowSample<'_>]) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let loss = flow_loss_tape(model, &mut tape, &bound, samples)?;
    let value = tape.value(loss).get(0, 0);
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }
    let grads = tape.backward(loss);
    Ok((value, bound.gradients(&grads)))
}

/// Rectified-flow loss of one prepared example with fresh noise and time.
pub fn rectified_flow_loss<R: Rng + ?Sized>(model: &Model, input: &Prepared, rng: &mut R) -> Result<f64> {
    let s = FlowSample::draw(input, model.config.token_dim(), rng);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let l = flow_loss_tape(model, &mut tape, &bound, &[s])?;
    Ok(tape.value(l).get(0, 0))
}

/// Cuts each frame sequence of one view into `p_t x p_s x p_s` patches.
/// Rows run over latent frame, patch row, patch column; each row holds the
/// patch channel-major, then by frame, row and column.
pub fn patchify(frames: &[Image], p_t: usize, p_s: usize) -> Result<(Matrix, (usize, usize, usize))> {
    if p_t == 0 || p_s == 0 {
        return Err(Error::shape("patch sizes must be positive"));
    }
    let c = Image::CHANNELS;
    let Some(first) = frames.first() else {
        return Ok((Matrix::zeros(0, c * p_t * p_s * p_s), (0, 0, 0)));
    };
    let (w, h) = (first.width, first.height);
    if frames.iter().any(|f| (f.width, f.height) != (w, h)) {
        return Err(Error::shape("frames differ in size"));
    }
    if w % p_s != 0 || h % p_s != 0 || frames.len() % p_t != 0 {
        return Err(Error::shape(format!(
            "{} frames of {w}x{h} do not divide into {p_t}x{p_s}x{p_s} patches",
            frames.len()
        )));
    }
    let (gt, gh, gw) = (frames.len() / p_t, h / p_s, w / p_s);
    let mut out = Matrix::zeros(gt * gh * gw, c * p_t * p_s * p_s);
    for t in 0..gt {
        for gy in 0..gh {
            for gx in 0..gw {
                let row = out.row_mut((t * gh + gy) * gw + gx);
                let mut f = 0;
                for ch in 0..c {
                    for dt in 0..p_t {
                        let img = &frames[t * p_t + dt];
                        for dy in 0..p_s {
                            for dx in 0..p_s {
                                row[f] = img.at(ch, gy * p_s + dy, gx * p_s + dx);
                                f += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, (gt, gh, gw)))
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Matrix, grid: (usize, usize, usize), p_t: usize, p_s: usize) -> Result<Vec<Image>> {
    let (gt, gh, gw) = grid;
    let c = Image::CHANNELS;
    if tokens.shape() != (gt * gh * gw, c * p_t * p_s * p_s) {
        return Err(Error::shape(format!(
            "{:?} tokens do not match grid {grid:?} with {p_t}x{p_s}x{p_s} patches",
            tokens.shape()
        )));
    }
    let mut frames = vec![Image::filled(gw * p_s, gh * p_s, [0.0; 3]); gt * p_t];
    for t in 0..gt {
        for gy in 0..gh {
            for gx in 0..gw {
                let row = tokens.row((t * gh + gy) * gw + gx);
                let mut f = 0;
                for ch in 0..c {
                    for dt in 0..p_t {
                        for dy in 0..p_s {
                            for dx in 0..p_s {
                                frames[t * p_t + dt].set(ch, gy * p_s + dy, gx * p_s + dx, row[f]);
                                f += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(frames)
}

pub fn image_to_latent(img: &Image) -> Image {
    Image {
        data: img.data.iter().map(|v| 2.0 * v - 1.0).collect(),
        ..img.clone()
    }
}

/// Maps latents back to `[0, 1]` images (clamped).
pub fn latent_to_image(lat: &Image) -> Image {
    Image {
        data: lat.data.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect(),
        ..lat.clone()
    }
}

/// What the model sees: context frames with cameras, target cameras, and
/// optionally target frames (for training and evaluation).
#[derive(Clone, Debug)]
pub struct Request {
    pub context: Vec<Frame>,
    /// `(view, camera)` per target frame, view-major in time order.
    pub target_cameras: Vec<(usize, CameraFrame)>,
    pub target_images: Option<Vec<Image>>,
    pub fps: f64,
    pub cond: Option<Vec<f64>>,
}

impl Request {
    pub fn from_episode(ep: &Episode, with_targets: bool) -> Self {
        Self {
            context: ep.context.clone(),
            target_cameras: ep.target.iter().map(|f| (f.view, f.camera.clone())).collect(),
            target_images: with_targets.then(|| ep.target_images()),
            fps: ep.fps,
            cond: None,
        }
    }
}

/// Token sequence ready for the model.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Clean context latents, `Nc x token_dim`.
    pub context: Matrix,
    /// Clean target latents when known.
    pub target: Option<Matrix>,
    pub target_count: usize,
    pub positions: Vec<TokenPos>,
    /// 0 for context tokens, 1 for targets.
    pub roles: Vec<usize>,
    /// Patchified ray maps, one row per token.
    pub rays: Matrix,
    pub cond: Option<Vec<f64>>,
    pub rope_video: Rc<RopeCache>,
    pub rope_spatial: Rc<RopeCache>,
    /// Per target view: view id and token grid, in token order.
    pub target_grids: Vec<(usize, (usize, usize, usize))>,
}

impl Prepared {
    /// Decodes target latents into images, view-major in time order.
    pub fn decode_targets(&self, latents: &Matrix, config: &DiTConfig) -> Result<Vec<Image>> {
        let mut out = Vec::new();
        let mut row = 0;
        for (_, grid) in &self.target_grids {
            let n = grid.0 * grid.1 * grid.2;
            let idx: Vec<usize> = (row..row + n).collect();
            let toks = latents.gather_rows(&idx);
            for lat in unpatchify(&toks, *grid, config.patch_t, config.patch_s)? {
                out.push(latent_to_image(&lat));
            }
            row += n;
        }
        Ok(out)
    }
}

fn group_by_view<T: Clone>(items: &[(usize, T)]) -> Vec<(usize, Vec<T>)> {
    let mut groups: Vec<(usize, Vec<T>)> = Vec::new();
    for (v, item) in items {
        match groups.iter_mut().find(|(g, _)| g == v) {
            Some((_, list)) => list.push(item.clone()),
            None => groups.push((*v, vec![item.clone()])),
        }
    }
    groups
}

fn prepare(cfg: &DiTConfig, req: &Request) -> Result<Prepared> {
    cfg.validate()?;
    if req.target_cameras.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(req.fps > 0.0) {
        return Err(Error::InvalidParams("fps must be positive".into()));
    }
    // Poses relative to the first context camera (first target without
    // context), in one shared frame.
    let mut cams: Vec<CameraFrame> = req.context.iter().map(|f| f.camera.clone()).collect();
    cams.extend(req.target_cameras.iter().map(|(_, c)| c.clone()));
    let rel = normalize_to_reference(&cams, 0)?;
    let t_min = cams
        .iter()
        .map(|c| (c.timestamp * req.fps).round() as i64)
        .min()
        .unwrap();
    let time_index = |c: &CameraFrame| ((c.timestamp * req.fps).round() as i64 - t_min) as usize;

    let nc_frames = req.context.len();
    let ctx_items: Vec<(usize, (Image, CameraFrame, CameraFrame))> = req
        .context
        .iter()
        .zip(&rel[..nc_frames])
        .map(|(f, r)| (f.view, (image_to_latent(&f.image), f.camera.clone(), r.clone())))
        .collect();
    let tgt_images = match &req.target_images {
        Some(imgs) if imgs.len() != req.target_cameras.len() => {
            return Err(Error::shape("one target image per target camera required"))
        }
        Some(imgs) => imgs.iter().map(image_to_latent).collect(),
        None => {
            let c = &req.target_cameras[0].1;
            vec![Image::filled(c.width, c.height, [0.0; 3]); req.target_cameras.len()]
        }
    };
    let tgt_items: Vec<(usize, (Image, CameraFrame, CameraFrame))> = req
        .target_cameras
        .iter()
        .zip(&rel[nc_frames..])
        .zip(tgt_images)
        .map(|(((v, c), r), img)| (*v, (img, c.clone(), r.clone())))
        .collect();

    let mut positions = Vec::new();
    let mut roles = Vec::new();
    let mut ray_rows = Vec::new();
    let mut build = |items: &[(usize, (Image, CameraFrame, CameraFrame))],
                     role: usize|
     -> Result<(Matrix, Vec<(usize, (usize, usize, usize))>)> {
        let mut token_parts = Vec::new();
        let mut grids = Vec::new();
        for (view, frames) in group_by_view(items) {
            let imgs: Vec<Image> = frames.iter().map(|f| f.0.clone()).collect();
            let (tok, grid) = patchify(&imgs, cfg.patch_t, cfg.patch_s)?;
            let (gt, gh, gw) = grid;
            let maps = frames
                .iter()
                .map(|f| compute_plucker_map(&f.2.resized(gw * cfg.ray_patch, gh * cfg.ray_patch)))
                .collect::<Result<Vec<_>>>()?;
            let (rays, rgrid) = plucker_patches(&maps, cfg.patch_t, cfg.ray_patch)?;
            debug_assert_eq!(rgrid, grid);
            for t in 0..gt {
                let ti = time_index(&frames[t * cfg.patch_t].1) / cfg.patch_t;
                for y in 0..gh {
                    for x in 0..gw {
                        positions.push(TokenPos { x, y, t: ti });
                        roles.push(role);
                    }
                }
            }
            token_parts.push(tok);
            ray_rows.push(rays);
            grids.push((view, grid));
        }
        let refs: Vec<&Matrix> = token_parts.iter().collect();
        let toks = if refs.is_empty() {
            Matrix::zeros(0, cfg.token_dim())
        } else {
            Matrix::vstack(&refs)
        };
        Ok((toks, grids))
    };
    let (context, _) = build(&ctx_items, 0)?;
    let (target, target_grids) = build(&tgt_items, 1)?;
    let ray_refs: Vec<&Matrix> = ray_rows.iter().collect();
    let rays = Matrix::vstack(&ray_refs);
    let table = cfg.rope_table()?;
    let cam_table = camera_table(&table, cfg.d_c / cfg.heads)?;
    Ok(Prepared {
        target_count: target.rows(),
        target: req.target_images.as_ref().map(|_| target),
        context,
        rope_video: Rc::new(RopeCache::new(&positions, &table, true)),
        rope_spatial: Rc::new(RopeCache::new(&positions, &cam_table, false)),
        positions,
        roles,
        rays,
        cond: req.cond.clone(),
        target_grids,
    })
}
