//! Camera tokens and the ways they can be fused into self-attention.
//!
//! Every layer owns a small MLP that maps patchified Plücker volumes to
//! camera tokens living on the same `(x, y, t)` grid as the video tokens.
//! [`AttentionVariant`] selects how those tokens meet the video queries and
//! keys:
//!
//! | variant | query side | key side |
//! |---|---|---|
//! | `NoRopePlucker` | `R(q, θ_xyt) + c` | `R(k, θ_xyt) + c` |
//! | `Rope3DPlucker` | `R(q + c, θ_xyt)` | `R(k + c, θ_xyt)` |
//! | `Rope2DAdditive` | `R(q, θ_xyt) + R(c, θ_xy0)` | same for `k` |
//! | `Rope2DValues` | as `Rope2DAdditive`, and `v + c` | |
//! | `Rope2DSeparateQKCat` | `[R(q, θ_xyt) ; R(c·Wq_c, θ_xy0)]` | `[R(k, θ_xyt) ; R(c·Wk_c, θ_xy0)]` |
//!
//! For the concatenated variant the per-head score splits into a video
//! term plus a camera term, and the camera term never sees `t`.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{softmax_rows_in_place, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::PluckerMap;
use crate::rope::{AxisFrequencyTable, RopeCache, TokenPos};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum AttentionVariant {
    NoRopePlucker,
    Rope3DPlucker,
    Rope2DAdditive,
    Rope2DValues,
    Rope2DSeparateQKCat,
}

impl AttentionVariant {
    /// In ablation-table order, the proposed variant last.
    pub const ALL: [AttentionVariant; 5] = [
        AttentionVariant::NoRopePlucker,
        AttentionVariant::Rope3DPlucker,
        AttentionVariant::Rope2DAdditive,
        AttentionVariant::Rope2DValues,
        AttentionVariant::Rope2DSeparateQKCat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::NoRopePlucker => "NoRopePlucker",
            AttentionVariant::Rope3DPlucker => "Rope3DPlucker",
            AttentionVariant::Rope2DAdditive => "Rope2DAdditive",
            AttentionVariant::Rope2DValues => "Rope2DValues",
            AttentionVariant::Rope2DSeparateQKCat => "Rope2DSeparateQKCat",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            AttentionVariant::NoRopePlucker => "No RoPE applied to Plucker",
            AttentionVariant::Rope3DPlucker => "Apply 3D RoPE to Plucker",
            AttentionVariant::Rope2DAdditive => "Apply 2D RoPE to Plucker",
            AttentionVariant::Rope2DValues => "+ Plucker to values",
            AttentionVariant::Rope2DSeparateQKCat => "+ Attn Cat (separate camera QK)",
        }
    }

    /// Whether the camera tokens get their own query/key projections.
    pub fn has_camera_qk(self) -> bool {
        self == AttentionVariant::Rope2DSeparateQKCat
    }

    /// Whether camera tokens are summed into the video channels, which
    /// requires matching widths.
    pub fn is_additive(self) -> bool {
        !self.has_camera_qk()
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown attention variant `{s}`")))
    }
}

/// Camera tokens for one layer on a `(frames, rows, cols)` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraTokens {
    /// `N x d_c`, rows ordered frame-major then `y`, then `x`.
    pub tokens: Matrix,
    pub grid: (usize, usize, usize),
    pub layer_index: usize,
}

impl CameraTokens {
    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// Two-layer MLP `SiLU(x·W1 + b1)·W2 + b2` over flattened Plücker patches.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraEncoder {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl CameraEncoder {
    /// Hidden width is twice the input width. With `zero_output` the last
    /// layer starts at zero so the encoder initially emits zero tokens.
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        zero_output: bool,
        rng: &mut R,
    ) -> Self {
        let hidden = 2 * input;
        let w2 = if zero_output {
            Matrix::zeros(hidden, output)
        } else {
            Matrix::randn(hidden, output, 1.0 / (hidden as f64).sqrt(), rng)
        };
        Self {
            w1: Matrix::randn(input, hidden, 1.0 / (input as f64).sqrt(), rng),
            b1: Matrix::zeros(1, hidden),
            w2,
            b2: Matrix::zeros(1, output),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_width(&self) -> usize {
        self.w2.cols()
    }

    pub fn to_tape(&self, tape: &mut Tape) -> CameraEncoderVars {
        CameraEncoderVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }
}

/// Encoder weights already placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CameraEncoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl CameraEncoderVars {
    pub fn apply(&self, tape: &mut Tape, patches: Var) -> Var {
        let h = tape.matmul(patches, self.w1);
        let h = tape.add_row(h, self.b1);
        let h = tape.silu(h);
        let o = tape.matmul(h, self.w2);
        tape.add_row(o, self.b2)
    }
}

/// Flattens a time-ordered sequence of ray maps (one view) into patch
/// volumes of `p_t` frames by `p_s x p_s` pixels. Rows are ordered by
/// latent frame, then patch row, then patch column; each row lists its
/// `6 * p_t * p_s²` values channel-major, then by frame, row and column
/// inside the patch.
pub fn plucker_patches(
    maps: &[PluckerMap],
    p_t: usize,
    p_s: usize,
) -> Result<(Matrix, (usize, usize, usize))> {
    if p_t == 0 || p_s == 0 {
        return Err(Error::shape("patch sizes must be positive"));
    }
    let Some(first) = maps.first() else {
        return Ok((Matrix::zeros(0, 6 * p_t * p_s * p_s), (0, 0, 0)));
    };
    let (w, h) = (first.width, first.height);
    if maps.iter().any(|m| (m.width, m.height) != (w, h)) {
        return Err(Error::shape("ray maps differ in size"));
    }
    if w % p_s != 0 || h % p_s != 0 {
        return Err(Error::shape(format!(
            "ray map {w}x{h} not divisible by spatial patch {p_s}"
        )));
    }
    if maps.len() % p_t != 0 {
        return Err(Error::shape(format!(
            "{} frames not divisible by temporal patch {p_t}",
            maps.len()
        )));
    }
    let (gt, gh, gw) = (maps.len() / p_t, h / p_s, w / p_s);
    let feat = 6 * p_t * p_s * p_s;
    let mut out = Matrix::zeros(gt * gh * gw, feat);
    for t in 0..gt {
        for gy in 0..gh {
            for gx in 0..gw {
                let row = out.row_mut((t * gh + gy) * gw + gx);
                let mut f = 0;
                for c in 0..6 {
                    for dt in 0..p_t {
                        let map = &maps[t * p_t + dt];
                        for dy in 0..p_s {
                            for dx in 0..p_s {
                                row[f] = map.at(c, gy * p_s + dy, gx * p_s + dx);
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

/// Patchifies the ray maps and runs one layer's camera encoder.
pub fn encode_camera_tokens(
    maps: &[PluckerMap],
    compression: (usize, usize),
    encoder: &CameraEncoder,
    layer_index: usize,
) -> Result<CameraTokens> {
    let (patches, grid) = plucker_patches(maps, compression.0, compression.1)?;
    if patches.cols() != encoder.input_width() {
        return Err(Error::shape(format!(
            "camera encoder expects {} inputs, patches have {}",
            encoder.input_width(),
            patches.cols()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(patches);
    let vars = encoder.to_tape(&mut tape);
    let out = vars.apply(&mut tape, x);
    Ok(CameraTokens {
        tokens: tape.value(out).clone(),
        grid,
        layer_index,
    })
}

/// Camera query/key projection weights (`d_c x d_c`, optional biases).
#[derive(Clone, Debug, PartialEq)]
pub struct CameraQkProjection {
    pub wq: Matrix,
    pub wk: Matrix,
    pub bq: Option<Matrix>,
    pub bk: Option<Matrix>,
}

impl CameraQkProjection {
    pub fn identity(width: usize) -> Self {
        Self {
            wq: Matrix::identity(width),
            wk: Matrix::identity(width),
            bq: None,
            bk: None,
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            wq: Matrix::zeros(width, width),
            wk: Matrix::zeros(width, width),
            bq: None,
            bk: None,
        }
    }

    pub fn random<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        Self {
            wq: Matrix::randn(width, width, std, rng),
            wk: Matrix::randn(width, width, std, rng),
            bq: None,
            bk: None,
        }
    }

    pub fn to_tape(&self, tape: &mut Tape) -> CameraQkVars {
        CameraQkVars {
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            bq: self.bq.as_ref().map(|b| tape.leaf(b.clone())),
            bk: self.bk.as_ref().map(|b| tape.leaf(b.clone())),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CameraQkVars {
    pub wq: Var,
    pub wk: Var,
    pub bq: Option<Var>,
    pub bk: Option<Var>,
}

/// Tape form of the camera query/key projection followed by the spatial
/// rotation.
pub fn camera_qk_tape(
    tape: &mut Tape,
    cam: Var,
    proj: &CameraQkVars,
    spatial: &Rc<RopeCache>,
) -> (Var, Var) {
    let mut q = tape.matmul(cam, proj.wq);
    if let Some(b) = proj.bq {
        q = tape.add_row(q, b);
    }
    let mut k = tape.matmul(cam, proj.wk);
    if let Some(b) = proj.bk {
        k = tape.add_row(k, b);
    }
    (tape.rope(q, spatial.clone()), tape.rope(k, spatial.clone()))
}

/// Projects camera tokens to rotated camera queries and keys.
pub fn camera_qk(
    tokens: &CameraTokens,
    projection: &CameraQkProjection,
    positions: &[TokenPos],
    table: &AxisFrequencyTable,
) -> Result<(Matrix, Matrix)> {
    let d_c = tokens.width();
    if projection.wq.shape() != (d_c, d_c) || projection.wk.shape() != (d_c, d_c) {
        return Err(Error::shape(format!(
            "camera projections must be {d_c}x{d_c}"
        )));
    }
    if positions.len() != tokens.len() {
        return Err(Error::shape("one position per camera token required"));
    }
    if d_c % table.dim() != 0 {
        return Err(Error::shape(format!(
            "camera width {d_c} is not a whole number of {}-wide heads",
            table.dim()
        )));
    }
    let spatial = Rc::new(RopeCache::new(positions, table, false));
    let mut tape = Tape::new();
    let cam = tape.leaf(tokens.tokens.clone());
    let proj = projection.to_tape(&mut tape);
    let (q, k) = camera_qk_tape(&mut tape, cam, &proj, &spatial);
    Ok((tape.value(q).clone(), tape.value(k).clone()))
}

/// Softmax temperature selection.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    /// `1/√(key width)`: the video head width, or the concatenated
    /// video+camera head width for the concatenated variant.
    Auto,
    Fixed(f64),
}

impl Default for ScoreScale {
    fn default() -> Self {
        ScoreScale::Auto
    }
}

/// Everything one attention call needs, already on a tape. `q`, `k`, `v`
/// are the projected (unrotated) video queries, keys and values.
#[derive(Clone)]
pub struct FusionInputs {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub camera: Option<Var>,
    pub camera_qk: Option<CameraQkVars>,
    pub rope_video: Rc<RopeCache>,
    pub rope_spatial: Rc<RopeCache>,
    pub heads: usize,
}

/// Fused per-head queries, keys and values plus the softmax scale.
pub struct Fused {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub scale: f64,
}

/// Builds the fused attention operands for `variant`.
pub fn fuse(
    tape: &mut Tape,
    variant: AttentionVariant,
    inputs: &FusionInputs,
    scale: ScoreScale,
) -> Result<Fused> {
    let heads = inputs.heads;
    let d = tape.value(inputs.q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let qz = tape.rope(inputs.q, inputs.rope_video.clone());
    let kz = tape.rope(inputs.k, inputs.rope_video.clone());
    let mut v = inputs.v;
    let Some(cam) = inputs.camera else {
        return Ok(Fused {
            q: qz,
            k: kz,
            v,
            scale: resolve_scale(scale, dh),
        });
    };
    let d_c = tape.value(cam).cols();
    if tape.value(cam).rows() != tape.value(inputs.q).rows() {
        return Err(Error::shape("camera tokens and video tokens differ in count"));
    }
    if variant.is_additive() && d_c != d {
        return Err(Error::shape(format!(
            "{variant} adds camera tokens to video channels; widths {d_c} and {d} differ"
        )));
    }
    let (q, k) = match variant {
        AttentionVariant::NoRopePlucker => (tape.add(qz, cam), tape.add(kz, cam)),
        AttentionVariant::Rope3DPlucker => {
            let c = tape.rope(cam, inputs.rope_video.clone());
            (tape.add(qz, c), tape.add(kz, c))
        }
        AttentionVariant::Rope2DAdditive | AttentionVariant::Rope2DValues => {
            let c = tape.rope(cam, inputs.rope_spatial.clone());
            if variant == AttentionVariant::Rope2DValues {
                v = tape.add(v, cam);
            }
            (tape.add(qz, c), tape.add(kz, c))
        }
        AttentionVariant::Rope2DSeparateQKCat => {
            if d_c % heads != 0 {
                return Err(Error::shape(format!(
                    "camera width {d_c} not divisible by {heads} heads"
                )));
            }
            let proj = inputs
                .camera_qk
                .ok_or_else(|| Error::shape("concatenated variant needs camera QK projections"))?;
            let (qc, kc) = camera_qk_tape(tape, cam, &proj, &inputs.rope_spatial);
            let q = tape.head_concat(qz, qc, heads);
            let k = tape.head_concat(kz, kc, heads);
            return Ok(Fused {
                q,
                k,
                v,
                scale: resolve_scale(scale, dh + d_c / heads),
            });
        }
    };
    Ok(Fused {
        q,
        k,
        v,
        scale: resolve_scale(scale, dh),
    })
}

fn resolve_scale(scale: ScoreScale, key_width: usize) -> f64 {
    match scale {
        ScoreScale::Auto => 1.0 / (key_width as f64).sqrt(),
        ScoreScale::Fixed(s) => s,
    }
}

/// Tape form of fused attention: returns the `N x d` aggregated values.
pub fn attention_forward_tape(
    tape: &mut Tape,
    variant: AttentionVariant,
    inputs: &FusionInputs,
    scale: ScoreScale,
) -> Result<Var> {
    let fused = fuse(tape, variant, inputs, scale)?;
    Ok(tape.attention(fused.q, fused.k, fused.v, inputs.heads, fused.scale))
}

/// Plain-matrix inputs for the standalone scoring and forward functions.
#[derive(Clone, Debug)]
pub struct AttentionProblem<'a> {
    pub q: &'a Matrix,
    pub k: &'a Matrix,
    pub v: &'a Matrix,
    pub camera: Option<&'a CameraTokens>,
    pub camera_qk: Option<&'a CameraQkProjection>,
    pub positions: &'a [TokenPos],
    pub table: &'a AxisFrequencyTable,
    pub heads: usize,
}

impl AttentionProblem<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        for (name, m) in [("q", self.q), ("k", self.k), ("v", self.v)] {
            if m.rows() != n {
                return Err(Error::shape(format!(
                    "{name} has {} rows for {n} positions",
                    m.rows()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Numerical(format!("non-finite entries in {name}")));
            }
        }
        if self.q.cols() != self.k.cols() {
            return Err(Error::shape("q and k widths differ"));
        }
        if self.heads == 0 || self.q.cols() % self.heads != 0 {
            return Err(Error::shape("width not divisible by head count"));
        }
        if self.q.cols() / self.heads != self.table.dim() {
            return Err(Error::shape(format!(
                "head width {} does not match rotary width {}",
                self.q.cols() / self.heads,
                self.table.dim()
            )));
        }
        if let Some(c) = self.camera {
            if c.len() != n {
                return Err(Error::shape("camera token count differs from video tokens"));
            }
            if !c.tokens.is_finite() {
                return Err(Error::Numerical("non-finite camera tokens".into()));
            }
            if c.width() % self.heads != 0 || (c.width() / self.heads) % 2 != 0 {
                return Err(Error::shape(format!(
                    "camera width {} must split into even per-head widths",
                    c.width()
                )));
            }
        }
        Ok(())
    }

    fn spatial_cache(&self) -> Result<Rc<RopeCache>> {
        let width = self.camera.map_or(self.table.dim(), |c| c.width() / self.heads);
        let table = camera_table(self.table, width)?;
        Ok(Rc::new(RopeCache::new(self.positions, &table, false)))
    }

    fn build(&self, tape: &mut Tape) -> Result<FusionInputs> {
        let rope_video = Rc::new(RopeCache::new(self.positions, self.table, true));
        let rope_spatial = self.spatial_cache()?;
        Ok(FusionInputs {
            q: tape.leaf(self.q.clone()),
            k: tape.leaf(self.k.clone()),
            v: tape.leaf(self.v.clone()),
            camera: self.camera.map(|c| tape.leaf(c.tokens.clone())),
            camera_qk: self.camera_qk.map(|p| p.to_tape(tape)),
            rope_video,
            rope_spatial,
            heads: self.heads,
        })
    }
}

/// Rotary table for camera heads of `width` channels: the video table when
/// widths agree, otherwise a fresh table with the same base and the default
/// split.
pub fn camera_table(video: &AxisFrequencyTable, width: usize) -> Result<AxisFrequencyTable> {
    if width == video.dim() {
        Ok(video.clone())
    } else {
        AxisFrequencyTable::new(
            width,
            video.base(),
            crate::rope::AxisLayout::default_split(width / 2),
        )
    }
}

/// Raw (unscaled) per-head scores `A[m][n]`, one `N x N` matrix per head.
pub fn attention_scores(
    variant: AttentionVariant,
    problem: &AttentionProblem<'_>,
) -> Result<Vec<Matrix>> {
    problem.validate()?;
    let mut tape = Tape::new();
    let inputs = problem.build(&mut tape)?;
    let fused = fuse(&mut tape, variant, &inputs, ScoreScale::Fixed(1.0))?;
    Ok(per_head_scores(
        tape.value(fused.q),
        tape.value(fused.k),
        problem.heads,
    ))
}

/// The camera-only part of the score, `⟨ĉ_m, ĉ_n⟩`, where `ĉ` is whatever
/// the variant adds or concatenates on the query/key side.
pub fn camera_score_term(
    variant: AttentionVariant,
    problem: &AttentionProblem<'_>,
) -> Result<Vec<Matrix>> {
    problem.validate()?;
    let camera = problem
        .camera
        .ok_or_else(|| Error::shape("camera score term needs camera tokens"))?;
    let rope_video = RopeCache::new(problem.positions, problem.table, true);
    let rope_spatial = problem.spatial_cache()?;
    let c = &camera.tokens;
    let (qc, kc) = match variant {
        AttentionVariant::NoRopePlucker => (c.clone(), c.clone()),
        AttentionVariant::Rope3DPlucker => {
            let r = crate::rope::rotate_rows(c, &rope_video, false);
            (r.clone(), r)
        }
        AttentionVariant::Rope2DAdditive | AttentionVariant::Rope2DValues => {
            let r = crate::rope::rotate_rows(c, &rope_spatial, false);
            (r.clone(), r)
        }
        AttentionVariant::Rope2DSeparateQKCat => {
            let proj = problem
                .camera_qk
                .ok_or_else(|| Error::shape("concatenated variant needs camera QK projections"))?;
            let mut tape = Tape::new();
            let cam = tape.leaf(c.clone());
            let vars = proj.to_tape(&mut tape);
            let (q, k) = camera_qk_tape(&mut tape, cam, &vars, &rope_spatial);
            (tape.value(q).clone(), tape.value(k).clone())
        }
    };
    Ok(per_head_scores(&qc, &kc, problem.heads))
}

fn per_head_scores(q: &Matrix, k: &Matrix, heads: usize) -> Vec<Matrix> {
    let w = q.cols() / heads;
    (0..heads)
        .map(|h| {
            let mut s = Matrix::zeros(q.rows(), k.rows());
            crate::tensor::gemm(
                crate::tensor::View::cols_of(q, h * w, w),
                crate::tensor::View::cols_of(k, h * w, w).t(),
                s.data_mut(),
                k.rows(),
                0.0,
            );
            s
        })
        .collect()
}

/// Softmax attention with camera fusion; returns the `N x d` output.
pub fn attention_forward(
    variant: AttentionVariant,
    problem: &AttentionProblem<'_>,
    scale: ScoreScale,
) -> Result<Matrix> {
    problem.validate()?;
    let mut tape = Tape::new();
    let inputs = problem.build(&mut tape)?;
    let out = attention_forward_tape(&mut tape, variant, &inputs, scale)?;
    let out = tape.value(out).clone();
    if !out.is_finite() {
        return Err(Error::Numerical("attention produced non-finite output".into()));
    }
    Ok(out)
}

/// Row-wise softmax of already-scaled scores.
pub fn softmax_rows(scores: &Matrix) -> Matrix {
    let mut p = scores.clone();
    softmax_rows_in_place(&mut p, 1.0);
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_positions(frames: usize, rows: usize, cols: usize) -> Vec<TokenPos> {
        let mut out = Vec::new();
        for t in 0..frames {
            for y in 0..rows {
                for x in 0..cols {
                    out.push(TokenPos::new(x, y, t));
                }
            }
        }
        out
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AttentionVariant::ALL {
            assert_eq!(v.name().parse::<AttentionVariant>().unwrap(), v);
        }
        assert!("PRoPE".parse::<AttentionVariant>().is_err());
    }

    #[test]
    fn patch_flatten_order() {
        // Two 2x2 frames, one 2x2x2 patch: value encodes (c, frame, v, u).
        let maps: Vec<PluckerMap> = (0..2)
            .map(|f| {
                let mut data = vec![0.0; 6 * 4];
                for c in 0..6 {
                    for v in 0..2 {
                        for u in 0..2 {
                            data[(c * 2 + v) * 2 + u] =
                                (1000 * c + 100 * f + 10 * v + u) as f64;
                        }
                    }
                }
                PluckerMap {
                    width: 2,
                    height: 2,
                    data,
                }
            })
            .collect();
        let (patches, grid) = plucker_patches(&maps, 2, 2).unwrap();
        assert_eq!(grid, (1, 1, 1));
        assert_eq!(patches.shape(), (1, 48));
        let mut i = 0;
        for c in 0..6 {
            for f in 0..2 {
                for v in 0..2 {
                    for u in 0..2 {
                        assert_eq!(patches.get(0, i), (1000 * c + 100 * f + 10 * v + u) as f64);
                        i += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn indivisible_maps_are_rejected() {
        let map = PluckerMap {
            width: 3,
            height: 2,
            data: vec![0.0; 36],
        };
        assert!(matches!(
            plucker_patches(std::slice::from_ref(&map), 1, 2),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            plucker_patches(&[map.clone(), map.clone(), map], 2, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn additive_variants_need_matching_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = AxisFrequencyTable::with_default_split(4).unwrap();
        let pos = grid_positions(1, 1, 3);
        let q = Matrix::randn(3, 8, 1.0, &mut rng);
        let cam = CameraTokens {
            tokens: Matrix::randn(3, 4, 1.0, &mut rng),
            grid: (1, 1, 3),
            layer_index: 0,
        };
        let proj = CameraQkProjection::identity(4);
        let problem = AttentionProblem {
            q: &q,
            k: &q,
            v: &q,
            camera: Some(&cam),
            camera_qk: Some(&proj),
            positions: &pos,
            table: &table,
            heads: 2,
        };
        assert!(matches!(
            attention_scores(AttentionVariant::Rope2DAdditive, &problem),
            Err(Error::Shape(_))
        ));
        assert!(attention_scores(AttentionVariant::Rope2DSeparateQKCat, &problem).is_ok());
    }

    #[test]
    fn non_finite_inputs_are_numerical_errors() {
        let table = AxisFrequencyTable::with_default_split(4).unwrap();
        let pos = grid_positions(1, 1, 2);
        let mut q = Matrix::zeros(2, 4);
        q.set(1, 1, f64::NAN);
        let problem = AttentionProblem {
            q: &q,
            k: &q,
            v: &q,
            camera: None,
            camera_qk: None,
            positions: &pos,
            table: &table,
            heads: 1,
        };
        assert!(matches!(
            attention_forward(AttentionVariant::Rope2DSeparateQKCat, &problem, ScoreScale::Auto),
            Err(Error::Numerical(_))
        ));
    }
}
