//! Axis-factored rotary positional embeddings.
//!
//! A `d`-wide vector is viewed as `J = d/2` interleaved channel pairs
//! `(u[2j], u[2j+1])`. Each pair is rotated by a phase that is a linear
//! function of the integer token position `(x, y, t)`:
//!
//! ```text
//! phi_j(p) = x * w_x[j] + y * w_y[j] + t * w_t[j]
//! ```
//!
//! How the per-axis frequency vectors are laid out is set by [`AxisLayout`].
//! Camera tokens use the same tables with `t` pinned to zero, so their
//! rotation only ever depends on the spatial site.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Default frequency base.
pub const ROPE_BASE: f64 = 10_000.0;

/// Integer position of a token on the spatio-temporal grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenPos {
    pub x: usize,
    pub y: usize,
    pub t: usize,
}

impl TokenPos {
    pub const fn new(x: usize, y: usize, t: usize) -> Self {
        Self { x, y, t }
    }

    /// Same spatial site with the temporal index pinned to zero.
    pub const fn spatial(self) -> Self {
        Self { t: 0, ..self }
    }
}

/// How channel pairs are shared between the three axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AxisLayout {
    /// Pairs are partitioned into contiguous blocks `[x | y | t]`; each block
    /// runs its own geometric frequency ladder.
    Disjoint { x: usize, y: usize, t: usize },
    /// Every pair receives a contribution from every axis with the same
    /// ladder `B^(-2j/d)`.
    Additive,
}

impl AxisLayout {
    /// Disjoint split for `pairs` channel pairs: the temporal block gets
    /// `pairs / 4` rounded to the nearest even count (at least one pair), the
    /// spatial axes share the remainder with any odd pair going to `x`.
    pub fn default_split(pairs: usize) -> Self {
        if pairs == 0 {
            return AxisLayout::Disjoint { x: 0, y: 0, t: 0 };
        }
        let quarter = pairs as f64 / 4.0;
        let mut t = 2 * (quarter / 2.0).round() as usize;
        t = t.clamp(1, pairs);
        let rest = pairs - t;
        let y = rest / 2;
        let x = rest - y;
        AxisLayout::Disjoint { x, y, t }
    }
}

/// Per-axis frequency vectors for one head width.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisFrequencyTable {
    dim: usize,
    base: f64,
    layout: AxisLayout,
    omega: [Vec<f64>; 3],
}

impl AxisFrequencyTable {
    /// Builds the table for vectors of width `dim` (must be even).
    pub fn new(dim: usize, base: f64, layout: AxisLayout) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::InvalidDimension(format!(
                "rotary width must be even, got {dim}"
            )));
        }
        if !(base.is_finite() && base > 1.0) {
            return Err(Error::InvalidDimension(format!(
                "rotary base must be > 1, got {base}"
            )));
        }
        let pairs = dim / 2;
        let mut omega = [vec![0.0; pairs], vec![0.0; pairs], vec![0.0; pairs]];
        match layout {
            AxisLayout::Disjoint { x, y, t } => {
                if x + y + t != pairs {
                    return Err(Error::InvalidDimension(format!(
                        "axis split {x}+{y}+{t} does not cover {pairs} pairs"
                    )));
                }
                let mut start = 0;
                for (axis, count) in [x, y, t].into_iter().enumerate() {
                    let width = 2 * count;
                    for local in 0..count {
                        omega[axis][start + local] =
                            base.powf(-2.0 * local as f64 / width as f64);
                    }
                    start += count;
                }
            }
            AxisLayout::Additive => {
                for row in &mut omega {
                    for (j, w) in row.iter_mut().enumerate() {
                        *w = base.powf(-2.0 * j as f64 / dim as f64);
                    }
                }
            }
        }
        Ok(Self {
            dim,
            base,
            layout,
            omega,
        })
    }

    /// Disjoint blocks with [`AxisLayout::default_split`] and base 10 000.
    pub fn with_default_split(dim: usize) -> Result<Self> {
        Self::new(dim, ROPE_BASE, AxisLayout::default_split(dim / 2))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pairs(&self) -> usize {
        self.dim / 2
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn layout(&self) -> AxisLayout {
        self.layout
    }

    /// Frequencies of axis `0 = x`, `1 = y`, `2 = t` (zero for pairs the axis
    /// does not own).
    pub fn axis(&self, axis: usize) -> &[f64] {
        &self.omega[axis]
    }

    /// Channel-pair range owned by an axis under the disjoint layout; the
    /// whole range under the additive one.
    pub fn axis_pairs(&self, axis: usize) -> std::ops::Range<usize> {
        match self.layout {
            AxisLayout::Disjoint { x, y, t } => {
                let counts = [x, y, t];
                let start: usize = counts[..axis].iter().sum();
                start..start + counts[axis]
            }
            AxisLayout::Additive => 0..self.pairs(),
        }
    }
}

/// Per-pair phases for one token position.
#[derive(Clone, Debug, PartialEq)]
pub struct RopePhases {
    pub phases: Vec<f64>,
    pub source_position: TokenPos,
    pub base: f64,
}

impl RopePhases {
    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    /// Pairwise difference `other - self`, keeping `other`'s position tag.
    pub fn delta_to(&self, other: &RopePhases) -> RopePhases {
        RopePhases {
            phases: self
                .phases
                .iter()
                .zip(&other.phases)
                .map(|(a, b)| b - a)
                .collect(),
            source_position: other.source_position,
            base: self.base,
        }
    }

    /// Phase-wise sum, used to compose rotations.
    pub fn compose(&self, other: &RopePhases) -> RopePhases {
        RopePhases {
            phases: self
                .phases
                .iter()
                .zip(&other.phases)
                .map(|(a, b)| a + b)
                .collect(),
            source_position: self.source_position,
            base: self.base,
        }
    }
}

pub fn make_phases(position: TokenPos, table: &AxisFrequencyTable) -> RopePhases {
    let (x, y, t) = (
        position.x as f64,
        position.y as f64,
        position.t as f64,
    );
    let phases = (0..table.pairs())
        .map(|j| x * table.omega[0][j] + y * table.omega[1][j] + t * table.omega[2][j])
        .collect();
    RopePhases {
        phases,
        source_position: position,
        base: table.base,
    }
}

/// Rotates each interleaved channel pair of `u` by its phase.
pub fn rotate(u: &[f64], phases: &RopePhases) -> Result<Vec<f64>> {
    if u.len() != 2 * phases.len() {
        return Err(Error::InvalidDimension(format!(
            "vector of width {} cannot be rotated by {} phases",
            u.len(),
            phases.len()
        )));
    }
    let mut out = vec![0.0; u.len()];
    for (j, &phi) in phases.phases.iter().enumerate() {
        let (s, c) = phi.sin_cos();
        let (a, b) = (u[2 * j], u[2 * j + 1]);
        out[2 * j] = c * a - s * b;
        out[2 * j + 1] = s * a + c * b;
    }
    Ok(out)
}

/// Full spatio-temporal rotation for video queries and keys.
pub fn rope_video(u: &[f64], position: TokenPos, table: &AxisFrequencyTable) -> Result<Vec<f64>> {
    rotate(u, &make_phases(position, table))
}

/// Spatial-only rotation for camera tokens: the temporal index of
/// `position` is ignored.
pub fn rope_camera(
    u: &[f64],
    position: TokenPos,
    table: &AxisFrequencyTable,
) -> Result<Vec<f64>> {
    rope_video(u, position.spatial(), table)
}

/// Cosine and sine of every token's phases, laid out as `N x J` matrices
/// for the batched rotation on the autodiff tape.
#[derive(Clone, Debug)]
pub struct RopeCache {
    pub cos: Matrix,
    pub sin: Matrix,
}

impl RopeCache {
    pub fn new(positions: &[TokenPos], table: &AxisFrequencyTable, temporal: bool) -> Self {
        let pairs = table.pairs();
        let mut cos = Matrix::zeros(positions.len(), pairs);
        let mut sin = Matrix::zeros(positions.len(), pairs);
        for (i, &p) in positions.iter().enumerate() {
            let p = if temporal { p } else { p.spatial() };
            let ph = make_phases(p, table);
            for (j, &phi) in ph.phases.iter().enumerate() {
                let (s, c) = phi.sin_cos();
                cos.set(i, j, c);
                sin.set(i, j, s);
            }
        }
        Self { cos, sin }
    }

    pub fn len(&self) -> usize {
        self.cos.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.cos.rows() == 0
    }

    pub fn pairs(&self) -> usize {
        self.cos.cols()
    }
}

/// Applies the cached rotation to every head of a `N x (heads * 2J)` matrix.
/// `inverse` rotates by the negated phases.
pub fn rotate_rows(x: &Matrix, cache: &RopeCache, inverse: bool) -> Matrix {
    let pairs = cache.pairs();
    let width = 2 * pairs;
    assert_eq!(x.rows(), cache.len(), "rope cache length mismatch");
    assert!(width > 0 && x.cols() % width == 0, "rope width mismatch");
    let heads = x.cols() / width;
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let cr = cache.cos.row(i);
        let sr = cache.sin.row(i);
        let src = x.row(i);
        let dst = out.row_mut(i);
        for h in 0..heads {
            let o = h * width;
            for j in 0..pairs {
                let (c, s) = (cr[j], sign * sr[j]);
                let (a, b) = (src[o + 2 * j], src[o + 2 * j + 1]);
                dst[o + 2 * j] = c * a - s * b;
                dst[o + 2 * j + 1] = s * a + c * b;
            }
        }
    }
    out
}
