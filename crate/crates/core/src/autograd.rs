//! A small reverse-mode tape over dense matrices.
//!
//! Every op records its output value and enough of its inputs to run the
//! vector-Jacobian product on the way back. The tape is rebuilt per forward
//! pass; parameters enter as leaves.

use std::rc::Rc;

use crate::rope::{rotate_rows, RopeCache};
use crate::tensor::{gemm, gemm_strided, Matrix, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Silu(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Rope { x: usize, cache: Rc<RopeCache> },
    HeadConcat { a: usize, b: usize, heads: usize },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        scale: f64,
        probs: Vec<Matrix>,
    },
    GatherRows { x: usize, idx: Vec<usize> },
    VStack(Vec<usize>),
    ColSlice { x: usize, start: usize },
    Mse { x: usize, target: Rc<Matrix> },
    Sum(usize),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data);
        self.push(out, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data);
        self.push(out, Op::Mul(a.0, b.0))
    }

    /// `a + row`, with the `1 x m` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let r = r.data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a.0, row.0))
    }

    /// `a ⊙ row`, broadcast like [`Tape::add_row`].
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "mul_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "mul_row width mismatch");
        let r = r.data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a.0, row.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a.0))
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x: a.0, inv_std })
    }

    /// Rotary rotation of every head with the cached per-row phases.
    pub fn rope(&mut self, a: Var, cache: Rc<RopeCache>) -> Var {
        let out = rotate_rows(self.value(a), &cache, false);
        self.push(out, Op::Rope { x: a.0, cache })
    }

    /// Per-head channel concatenation: head `h` of the output is
    /// `[a_h ; b_h]`.
    pub fn head_concat(&mut self, a: Var, b: Var, heads: usize) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows(), "head_concat row mismatch");
        assert!(heads > 0 && va.cols() % heads == 0 && vb.cols() % heads == 0);
        let (wa, wb) = (va.cols() / heads, vb.cols() / heads);
        let w = wa + wb;
        let mut out = Matrix::zeros(va.rows(), heads * w);
        for i in 0..va.rows() {
            let (ra, rb) = (va.row(i), vb.row(i));
            let ro = out.row_mut(i);
            for h in 0..heads {
                ro[h * w..h * w + wa].copy_from_slice(&ra[h * wa..(h + 1) * wa]);
                ro[h * w + wa..(h + 1) * w].copy_from_slice(&rb[h * wb..(h + 1) * wb]);
            }
        }
        self.push(out, Op::HeadConcat { a: a.0, b: b.0, heads })
    }

    /// Multi-head softmax attention without masking. `q` is `N x (heads*dk)`,
    /// `k` is `M x (heads*dk)` and `v` is `M x (heads*dv)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, m) = (vq.rows(), vk.rows());
        assert_eq!(vq.cols(), vk.cols(), "attention q/k width mismatch");
        assert_eq!(vk.rows(), vv.rows(), "attention k/v length mismatch");
        assert!(heads > 0 && vq.cols() % heads == 0 && vv.cols() % heads == 0);
        let (dk, dv) = (vq.cols() / heads, vv.cols() / heads);
        let mut out = Matrix::zeros(n, heads * dv);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut p = Matrix::zeros(n, m);
            gemm(
                View::cols_of(vq, h * dk, dk),
                View::cols_of(vk, h * dk, dk).t(),
                p.data_mut(),
                m,
                0.0,
            );
            softmax_rows_in_place(&mut p, scale);
            gemm_strided(
                View::of(&p),
                View::cols_of(vv, h * dv, dv),
                out.data_mut(),
                h * dv,
                heads * dv,
                0.0,
            );
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                scale,
                probs,
            },
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).gather_rows(idx);
        self.push(
            out,
            Op::GatherRows {
                x: a.0,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Matrix::vstack(&mats);
        self.push(out, Op::VStack(parts.iter().map(|p| p.0).collect()))
    }

    /// Columns `[start, start + width)`.
    pub fn col_slice(&mut self, a: Var, start: usize, width: usize) -> Var {
        let x = self.value(a);
        assert!(start + width <= x.cols(), "col_slice out of range");
        let mut out = Matrix::zeros(x.rows(), width);
        for i in 0..x.rows() {
            out.row_mut(i)
                .copy_from_slice(&x.row(i)[start..start + width]);
        }
        self.push(out, Op::ColSlice { x: a.0, start })
    }

    /// Mean squared difference against a constant target, as a `1 x 1`.
    pub fn mse(&mut self, a: Var, target: Rc<Matrix>) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), target.shape(), "mse shape mismatch");
        let n = x.data().len().max(1) as f64;
        let s: f64 = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.push(Matrix::from_vec(1, 1, vec![s / n]), Op::Mse { x: a.0, target })
    }

    /// Sum of all entries, as a `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Sum(a.0))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let mut da = Matrix::zeros(va.rows(), va.cols());
                gemm(View::of(g), View::of(vb).t(), da.data_mut(), va.cols(), 0.0);
                accumulate(grads, *a, da);
                let mut db = Matrix::zeros(vb.rows(), vb.cols());
                gemm(View::of(va).t(), View::of(g), db.data_mut(), vb.cols(), 0.0);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                accumulate(grads, *a, hadamard(g, vb));
                accumulate(grads, *b, hadamard(g, va));
            }
            Op::AddRow(a, r) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *r, col_sums(g));
            }
            Op::MulRow(a, r) => {
                let (va, vr) = (&self.nodes[*a].value, &self.nodes[*r].value);
                let mut da = g.clone();
                for row in 0..da.rows() {
                    for (x, s) in da.row_mut(row).iter_mut().zip(vr.data()) {
                        *x *= s;
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *r, col_sums(&hadamard(g, va)));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Silu(a) => {
                let va = &self.nodes[*a].value;
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(gy, &x)| {
                        let s = sigmoid(x);
                        gy * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let n = y.cols() as f64;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (gy, yr) = (g.row(r), y.row(r));
                    let mean_g = gy.iter().sum::<f64>() / n;
                    let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, a), b) in dx.row_mut(r).iter_mut().zip(gy).zip(yr) {
                        *d = inv_std[r] * (a - mean_g - b * mean_gy);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Rope { x, cache } => accumulate(grads, *x, rotate_rows(g, cache, true)),
            Op::HeadConcat { a, b, heads } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (wa, wb) = (va.cols() / heads, vb.cols() / heads);
                let w = wa + wb;
                let mut da = Matrix::zeros(va.rows(), va.cols());
                let mut db = Matrix::zeros(vb.rows(), vb.cols());
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    for h in 0..*heads {
                        da.row_mut(r)[h * wa..(h + 1) * wa]
                            .copy_from_slice(&gr[h * w..h * w + wa]);
                        db.row_mut(r)[h * wb..(h + 1) * wb]
                            .copy_from_slice(&gr[h * w + wa..(h + 1) * w]);
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => {
                let (vq, vk, vv) = (
                    &self.nodes[*q].value,
                    &self.nodes[*k].value,
                    &self.nodes[*v].value,
                );
                let (n, m) = (vq.rows(), vk.rows());
                let (dk, dv) = (vq.cols() / heads, vv.cols() / heads);
                let mut dq = Matrix::zeros(n, vq.cols());
                let mut dk_m = Matrix::zeros(m, vk.cols());
                let mut dv_m = Matrix::zeros(m, vv.cols());
                let mut dp = Matrix::zeros(n, m);
                for (h, p) in probs.iter().enumerate() {
                    let g_h = View::cols_of(g, h * dv, dv);
                    // dV_h = P^T dO_h
                    gemm_strided(View::of(p).t(), g_h, dv_m.data_mut(), h * dv, heads * dv, 0.0);
                    // dP = dO_h V_h^T
                    gemm(g_h, View::cols_of(vv, h * dv, dv).t(), dp.data_mut(), m, 0.0);
                    // dS = P ⊙ (dP - rowsum(dP ⊙ P)), folded with the score scale.
                    for r in 0..n {
                        let pr = p.row(r);
                        let dpr = dp.row_mut(r);
                        let dot: f64 = pr.iter().zip(dpr.iter()).map(|(a, b)| a * b).sum();
                        for (d, &pp) in dpr.iter_mut().zip(pr) {
                            *d = scale * pp * (*d - dot);
                        }
                    }
                    gemm_strided(
                        View::of(&dp),
                        View::cols_of(vk, h * dk, dk),
                        dq.data_mut(),
                        h * dk,
                        heads * dk,
                        0.0,
                    );
                    gemm_strided(
                        View::of(&dp).t(),
                        View::cols_of(vq, h * dk, dk),
                        dk_m.data_mut(),
                        h * dk,
                        heads * dk,
                        0.0,
                    );
                }
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk_m);
                accumulate(grads, *v, dv_m);
            }
            Op::GatherRows { x, idx } => {
                let vx = &self.nodes[*x].value;
                let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                for (o, &src) in idx.iter().enumerate() {
                    for (d, s) in dx.row_mut(src).iter_mut().zip(g.row(o)) {
                        *d += s;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::VStack(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.rows();
                    let idx: Vec<usize> = (start..start + rows).collect();
                    accumulate(grads, p, g.gather_rows(&idx));
                    start += rows;
                }
            }
            Op::ColSlice { x, start } => {
                let vx = &self.nodes[*x].value;
                let w = g.cols();
                let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::Mse { x, target } => {
                let vx = &self.nodes[*x].value;
                let n = vx.data().len().max(1) as f64;
                let c = 2.0 * g.get(0, 0) / n;
                let data = vx
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| c * (a - b))
                    .collect();
                accumulate(grads, *x, Matrix::from_vec(vx.rows(), vx.cols(), data));
            }
            Op::Sum(x) => {
                let vx = &self.nodes[*x].value;
                accumulate(grads, *x, Matrix::filled(vx.rows(), vx.cols(), g.get(0, 0)));
            }
        }
    }
}

/// Gradients from one reverse sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` if the output does not depend
    /// on it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scales by `scale` and applies a numerically stable softmax per row.
pub(crate) fn softmax_rows_in_place(p: &mut Matrix, scale: f64) {
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let mut mx = f64::NEG_INFINITY;
        for x in row.iter_mut() {
            *x *= scale;
            mx = mx.max(*x);
        }
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            s += *x;
        }
        let inv = 1.0 / s;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], i: usize, g: Matrix) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn col_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::{AxisFrequencyTable, TokenPos};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `d f / d leaf` for every leaf entry.
    fn check<F>(leaves: &[Matrix], f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |ls: &[Matrix]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ls.iter().map(|m| t.leaf(m.clone())).collect();
            let o = f(&mut t, &vs);
            t.value(o).get(0, 0)
        };
        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[li], leaf.shape());
            for e in 0..leaf.data().len() {
                let mut plus = leaves.to_vec();
                plus[li].data_mut()[e] += h;
                let mut minus = leaves.to_vec();
                minus[li].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (a - fd).abs() / denom < 1e-5,
                    "leaf {li} entry {e}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn matmul_bias_silu_gradients() {
        let mut r = rng();
        let x = Matrix::randn(3, 4, 1.0, &mut r);
        let w = Matrix::randn(4, 5, 0.5, &mut r);
        let b = Matrix::randn(1, 5, 0.5, &mut r);
        check(&[x, w, b], |t, v| {
            let y = t.matmul(v[0], v[1]);
            let y = t.add_row(y, v[2]);
            let y = t.silu(y);
            let y = t.mul(y, y);
            t.sum(y)
        });
    }

    #[test]
    fn layer_norm_and_modulation_gradients() {
        let mut r = rng();
        let x = Matrix::randn(4, 6, 1.0, &mut r);
        let s = Matrix::randn(1, 6, 0.3, &mut r);
        let sh = Matrix::randn(1, 6, 0.3, &mut r);
        let target = Rc::new(Matrix::randn(4, 6, 1.0, &mut r));
        check(&[x, s, sh], move |t, v| {
            let n = t.layer_norm(v[0], 1e-6);
            let one_plus = t.add_scalar(v[1], 1.0);
            let m = t.mul_row(n, one_plus);
            let m = t.add_row(m, v[2]);
            t.mse(m, target.clone())
        });
    }

    #[test]
    fn rope_concat_attention_gradients() {
        let mut r = rng();
        let heads = 2;
        let n = 5;
        let q = Matrix::randn(n, 8, 1.0, &mut r);
        let k = Matrix::randn(n, 8, 1.0, &mut r);
        let v = Matrix::randn(n, 6, 1.0, &mut r);
        let qc = Matrix::randn(n, 4, 1.0, &mut r);
        let kc = Matrix::randn(n, 4, 1.0, &mut r);
        let table = AxisFrequencyTable::with_default_split(4).unwrap();
        let pos: Vec<TokenPos> = (0..n).map(|i| TokenPos::new(i % 2, i / 2, i)).collect();
        let cache = Rc::new(RopeCache::new(&pos, &table, true));
        let cache_c = Rc::new(RopeCache::new(&pos, &table, false));
        let w = Rc::new(Matrix::randn(n, 6, 1.0, &mut r));
        check(&[q, k, v, qc, kc], move |t, x| {
            let q = t.rope(x[0], cache.clone());
            let k = t.rope(x[1], cache.clone());
            let qc = t.rope(x[3], cache_c.clone());
            let kc = t.rope(x[4], cache_c.clone());
            let qq = t.head_concat(q, qc, heads);
            let kk = t.head_concat(k, kc, heads);
            let o = t.attention(qq, kk, x[2], heads, 0.4);
            t.mse(o, w.clone())
        });
    }

    #[test]
    fn gather_stack_slice_gradients() {
        let mut r = rng();
        let a = Matrix::randn(3, 6, 1.0, &mut r);
        let b = Matrix::randn(2, 6, 1.0, &mut r);
        check(&[a, b], |t, v| {
            let s = t.vstack(&[v[0], v[1]]);
            let g = t.gather_rows(s, &[4, 0, 0, 2]);
            let c = t.col_slice(g, 2, 3);
            let d = t.sub(c, c);
            let e = t.scale(c, 1.5);
            let f = t.add(d, e);
            let f = t.mul(f, f);
            t.sum(f)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng();
        let mut p = Matrix::randn(4, 7, 3.0, &mut r);
        softmax_rows_in_place(&mut p, 1.0);
        for i in 0..4 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
