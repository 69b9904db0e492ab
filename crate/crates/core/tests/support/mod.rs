//! Checks shared by the unit-style tests and the acceptance run.
#![allow(dead_code)]

use std::rc::Rc;

use camrope::autograd::{Tape, Var};
use camrope::camera_attention::{
    attention_forward, attention_forward_tape, camera_table, AttentionProblem, AttentionVariant, CameraEncoder,
    CameraQkProjection, CameraQkVars, CameraTokens, FusionInputs, ScoreScale,
};
use camrope::episode::{generate_episode, EpisodeParams, Staging};
use camrope::model::{loss_and_gradients, DiTConfig, FlowSample, Model, Request};
use camrope::optim::{Adam, OptimConfig};
use camrope::rope::{AxisFrequencyTable, RopeCache, TokenPos};
use camrope::tasking::{TaskKind, TaskMixture};
use camrope::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

pub fn mse(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64
}

/// Central differences of `f` over every entry of `inputs[which]`.
fn numeric_grad(inputs: &mut [Matrix], which: usize, f: &dyn Fn(&[Matrix]) -> f64) -> Vec<f64> {
    let n = inputs[which].data().len();
    let mut g = Vec::with_capacity(n);
    for i in 0..n {
        let x0 = inputs[which].data()[i];
        inputs[which].data_mut()[i] = x0 + H;
        let up = f(inputs);
        inputs[which].data_mut()[i] = x0 - H;
        let down = f(inputs);
        inputs[which].data_mut()[i] = x0;
        g.push((up - down) / (2.0 * H));
    }
    g
}

pub fn grid(frames: usize, rows: usize, cols: usize) -> Vec<TokenPos> {
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

/// Inputs: q, k, v, camera tokens, camera wq, camera wk.
fn attention_loss(variant: AttentionVariant, m: &[Matrix], target: &Matrix, pos: &[TokenPos], table: &AxisFrequencyTable, heads: usize) -> f64 {
    let cam = CameraTokens {
        tokens: m[3].clone(),
        grid: (0, 0, 0),
        layer_index: 0,
    };
    let proj = CameraQkProjection {
        wq: m[4].clone(),
        wk: m[5].clone(),
        bq: None,
        bk: None,
    };
    let problem = AttentionProblem {
        q: &m[0],
        k: &m[1],
        v: &m[2],
        camera: Some(&cam),
        camera_qk: Some(&proj),
        positions: pos,
        table,
        heads,
    };
    mse(&attention_forward(variant, &problem, ScoreScale::Auto).unwrap(), target)
}

/// Relative gradient error of one random attention instance.
pub fn check_attention(variant: AttentionVariant, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = 2;
    let dh = 8;
    let d = heads * dh;
    let d_c = if variant.has_camera_qk() { 4 * rng.random_range(1..4) } else { d };
    let pos = grid(2, 2, 2);
    let n = pos.len();
    let table = AxisFrequencyTable::with_default_split(dh).unwrap();
    let mut m = vec![
        Matrix::randn(n, d, 1.0, &mut rng),
        Matrix::randn(n, d, 1.0, &mut rng),
        Matrix::randn(n, d, 1.0, &mut rng),
        Matrix::randn(n, d_c, 1.0, &mut rng),
        Matrix::randn(d_c, d_c, 0.5, &mut rng),
        Matrix::randn(d_c, d_c, 0.5, &mut rng),
    ];
    let target = Matrix::randn(n, d, 1.0, &mut rng);

    let mut tape = Tape::new();
    let leaves: Vec<Var> = m.iter().map(|x| tape.leaf(x.clone())).collect();
    let spatial = camera_table(&table, d_c / heads).unwrap();
    let inputs = FusionInputs {
        q: leaves[0],
        k: leaves[1],
        v: leaves[2],
        camera: Some(leaves[3]),
        camera_qk: Some(CameraQkVars {
            wq: leaves[4],
            wk: leaves[5],
            bq: None,
            bk: None,
        }),
        rope_video: Rc::new(RopeCache::new(&pos, &table, true)),
        rope_spatial: Rc::new(RopeCache::new(&pos, &spatial, false)),
        heads,
    };
    let out = attention_forward_tape(&mut tape, variant, &inputs, ScoreScale::Auto).unwrap();
    let loss = tape.mse(out, Rc::new(target.clone()));
    let grads = tape.backward(loss);

    let used = if variant.has_camera_qk() { 6 } else { 4 };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, leaf) in leaves.iter().enumerate().take(used) {
        analytic.extend_from_slice(grads.get_or_zeros(*leaf, m[i].shape()).data());
        numeric.extend(numeric_grad(&mut m, i, &|m| attention_loss(variant, m, &target, &pos, &table, heads)));
    }
    rel_err(&analytic, &numeric)
}



fn encoder_loss(m: &[Matrix], target: &Matrix) -> f64 {
    let mut tape = Tape::new();
    let x = tape.leaf(m[0].clone());
    let enc = CameraEncoder {
        w1: m[1].clone(),
        b1: m[2].clone(),
        w2: m[3].clone(),
        b2: m[4].clone(),
    };
    let vars = enc.to_tape(&mut tape);
    let out = vars.apply(&mut tape, x);
    mse(tape.value(out), target)
}



/// Relative error of the depth-1 model loss gradient on `coords` random
/// parameter entries, with every block (camera path, cross-attention,
/// modulation, head) active.
pub fn check_dit(seed: u64, coords: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variant = AttentionVariant::ALL[seed as usize % 5];
    let cfg = DiTConfig {
        depth: 1,
        heads: 2,
        d: 16,
        d_c: if variant.has_camera_qk() { 8 } else { 16 },
        cond_dim: 4,
        variant,
        zero_init: false,
        ..Default::default()
    };
    let params = EpisodeParams {
        width: 16,
        height: 16,
        focal: 17.0,
        ..Default::default()
    };
    let spec = TaskMixture::default().spec(TaskKind::MonoVideoNVS, (1, 3), (1, 3));
    let ep = generate_episode(&spec, seed | 1, &params, Staging::default()).unwrap();
    let mut model = Model::init(cfg, &mut rng).unwrap();
    let mut req = Request::from_episode(&ep, true);
    req.cond = Some((0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
    let prepared = model.prepare(&req).unwrap();
    let s = FlowSample::draw(&prepared, model.config.token_dim(), &mut rng);
    let (eps, tau) = (s.eps.clone(), s.tau);
    let (_, grads) = loss_and_gradients(&model, &[s]).unwrap();

    let picks: Vec<(usize, usize)> = (0..coords)
        .map(|_| {
            let p = rng.random_range(0..model.params.len());
            (p, rng.random_range(0..model.params.values()[p].data().len()))
        })
        .collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &(p, i) in &picks {
        analytic.push(grads[p].data()[i]);
        let x0 = model.params.values()[p].data()[i];
        let eval = |x: f64, model: &mut Model| {
            model.params.values_mut()[p].data_mut()[i] = x;
            let s = FlowSample {
                input: &prepared,
                eps: eps.clone(),
                tau,
            };
            loss_and_gradients(model, &[s]).unwrap().0
        };
        let up = eval(x0 + H, &mut model);
        let down = eval(x0 - H, &mut model);
        model.params.values_mut()[p].data_mut()[i] = x0;
        numeric.push((up - down) / (2.0 * H));
    }
    rel_err(&analytic, &numeric)
}



/// Relative gradient error of one random camera-encoder instance.
pub fn check_encoder(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, input, output) = (6, 6 * rng.random_range(1..4), 2 * rng.random_range(2..6));
    let mut enc = CameraEncoder::init(input, output, false, &mut rng);
    enc.b1 = Matrix::randn(1, 2 * input, 0.3, &mut rng);
    enc.b2 = Matrix::randn(1, output, 0.3, &mut rng);
    let mut m = vec![
        Matrix::randn(n, input, 1.0, &mut rng),
        enc.w1.clone(),
        enc.b1.clone(),
        enc.w2.clone(),
        enc.b2.clone(),
    ];
    let target = Matrix::randn(n, output, 1.0, &mut rng);

    let mut tape = Tape::new();
    let x = tape.leaf(m[0].clone());
    let vars = enc.to_tape(&mut tape);
    let out = vars.apply(&mut tape, x);
    let loss = tape.mse(out, Rc::new(target.clone()));
    let grads = tape.backward(loss);
    let leaves = [x, vars.w1, vars.b1, vars.w2, vars.b2];
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, leaf) in leaves.iter().enumerate() {
        analytic.extend_from_slice(grads.get_or_zeros(*leaf, m[i].shape()).data());
        numeric.extend(numeric_grad(&mut m, i, &|m| encoder_loss(m, &target)));
    }
    rel_err(&analytic, &numeric)
}

/// Full-batch Adam on one fixed `(z0, eps, tau)` triple with a depth-2
/// model. Returns the step at which the loss first fell below `threshold`
/// (or `max_steps`) and that loss.
pub fn memorization_steps(max_steps: usize, threshold: f64) -> (usize, f64) {
    let params = EpisodeParams {
        width: 16,
        height: 16,
        focal: 17.0,
        ..Default::default()
    };
    let spec = TaskMixture::default().spec(TaskKind::MonoImageNVS, (1, 1), (1, 1));
    let ep = generate_episode(&spec, 11, &params, Staging::default()).unwrap();
    let cfg = DiTConfig {
        depth: 2,
        heads: 2,
        d: 32,
        d_c: 32,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = Model::init(cfg, &mut rng).unwrap();
    let prepared = model.prepare(&Request::from_episode(&ep, true)).unwrap();
    let sample = FlowSample::draw(&prepared, model.config.token_dim(), &mut rng);
    let opt = OptimConfig {
        lr: 3e-3,
        warmup_fraction: 0.0,
        ..Default::default()
    };
    let mut adam = Adam::new(model.params.values());
    let mut loss = f64::INFINITY;
    for step in 0..max_steps {
        let s = FlowSample {
            input: &prepared,
            eps: sample.eps.clone(),
            tau: sample.tau,
        };
        let (l, mut g) = loss_and_gradients(&model, &[s]).unwrap();
        loss = l;
        if l < threshold {
            return (step, l);
        }
        adam.step(&opt, model.params.values_mut(), &mut g, opt.lr);
    }
    (max_steps, loss)
}

