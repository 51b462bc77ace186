#![allow(dead_code)]

use inode_core::diffnum::{Backend, Eval, Tape, Tensor};
use inode_core::model::{Model, Pathways, Variant, VariantConfig};
use inode_core::nets::Activation;
use inode_core::objective::{evaluate_objective, total_objective, ObjectiveOptions};
use inode_core::odeint::{SolverSpec, TimeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor so that near-zero gradients are compared
/// on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

pub const N_OPS: u8 = 22;

/// Applies op `k` to the running `[2, 3]` value `h`, using `y` ([2, 3]) and
/// `w` ([3, 3]) as second operands. Every op keeps the `[2, 3]` shape and
/// stays inside its domain.
fn step<B: Backend>(b: &mut B, k: u8, h: &B::T, y: &B::T, w: &B::T) -> B::T {
    let r = match k % N_OPS {
        0 => b.matmul(h, w),
        1 => b.add(h, y),
        2 => b.sub(h, y),
        3 => b.mul(h, y),
        4 => {
            let d = b.softplus(y).and_then(|d| b.add_scalar(&d, 0.5)).unwrap();
            b.div(h, &d)
        }
        5 => b.scale(h, -1.7),
        6 => b.add_scalar(h, 0.3),
        7 => b.tanh(h),
        8 => b.sigmoid(h),
        9 => b.relu(h).and_then(|r| b.add(&r, h)),
        10 => b.softplus(h),
        11 => b.tanh(h).and_then(|t| b.exp(&t)),
        12 => b.softplus(h).and_then(|s| b.add_scalar(&s, 0.1)).and_then(|s| b.log(&s)),
        13 => b.square(h).and_then(|s| b.add_scalar(&s, 0.2)).and_then(|s| b.sqrt(&s)),
        14 => b.tanh(h).and_then(|t| b.square(&t)),
        15 => {
            let l = b.slice(h, 0, 2).unwrap();
            let r = b.slice(h, 2, 1).unwrap();
            b.concat(&[&r, &l])
        }
        16 => {
            let both = b.concat_rows(&[h, y]).unwrap();
            b.gather_rows(&both, vec![3, 0])
        }
        17 => {
            let both = b.concat_rows(&[h, y]).unwrap();
            b.mean_blocks(&both, 2)
        }
        18 => b.lincomb(h, &[(0.5, y), (-0.25, h)]),
        19 => {
            // reductions broadcast back over the [2, 3] shape
            let col = b.sum_last(h).and_then(|c| b.tanh(&c)).unwrap();
            let m = b.mean(h).unwrap();
            let t = b.sum(y).and_then(|t| b.scale(&t, 0.1)).unwrap();
            b.mul(h, &col).and_then(|p| b.add(&p, &m)).and_then(|p| b.mul(&p, &t))
        }
        20 => b.tanh(h).and_then(|t| b.mul(&t, h)),
        _ => b.gather_rows(h, vec![1, 1]).and_then(|g| b.add(&g, h)),
    };
    r.expect("op stays in shape")
}

/// A random `[2, 3] -> scalar` graph: the op sequence `plan` followed by a
/// weighted sum with fixed coefficients `r`.
pub fn graph<B: Backend>(b: &mut B, plan: &[u8], x: &B::T, y: &B::T, w: &B::T, r: &Tensor) -> B::T {
    let mut h = x.clone();
    for &k in plan {
        h = step(b, k, &h, y, w);
    }
    let r = b.constant(r.clone());
    let p = b.mul(&h, &r).unwrap();
    b.sum(&p).unwrap()
}

pub struct GraphCase {
    pub plan: Vec<u8>,
    pub inputs: [Tensor; 3],
    pub weights: Tensor,
}

pub fn random_case(seed: u64, depth: usize) -> GraphCase {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut mat = |r: usize, c: usize, s: f64| Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-s..s)).collect());
    let inputs = [mat(2, 3, 1.5), mat(2, 3, 1.5), mat(3, 3, 0.8)];
    let weights = mat(2, 3, 1.0);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
    let plan = (0..depth).map(|_| rng.gen_range(0..N_OPS)).collect();
    GraphCase { plan, inputs, weights }
}

fn eval_case(c: &GraphCase, inputs: &[Tensor; 3]) -> f64 {
    let mut e = Eval::new();
    let [x, y, w] = inputs.clone().map(|t| e.constant(t));
    let out = graph(&mut e, &c.plan, &x, &y, &w, &c.weights);
    e.value(&out).item()
}

/// Largest relative error between tape gradients and central differences
/// over every input entry.
pub fn graph_fd_error(c: &GraphCase) -> f64 {
    let mut t = Tape::new();
    let ids = c.inputs.clone().map(|v| t.var(v));
    let out = graph(&mut t, &c.plan, &ids[0], &ids[1], &ids[2], &c.weights);
    let g = t.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (k, id) in ids.iter().enumerate() {
        let ad = g.wrt(*id);
        for i in 0..c.inputs[k].len() {
            let mut up = c.inputs.clone();
            up[k].data_mut()[i] += FD_STEP;
            let mut dn = c.inputs.clone();
            dn[k].data_mut()[i] -= FD_STEP;
            let fd = (eval_case(c, &up) - eval_case(c, &dn)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, ad.data()[i]));
        }
    }
    worst
}

/// A small random model configuration; every variant, pathway and
/// solver appears across seeds.
pub fn random_model(seed: u64) -> (Model, Vec<Tensor>, TimeGrid, Tensor, ObjectiveOptions) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let variant = [Variant::Node, Variant::Inode, Variant::Sinode][rng.gen_range(0..3)];
    let pathways = if variant == Variant::Node {
        Pathways::Modulator
    } else {
        [Pathways::Modulator, Pathways::Content, Pathways::Both][rng.gen_range(0..3)]
    };
    let solver = match rng.gen_range(0..3) {
        0 => SolverSpec::euler(0.05),
        1 => SolverSpec::rk4(0.1),
        _ => SolverSpec::dopri5(1e-7, 1e-9),
    };
    let activation = [Activation::Tanh, Activation::Softplus][rng.gen_range(0..2)];
    let obs_dim = rng.gen_range(1..3);
    let cfg = VariantConfig {
        variant,
        pathways,
        obs_dim,
        q_x: rng.gen_range(1..3),
        q_c: rng.gen_range(1..3),
        t_in: 2,
        t_inv: 4,
        n_e: Some(3),
        solver,
        mc_samples: rng.gen_range(1..3),
        enc_hidden: 3,
        inv_hidden: 3,
        dyn_hidden: vec![3],
        dec_hidden: vec![3],
        activation,
    };
    let model = Model::new(cfg).unwrap();
    let n_seq = 2;
    let n_t = 5;
    let frames = (0..n_t)
        .map(|_| Tensor::matrix(n_seq, obs_dim, (0..n_seq * obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    let q = model.config().latent_dim();
    let l = model.config().mc_samples;
    let eps = Tensor::matrix(n_seq * l, q, (0..n_seq * l * q).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let lambda = if variant == Variant::Sinode { 1.0 } else { 0.0 };
    let opts = ObjectiveOptions { lambda, kl_weight: 1.0, pair_seed: seed };
    (model, frames, TimeGrid::new(0.0, 0.1, n_t).unwrap(), eps, opts)
}

/// Largest relative error of the full objective gradient against central
/// differences, over every parameter.
pub fn model_fd_error(seed: u64) -> f64 {
    let (model, frames, grid, eps, opts) = random_model(seed);
    let p = model.init_params(seed).unwrap();
    let (_, g) = total_objective(&model, &p, &frames, &grid, eps.clone(), &opts).unwrap();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let mut up = p.clone();
        up.values_mut()[i] += FD_STEP;
        let mut dn = p.clone();
        dn.values_mut()[i] -= FD_STEP;
        let fu = evaluate_objective(&model, &up, &frames, &grid, eps.clone(), &opts).unwrap().total;
        let fd = evaluate_objective(&model, &dn, &frames, &grid, eps.clone(), &opts).unwrap().total;
        worst = worst.max(rel_err((fu - fd) / (2.0 * FD_STEP), g[i]));
    }
    worst
}

/// A random diagonal posterior of dimension 1..=4.
pub fn random_posterior(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let q = rng.gen_range(1..5);
    let mean = (0..q).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let log_var = (0..q).map(|_| rng.gen_range(-1.5..1.5)).collect();
    (mean, log_var)
}

/// Monte-Carlo estimate of KL(q || N(0, I)) as the mean of
/// `log q(z) - log p(z)` over `n` draws, with its standard error.
pub fn kl_monte_carlo(mean: &[f64], log_var: &[f64], n: usize, seed: u64) -> (f64, f64) {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let mut d = 0.0;
        for (m, lv) in mean.iter().zip(log_var) {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = m + (0.5 * lv).exp() * e;
            // log q - log p; the 2*pi terms cancel
            d += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
        }
        s += d;
        s2 += d * d;
    }
    let n = n as f64;
    let mean_d = s / n;
    let var = (s2 / n - mean_d * mean_d) * n / (n - 1.0);
    (mean_d, (var / n).sqrt())
}

fn invariance_model(pathways: Pathways, seed: u64) -> (Model, inode_core::nets::ModelParams) {
    let cfg = VariantConfig {
        variant: Variant::Inode,
        pathways,
        obs_dim: 2,
        q_x: 2,
        q_c: 3,
        t_in: 3,
        t_inv: 9,
        n_e: Some(3),
        solver: SolverSpec::euler(0.1),
        mc_samples: 1,
        enc_hidden: 5,
        inv_hidden: 5,
        dyn_hidden: vec![4],
        dec_hidden: vec![4],
        activation: Activation::Tanh,
    };
    let m = Model::new(cfg).unwrap();
    let p = m.init_params(seed).unwrap();
    (m, p)
}

fn random_frames(rng: &mut ChaCha20Rng, n_seq: usize, n_t: usize, dim: usize) -> Vec<Tensor> {
    (0..n_t).map(|_| Tensor::matrix(n_seq, dim, (0..n_seq * dim).map(|_| rng.gen_range(-2.0..2.0)).collect())).collect()
}

fn shuffled(rng: &mut ChaCha20Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest change of `c` under a random permutation of the context frames.
pub fn content_permutation_error(seed: u64) -> f64 {
    let (m, p) = invariance_model(Pathways::Content, seed);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let frames = random_frames(&mut rng, 3, 9, 2);
    let perm = shuffled(&mut rng, 9);
    let permuted: Vec<Tensor> = perm.iter().map(|&i| frames[i].clone()).collect();
    let mut b = Eval::new();
    let frames: Vec<_> = frames.into_iter().map(|f| b.constant(f)).collect();
    let permuted: Vec<_> = permuted.into_iter().map(|f| b.constant(f)).collect();
    let a = m.extract_content(&mut b, &p, &frames).unwrap();
    let c = m.extract_content(&mut b, &p, &permuted).unwrap();
    max_abs_diff(a.pooled.data(), c.pooled.data())
}

/// Largest change of `m` when its windows are pooled in a random order.
pub fn modulator_window_order_error(seed: u64) -> f64 {
    let (m, p) = invariance_model(Pathways::Modulator, seed);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let frames = random_frames(&mut rng, 3, 9, 2);
    let ne = m.config().window();
    let k = m.config().t_inv - ne;
    let mut b = Eval::new();
    let frames: Vec<_> = frames.into_iter().map(|f| b.constant(f)).collect();
    let whole = m.extract_modulator(&mut b, &p, &frames).unwrap();
    let windows: Vec<_> = shuffled(&mut rng, k)
        .into_iter()
        .map(|s| m.window_parts(&mut b, &p, &frames[s..s + ne], 1).unwrap())
        .collect();
    let refs: Vec<_> = windows.iter().collect();
    let stacked = b.concat_rows(&refs).unwrap();
    let pooled = m.pool(&mut b, &stacked, k).unwrap();
    max_abs_diff(whole.pooled.data(), pooled.data())
}
