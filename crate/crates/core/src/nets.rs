//! Parameter store, MLPs and the gated recurrent encoder.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffnum::{Backend, DiffError, Grads, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Softplus,
}

impl Activation {
    pub fn apply<B: Backend>(self, b: &mut B, x: &B::T) -> Result<B::T> {
        Ok(match self {
            Activation::Tanh => b.tanh(x)?,
            Activation::Relu => b.relu(x)?,
            Activation::Softplus => b.softplus(x)?,
        })
    }
}

/// Layer widths from input to output, e.g. `[8, 64, 4]` is one hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub final_activation: Option<Activation>,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self { widths, activation, final_activation: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::Model(format!("mlp needs at least one hidden layer, widths {:?}", self.widths)));
        }
        if self.widths.contains(&0) {
            return Err(Error::Model(format!("mlp widths must be >= 1, got {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RnnSpec {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl RnnSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.output == 0 {
            return Err(Error::Model(format!("rnn dims must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Glorot,
    Zeros,
    Const(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamEntry {
    pub fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        Self { name, shape, init }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Owning module: the name up to the first `.`.
    pub fn module(&self) -> &str {
        self.name.split('.').next().unwrap_or("")
    }
}

/// Flat parameter vector addressed by named slices.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    values: Vec<f64>,
    slices: Vec<ParamSlice>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn from_parts(slices: Vec<ParamSlice>, values: Vec<f64>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut offset = 0;
        for (i, s) in slices.iter().enumerate() {
            if s.offset != offset {
                return Err(Error::Model(format!("slice `{}` has offset {}, expected {offset}", s.name, s.offset)));
            }
            if index.insert(s.name.clone(), i).is_some() {
                return Err(Error::Model(format!("duplicate parameter name `{}`", s.name)));
            }
            offset += s.len();
        }
        if offset != values.len() {
            return Err(Error::Model(format!("parameter vector has {} values, slices need {offset}", values.len())));
        }
        Ok(Self { values, slices, index })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    fn lookup(&self, name: &str) -> &ParamSlice {
        match self.index.get(name) {
            Some(&i) => &self.slices[i],
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Panics on an unknown name; layouts are fixed when the model is built.
    pub fn slice(&self, name: &str) -> &[f64] {
        let s = self.lookup(name);
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn slice_mut(&mut self, name: &str) -> &mut [f64] {
        let s = self.lookup(name).clone();
        &mut self.values[s.offset..s.offset + s.len()]
    }

    pub fn tensor(&self, name: &str) -> Tensor {
        let s = self.lookup(name);
        Tensor::new(s.shape.clone(), self.slice(name).to_vec()).expect("slice shape")
    }

    pub fn leaf<B: Backend>(&self, b: &mut B, name: &str) -> B::T {
        b.param(name, || self.tensor(name))
    }

    /// Gradient laid out like `values()`; parameters absent from the tape get 0.
    pub fn flatten_grads(&self, grads: &Grads) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for (name, g) in grads.named() {
            if let Some(&i) = self.index.get(name) {
                let s = &self.slices[i];
                out[s.offset..s.offset + s.len()].copy_from_slice(g.data());
            }
        }
        out
    }
}

/// Weights Glorot-uniform, biases zero, deterministic in `seed`.
pub fn init_params(layout: &[ParamEntry], seed: u64) -> Result<ModelParams> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut slices = Vec::with_capacity(layout.len());
    let mut values = Vec::new();
    for e in layout {
        let n: usize = e.shape.iter().product();
        slices.push(ParamSlice { name: e.name.clone(), shape: e.shape.clone(), offset: values.len() });
        match e.init {
            Init::Zeros => values.extend(std::iter::repeat(0.0).take(n)),
            Init::Const(c) => values.extend(std::iter::repeat(c).take(n)),
            Init::Glorot => {
                let (fan_in, fan_out) = match e.shape.as_slice() {
                    [i, o] => (*i, *o),
                    [o] => (1, *o),
                    _ => return Err(Error::Model(format!("glorot init needs rank 1-2, `{}`", e.name))),
                };
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let u = Uniform::new_inclusive(-a, a);
                values.extend((0..n).map(|_| u.sample(&mut rng)));
            }
        }
    }
    ModelParams::from_parts(slices, values)
}

pub fn mlp_layout(prefix: &str, spec: &MlpSpec) -> Vec<ParamEntry> {
    spec.widths
        .windows(2)
        .enumerate()
        .flat_map(|(i, w)| {
            [
                ParamEntry::new(format!("{prefix}.l{i}.w"), vec![w[0], w[1]], Init::Glorot),
                ParamEntry::new(format!("{prefix}.l{i}.b"), vec![w[1]], Init::Zeros),
            ]
        })
        .collect()
}

/// Affine + activation stack over a batch of rows `[n, input]`.
pub fn mlp_forward<B: Backend>(b: &mut B, params: &ModelParams, prefix: &str, spec: &MlpSpec, x: &B::T) -> Result<B::T> {
    let xs = b.value(x).shape().to_vec();
    if xs.last().copied() != Some(spec.input()) {
        return Err(DiffError::Shape { op: "mlp_forward", lhs: xs, rhs: vec![spec.input()] }.into());
    }
    let layers = spec.widths.len() - 1;
    let mut h = x.clone();
    for i in 0..layers {
        let w = params.leaf(b, &format!("{prefix}.l{i}.w"));
        let bias = params.leaf(b, &format!("{prefix}.l{i}.b"));
        let z = b.matmul(&h, &w)?;
        h = b.add(&z, &bias)?;
        if i + 1 < layers {
            h = spec.activation.apply(b, &h)?;
        } else if let Some(act) = spec.final_activation {
            h = act.apply(b, &h)?;
        }
    }
    Ok(h)
}

pub fn rnn_layout(prefix: &str, spec: &RnnSpec) -> Vec<ParamEntry> {
    let (i, h, o) = (spec.input, spec.hidden, spec.output);
    let mut out = Vec::new();
    for g in ["z", "r", "n"] {
        out.push(ParamEntry::new(format!("{prefix}.w{g}"), vec![i, h], Init::Glorot));
        out.push(ParamEntry::new(format!("{prefix}.u{g}"), vec![h, h], Init::Glorot));
        out.push(ParamEntry::new(format!("{prefix}.b{g}"), vec![h], Init::Zeros));
    }
    out.push(ParamEntry::new(format!("{prefix}.out.w"), vec![h, o], Init::Glorot));
    out.push(ParamEntry::new(format!("{prefix}.out.b"), vec![o], Init::Zeros));
    out
}

/// One gated-recurrent update:
/// `z = σ(x Wz + h Uz + bz)`, `r = σ(x Wr + h Ur + br)`,
/// `n = tanh(x Wn + r ⊙ (h Un) + bn)`, `h' = n + z ⊙ (h - n)`.
pub fn gru_cell<B: Backend>(b: &mut B, params: &ModelParams, prefix: &str, x: &B::T, h: &B::T) -> Result<B::T> {
    let gate = |b: &mut B, g: &str| -> Result<(B::T, B::T)> {
        let w = params.leaf(b, &format!("{prefix}.w{g}"));
        let u = params.leaf(b, &format!("{prefix}.u{g}"));
        let bias = params.leaf(b, &format!("{prefix}.b{g}"));
        let xw = b.matmul(x, &w)?;
        let xw = b.add(&xw, &bias)?;
        let hu = b.matmul(h, &u)?;
        Ok((xw, hu))
    };
    let (xz, hz) = gate(b, "z")?;
    let (xr, hr) = gate(b, "r")?;
    let (xn, hn) = gate(b, "n")?;
    let z = b.add(&xz, &hz)?;
    let z = b.sigmoid(&z)?;
    let r = b.add(&xr, &hr)?;
    let r = b.sigmoid(&r)?;
    let rh = b.mul(&r, &hn)?;
    let n = b.add(&xn, &rh)?;
    let n = b.tanh(&n)?;
    let diff = b.sub(h, &n)?;
    let zd = b.mul(&z, &diff)?;
    Ok(b.add(&n, &zd)?)
}

/// Runs the cell over `frames` (time order, each `[n, input]`) from the last
/// frame back to the first, then applies the linear readout to the final
/// hidden state.
pub fn rnn_encode<B: Backend>(
    b: &mut B,
    params: &ModelParams,
    prefix: &str,
    spec: &RnnSpec,
    frames: &[B::T],
) -> Result<B::T> {
    let Some(first) = frames.first() else {
        return Err(Error::Model("rnn_encode on an empty sequence".into()));
    };
    let shape = b.value(first).shape().to_vec();
    if shape.len() != 2 || shape[1] != spec.input {
        return Err(DiffError::Shape { op: "rnn_encode", lhs: shape, rhs: vec![spec.input] }.into());
    }
    let mut h = b.constant(Tensor::zeros(&[shape[0], spec.hidden]));
    for x in frames.iter().rev() {
        h = gru_cell(b, params, prefix, x, &h)?;
    }
    let w = params.leaf(b, &format!("{prefix}.out.w"));
    let bias = params.leaf(b, &format!("{prefix}.out.b"));
    let y = b.matmul(&h, &w)?;
    Ok(b.add(&y, &bias)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::{sigmoid, Eval, Tape};

    fn params_for(layout: &[ParamEntry], seed: u64) -> ModelParams {
        init_params(layout, seed).unwrap()
    }

    #[test]
    fn zero_mlp_gives_zero() {
        let spec = MlpSpec::new(3, &[5], 2, Activation::Tanh);
        let mut p = params_for(&mlp_layout("f", &spec), 1);
        p.values_mut().fill(0.0);
        let mut b = Eval::new();
        let x = b.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.1, 0.2]));
        let y = mlp_forward(&mut b, &p, "f", &spec, &x).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);
    }

    #[test]
    fn identity_layers_pass_input_through() {
        // relu(I x) then I: identity on non-negative inputs
        let spec = MlpSpec::new(2, &[2], 2, Activation::Relu);
        let mut p = params_for(&mlp_layout("f", &spec), 1);
        for l in ["f.l0.w", "f.l1.w"] {
            p.slice_mut(l).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        let mut b = Eval::new();
        let x = b.constant(Tensor::matrix(1, 2, vec![0.25, 4.0]));
        let y = mlp_forward(&mut b, &p, "f", &spec, &x).unwrap();
        assert_eq!(y.data(), &[0.25, 4.0]);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let spec = MlpSpec::new(3, &[4], 1, Activation::Tanh);
        let p = params_for(&mlp_layout("f", &spec), 0);
        let mut b = Eval::new();
        let x = b.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        assert!(mlp_forward(&mut b, &p, "f", &spec, &x).is_err());
        assert!(MlpSpec { widths: vec![2, 3], activation: Activation::Tanh, final_activation: None }
            .validate()
            .is_err());
    }

    #[test]
    fn single_frame_is_one_cell_update_from_zero() {
        let spec = RnnSpec { input: 1, hidden: 2, output: 1 };
        let p = params_for(&rnn_layout("g", &spec), 3);
        let x = 0.7;
        // h0 = 0: z = σ(x wz), n = tanh(x wn), h1 = (1 - z) n
        let wz = p.slice("g.wz");
        let wn = p.slice("g.wn");
        let h1: Vec<f64> = (0..2)
            .map(|j| {
                let z = sigmoid(x * wz[j]);
                let n = (x * wn[j]).tanh();
                (1.0 - z) * n
            })
            .collect();
        let ow = p.slice("g.out.w");
        let expected = h1[0] * ow[0] + h1[1] * ow[1];
        let mut b = Eval::new();
        let f = b.constant(Tensor::matrix(1, 1, vec![x]));
        let y = rnn_encode(&mut b, &p, "g", &spec, &[f]).unwrap();
        assert!((y.item() - expected).abs() < 1e-14);
    }

    #[test]
    fn rnn_is_deterministic_and_order_sensitive() {
        let spec = RnnSpec { input: 2, hidden: 6, output: 3 };
        let p = params_for(&rnn_layout("g", &spec), 5);
        let seq: Vec<Tensor> = (0..7).map(|t| Tensor::matrix(1, 2, vec![(t as f64).sin(), 0.3 * t as f64])).collect();
        let run = |frames: &[Tensor]| {
            let mut b = Eval::new();
            let fs: Vec<_> = frames.iter().map(|f| b.constant(f.clone())).collect();
            rnn_encode(&mut b, &p, "g", &spec, &fs).unwrap().data().to_vec()
        };
        let a = run(&seq);
        assert_eq!(a, run(&seq));
        assert!(a.iter().all(|v| v.is_finite()));
        let rev: Vec<Tensor> = seq.iter().rev().cloned().collect();
        assert_ne!(a, run(&rev));
        let long: Vec<Tensor> = (0..40).map(|_| Tensor::matrix(1, 2, vec![0.5, -0.5])).collect();
        assert!(run(&long).iter().all(|v| v.is_finite()));
        let mut b = Eval::new();
        assert!(rnn_encode(&mut b, &p, "g", &spec, &[]).is_err());
    }

    #[test]
    fn init_is_deterministic_with_glorot_scale_and_zero_bias() {
        let spec = MlpSpec::new(100, &[100], 100, Activation::Tanh);
        let layout = mlp_layout("f", &spec);
        let a = params_for(&layout, 9);
        assert_eq!(a, params_for(&layout, 9));
        assert_ne!(a, params_for(&layout, 10));
        let w = a.slice("f.l0.w");
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let target = (2.0 / 200.0f64).sqrt();
        assert!((std / target - 1.0).abs() < 0.2, "std {std} vs {target}");
        assert!(a.slice("f.l0.b").iter().chain(a.slice("f.l1.b")).all(|&v| v == 0.0));
    }

    #[test]
    fn grads_flatten_by_slice() {
        let spec = MlpSpec::new(2, &[3], 1, Activation::Tanh);
        let p = params_for(&mlp_layout("f", &spec), 2);
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 2, vec![0.4, -0.1]));
        let y = mlp_forward(&mut t, &p, "f", &spec, &x).unwrap();
        let s = t.sum(&y).unwrap();
        let g = t.backward(s).unwrap();
        let flat = p.flatten_grads(&g);
        assert_eq!(flat.len(), p.len());
        // d/d(last bias) of the output is 1
        let s = p.slices().iter().find(|s| s.name == "f.l1.b").unwrap();
        assert_eq!(flat[s.offset], 1.0);
        assert!(ModelParams::from_parts(p.slices().to_vec(), vec![0.0; 3]).is_err());
    }
}
