//! Query/key MLP encoders with exact reverse-mode gradients, SGD with
//! momentum and weight decay, the EMA key update and cosine schedules.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, check_dims, dot_unchecked, norm, Matrix, MIN_NORM};

/// Fixed-order dot product over four interleaved lanes. The lane pattern is
/// fixed, so results are reproducible for a given build.
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Fully connected layer `y = W·x + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        check_dims(weight.rows(), bias.len())?;
        Ok(Self { weight, bias })
    }

    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    fn he_uniform(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Matrix::from_vec(output, input, data).expect("sized above"),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| b + dot4(w, x))
            .collect()
    }
}

/// Stack of layers with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Activations recorded by [`Mlp::forward_tape`]: the input of every layer
/// and every layer's pre-activation output.
#[derive(Debug, Clone, Default)]
pub struct MlpTape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch(
                "an MLP needs at least one layer".into(),
            ));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer output {} does not feed layer input {}",
                    w[0].output_dim(),
                    w[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// He-uniform weights, zero biases; `dims = [in, h1, ..., out]`.
    pub fn he_uniform(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Layer::he_uniform(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![Layer {
                weight: Matrix::identity(dim),
                bias: vec![0.0; dim],
            }],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Layer::output_dim));
        d
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.bias.len() * (l.input_dim() + 1))
            .sum()
    }

    /// Forward pass through the first `depth` layers.
    pub fn forward_partial(&self, x: &[f64], depth: usize) -> Result<Vec<f64>> {
        check_dims(self.input_dim(), x.len())?;
        let n = self.layers.len();
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().take(depth).enumerate() {
            h = layer.apply(&h);
            if i + 1 < n {
                relu_in_place(&mut h);
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_partial(x, self.layers.len())
    }

    pub fn forward_tape(&self, x: &[f64], tape: &mut MlpTape) -> Result<Vec<f64>> {
        check_dims(self.input_dim(), x.len())?;
        tape.inputs.clear();
        tape.pre.clear();
        let n = self.layers.len();
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.apply(&h);
            tape.inputs.push(h);
            h = pre.clone();
            if i + 1 < n {
                relu_in_place(&mut h);
            }
            tape.pre.push(pre);
        }
        Ok(h)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, tape: &MlpTape, grad_out: &[f64], grads: &mut Mlp) -> Result<Vec<f64>> {
        let n = self.layers.len();
        if tape.pre.len() != n || tape.inputs.len() != n {
            return Err(Error::TapeMismatch(format!(
                "tape has {} layers, network has {n}",
                tape.pre.len()
            )));
        }
        if grads.layers.len() != n {
            return Err(Error::ShapeMismatch("gradient buffer depth".into()));
        }
        check_dims(self.output_dim(), grad_out.len())?;
        let mut g = grad_out.to_vec();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let input = &tape.inputs[i];
            if input.len() != layer.input_dim() || tape.pre[i].len() != layer.output_dim() {
                return Err(Error::TapeMismatch(format!("layer {i} activation shape")));
            }
            if i + 1 < n {
                for (gj, s) in g.iter_mut().zip(&tape.pre[i]) {
                    if *s <= 0.0 {
                        *gj = 0.0;
                    }
                }
            }
            let gl = &mut grads.layers[i];
            let mut g_in = vec![0.0; layer.input_dim()];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                gl.bias[o] += go;
                axpy(go, input, gl.weight.row_mut(o));
                axpy(go, layer.weight.row(o), &mut g_in);
            }
            g = g_in;
        }
        Ok(g)
    }

    fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Anything whose trainable parameters can be viewed as a fixed sequence
/// of flat blocks.
pub trait ParamBlocks {
    fn param_blocks(&self) -> Vec<&[f64]>;
    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn block_shapes(&self) -> Vec<usize> {
        self.param_blocks().iter().map(|b| b.len()).collect()
    }

    fn flatten(&self) -> Vec<f64> {
        self.param_blocks().concat()
    }
}

impl ParamBlocks for Vec<f64> {
    fn param_blocks(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }
    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

impl ParamBlocks for Mlp {
    fn param_blocks(&self) -> Vec<&[f64]> {
        self.blocks().collect()
    }
    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks_mut().collect()
    }
}

/// Trainable query encoder: backbone, projection head, prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryNet {
    pub backbone: Mlp,
    pub projection: Mlp,
    pub prediction: Mlp,
}

/// Momentum (key) encoder: backbone and projection head only.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyNet {
    pub backbone: Mlp,
    pub projection: Mlp,
}

impl ParamBlocks for QueryNet {
    fn param_blocks(&self) -> Vec<&[f64]> {
        self.backbone
            .blocks()
            .chain(self.projection.blocks())
            .chain(self.prediction.blocks())
            .collect()
    }
    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.backbone
            .blocks_mut()
            .chain(self.projection.blocks_mut())
            .chain(self.prediction.blocks_mut())
            .collect()
    }
}

impl ParamBlocks for KeyNet {
    fn param_blocks(&self) -> Vec<&[f64]> {
        self.backbone
            .blocks()
            .chain(self.projection.blocks())
            .collect()
    }
    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.backbone
            .blocks_mut()
            .chain(self.projection.blocks_mut())
            .collect()
    }
}

impl QueryNet {
    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.zeros_like(),
            projection: self.projection.zeros_like(),
            prediction: self.prediction.zeros_like(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.backbone.num_params() + self.projection.num_params() + self.prediction.num_params()
    }

    /// Element-wise `self += other`.
    pub fn accumulate(&mut self, other: &QueryNet) {
        for (a, b) in self
            .param_blocks_mut()
            .into_iter()
            .zip(other.param_blocks())
        {
            axpy(1.0, b, a);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for block in self.param_blocks_mut() {
            block.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Copies backbone and projection into a key network.
    pub fn key_copy(&self) -> KeyNet {
        KeyNet {
            backbone: self.backbone.clone(),
            projection: self.projection.clone(),
        }
    }
}

/// Encoder widths. Each MLP's `dims` are `[in, hidden..., out]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub backbone_widths: Vec<usize>,
    pub projection_hidden: Vec<usize>,
    pub prediction_hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl ArchConfig {
    pub fn backbone_dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.backbone_widths);
        d
    }

    pub fn backbone_out(&self) -> usize {
        *self.backbone_widths.last().unwrap_or(&self.input_dim)
    }

    pub fn projection_dims(&self) -> Vec<usize> {
        let mut d = vec![self.backbone_out()];
        d.extend(&self.projection_hidden);
        d.push(self.embedding_dim);
        d
    }

    pub fn prediction_dims(&self) -> Vec<usize> {
        let mut d = vec![self.embedding_dim];
        d.extend(&self.prediction_hidden);
        d.push(self.embedding_dim);
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim", "must be >= 1"));
        }
        if self.backbone_widths.is_empty() {
            return Err(Error::invalid(
                "backbone_widths",
                "needs at least one layer",
            ));
        }
        if self.embedding_dim == 0 {
            return Err(Error::invalid("embedding_dim", "must be >= 1"));
        }
        for (key, w) in [
            ("backbone_widths", &self.backbone_widths),
            ("projection_hidden", &self.projection_hidden),
            ("prediction_hidden", &self.prediction_hidden),
        ] {
            if w.contains(&0) {
                return Err(Error::invalid(key, "widths must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Which stage of the query encoder to read features from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Backbone,
    Projection,
    Prediction,
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(Stage::Backbone),
            "projection" => Ok(Stage::Projection),
            "prediction" => Ok(Stage::Prediction),
            other => Err(Error::invalid("stage", format!("unknown stage `{other}`"))),
        }
    }
}

/// Activation record of one [`EncoderPair::forward_query`] call.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    backbone: MlpTape,
    projection: MlpTape,
    prediction: MlpTape,
    pre_norm: Vec<f64>,
    pre_norm_len: f64,
    z: Vec<f64>,
}

impl Tape {
    pub fn z(&self) -> &[f64] {
        &self.z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub theta: QueryNet,
    pub xi: KeyNet,
    /// EMA coefficient used by [`EncoderPair::ema_update`].
    pub m: f64,
}

fn normalize_with_len(v: Vec<f64>) -> Result<(Vec<f64>, f64)> {
    let n = norm(&v);
    if !(n > MIN_NORM) {
        return Err(Error::ZeroNorm(n));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

impl EncoderPair {
    /// Randomly initialized query network; the key network starts as a copy.
    pub fn new(arch: &ArchConfig, m: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = QueryNet {
            backbone: Mlp::he_uniform(&arch.backbone_dims(), &mut rng),
            projection: Mlp::he_uniform(&arch.projection_dims(), &mut rng),
            prediction: Mlp::he_uniform(&arch.prediction_dims(), &mut rng),
        };
        Self::from_query(theta, m)
    }

    pub fn from_query(theta: QueryNet, m: f64) -> Result<Self> {
        let shapes_ok = theta.backbone.output_dim() == theta.projection.input_dim()
            && theta.projection.output_dim() == theta.prediction.input_dim()
            && theta.prediction.output_dim() == theta.projection.output_dim();
        if !shapes_ok {
            return Err(Error::ShapeMismatch("encoder stages do not chain".into()));
        }
        let xi = theta.key_copy();
        Ok(Self { theta, xi, m })
    }

    pub fn input_dim(&self) -> usize {
        self.theta.backbone.input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.theta.prediction.output_dim()
    }

    /// `z = normalize(prediction(projection(backbone(x))))` with a tape.
    pub fn forward_query(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let mut tape = Tape::default();
        let h = self.theta.backbone.forward_tape(x, &mut tape.backbone)?;
        let p = self
            .theta
            .projection
            .forward_tape(&h, &mut tape.projection)?;
        let q = self
            .theta
            .prediction
            .forward_tape(&p, &mut tape.prediction)?;
        let (z, len) = normalize_with_len(q.clone())?;
        tape.pre_norm = q;
        tape.pre_norm_len = len;
        tape.z = z.clone();
        Ok((z, tape))
    }

    /// `z′ = normalize(projection_ξ(backbone_ξ(x)))`; nothing is recorded.
    pub fn forward_key(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h = self.xi.backbone.forward(x)?;
        let p = self.xi.projection.forward(&h)?;
        crate::numerics::l2_normalize(&p)
    }

    /// Raw (unnormalized) features of the query network at `stage`.
    pub fn features(&self, x: &[f64], stage: Stage) -> Result<Vec<f64>> {
        let h = self.theta.backbone.forward(x)?;
        if stage == Stage::Backbone {
            return Ok(h);
        }
        let p = self.theta.projection.forward(&h)?;
        if stage == Stage::Projection {
            return Ok(p);
        }
        self.theta.prediction.forward(&p)
    }

    /// Accumulates `∂loss/∂θ` into `grads`, given `∂loss/∂z`.
    pub fn backward_into(&self, tape: &Tape, grad_z: &[f64], grads: &mut QueryNet) -> Result<()> {
        if tape.z.len() != self.embedding_dim() {
            return Err(Error::TapeMismatch("tape embedding width".into()));
        }
        check_dims(tape.z.len(), grad_z.len())?;
        // normalization Jacobian (I − z zᵀ) / ‖q‖
        let radial = dot_unchecked(&tape.z, grad_z);
        let g_q: Vec<f64> = grad_z
            .iter()
            .zip(&tape.z)
            .map(|(g, z)| (g - radial * z) / tape.pre_norm_len)
            .collect();
        let g_p = self
            .theta
            .prediction
            .backward(&tape.prediction, &g_q, &mut grads.prediction)?;
        let g_h = self
            .theta
            .projection
            .backward(&tape.projection, &g_p, &mut grads.projection)?;
        self.theta
            .backbone
            .backward(&tape.backbone, &g_h, &mut grads.backbone)?;
        Ok(())
    }

    pub fn backward(&self, tape: &Tape, grad_z: &[f64]) -> Result<QueryNet> {
        let mut grads = self.theta.zeros_like();
        self.backward_into(tape, grad_z, &mut grads)?;
        Ok(grads)
    }

    /// `ξ ← m·ξ + (1−m)·θ` over backbone and projection.
    pub fn ema_update(&mut self) {
        let m = self.m;
        let theta = [&self.theta.backbone, &self.theta.projection];
        let xi = [&mut self.xi.backbone, &mut self.xi.projection];
        for (t, x) in theta.into_iter().zip(xi) {
            for (tb, xb) in t.blocks().zip(x.blocks_mut()) {
                for (xv, tv) in xb.iter_mut().zip(tb) {
                    *xv = m * *xv + (1.0 - m) * tv;
                }
            }
        }
    }
}

/// SGD hyperparameters and per-parameter velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new<P: ParamBlocks>(params: &P, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: params
                .block_shapes()
                .into_iter()
                .map(|n| vec![0.0; n])
                .collect(),
        }
    }
}

/// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step<P: ParamBlocks>(params: &mut P, grads: &P, opt: &mut OptimState) -> Result<()> {
    let shapes = params.block_shapes();
    let vel_shapes: Vec<usize> = opt.velocity.iter().map(Vec::len).collect();
    if shapes != grads.block_shapes() || shapes != vel_shapes {
        return Err(Error::ShapeMismatch(
            "parameters, gradients and velocity disagree".into(),
        ));
    }
    let (lr, mu, wd) = (opt.lr, opt.momentum, opt.weight_decay);
    for ((p, g), v) in params
        .param_blocks_mut()
        .into_iter()
        .zip(grads.param_blocks())
        .zip(opt.velocity.iter_mut())
    {
        for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mu * *vi + (gi + wd * *pi);
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

fn cosine_fraction(step: u64, total: u64) -> Result<f64> {
    if step > total {
        return Err(Error::RangeError { step, total });
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok((1.0 + (PI * step as f64 / total as f64).cos()) / 2.0)
}

/// `base · (1 + cos(π·step/total)) / 2`
pub fn cosine_lr(step: u64, total: u64, base_lr: f64) -> Result<f64> {
    Ok(base_lr * cosine_fraction(step, total)?)
}

/// `1 − (1 − m0) · (1 + cos(π·step/total)) / 2`
pub fn cosine_momentum(step: u64, total: u64, m0: f64) -> Result<f64> {
    Ok(1.0 - (1.0 - m0) * cosine_fraction(step, total)?)
}
