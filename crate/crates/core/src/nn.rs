//! Two-layer MLP scorer with hand-written backprop, AdamW, a warmup+cosine
//! learning-rate schedule and global-norm gradient clipping.
//!
//! Parameters live in f64 in memory; checkpoints store them as f32.

use rand::Rng;

use crate::error::{KvpError, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// tanh approximation of GELU
    #[default]
    GeluTanh,
    /// erf form of GELU
    GeluErf,
}

impl Activation {
    pub fn id(self) -> u16 {
        match self {
            Activation::GeluTanh => 0,
            Activation::GeluErf => 1,
        }
    }

    pub fn from_id(id: u16) -> Result<Self> {
        match id {
            0 => Ok(Activation::GeluTanh),
            1 => Ok(Activation::GeluErf),
            other => Err(KvpError::Format(format!("unknown activation id {other}"))),
        }
    }

    /// Returns `(act(z), act'(z))`.
    #[inline]
    fn eval(self, z: f64) -> (f64, f64) {
        match self {
            Activation::GeluTanh => {
                const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
                const A: f64 = 0.044_715;
                let u = C * (z + A * z * z * z);
                let t = u.tanh();
                let y = 0.5 * z * (1.0 + t);
                let dy = 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * C * (1.0 + 3.0 * A * z * z);
                (y, dy)
            }
            Activation::GeluErf => {
                let cdf = 0.5 * (1.0 + libm::erf(z * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                (z * cdf, cdf + z * pdf)
            }
        }
    }
}

/// `score = w2 · act(w1 x + b1) + b2`. `w1` is row-major `[hidden, in_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub in_dim: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Bumped on every optimizer step; forward caches remember it.
    generation: u64,
}

impl MlpParams {
    pub fn zeros(in_dim: usize, hidden: usize, activation: Activation) -> Self {
        MlpParams {
            in_dim,
            hidden,
            activation,
            w1: vec![0.0; hidden * in_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: vec![0.0; 1],
            generation: 0,
        }
    }

    /// Fan-in uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` per layer.
    pub fn init(in_dim: usize, hidden: usize, activation: Activation, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[0x4D4C50]);
        let mut p = Self::zeros(in_dim, hidden, activation);
        let a1 = (1.0 / in_dim as f64).sqrt();
        let a2 = (1.0 / hidden as f64).sqrt();
        p.w1.iter_mut().chain(p.b1.iter_mut()).for_each(|w| *w = r.random_range(-a1..a1));
        p.w2.iter_mut().chain(p.b2.iter_mut()).for_each(|w| *w = r.random_range(-a2..a2));
        p
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// A zero tensor set with this shape, used for gradients and moments.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim, self.hidden, self.activation)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Rounds every parameter through f32.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    /// Scores only, no cache.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let w1t = self.w1_transposed();
        let mut z = vec![0.0; self.hidden];
        Ok(x.chunks_exact(self.in_dim)
            .map(|row| {
                self.hidden_pre(&w1t, row, &mut z);
                let mut s = self.b2[0];
                for (zz, w) in z.iter().zip(&self.w2) {
                    s += w * self.activation.eval(*zz).0;
                }
                s
            })
            .collect())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if !x.len().is_multiple_of(self.in_dim) {
            return Err(KvpError::Shape(format!(
                "input of {} values is not a whole number of {}-wide rows",
                x.len(),
                self.in_dim
            )));
        }
        Ok(())
    }

    /// `w1` as column-major `[in_dim, hidden]`, so a row's pre-activations
    /// accumulate as contiguous, vectorizable updates.
    fn w1_transposed(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.w1.len()];
        for (h, row) in self.w1.chunks_exact(self.in_dim).enumerate() {
            for (j, &w) in row.iter().enumerate() {
                t[j * self.hidden + h] = w;
            }
        }
        t
    }

    /// `z = w1 row + b1`. Each unit sums its inputs in index order before
    /// adding the bias, exactly like a plain dot product.
    #[inline]
    fn hidden_pre(&self, w1t: &[f64], row: &[f64], z: &mut [f64]) {
        z.fill(-0.0);
        for (&x, col) in row.iter().zip(w1t.chunks_exact(self.hidden)) {
            for (zh, &w) in z.iter_mut().zip(col) {
                *zh += w * x;
            }
        }
        for (zh, b) in z.iter_mut().zip(&self.b1) {
            *zh += b;
        }
    }
}

/// Activations kept by [`mlp_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<f64>,
    /// act(z), `[n, hidden]`
    act: Vec<f64>,
    /// act'(z), `[n, hidden]`
    dact: Vec<f64>,
    n: usize,
    generation: u64,
    in_dim: usize,
    hidden: usize,
}

impl ForwardCache {
    pub fn rows(&self) -> usize {
        self.n
    }
}

/// Scores every row of `x` (row-major `[n, in_dim]`).
pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    params.check_input(x)?;
    let n = x.len() / params.in_dim;
    let hdim = params.hidden;
    let mut act = vec![0.0; n * hdim];
    let mut dact = vec![0.0; n * hdim];
    let mut scores = Vec::with_capacity(n);
    let w1t = params.w1_transposed();
    let mut z = vec![0.0; hdim];
    for (r, row) in x.chunks_exact(params.in_dim).enumerate() {
        params.hidden_pre(&w1t, row, &mut z);
        let mut s = params.b2[0];
        for h in 0..hdim {
            let (a, da) = params.activation.eval(z[h]);
            act[r * hdim + h] = a;
            dact[r * hdim + h] = da;
            s += params.w2[h] * a;
        }
        scores.push(s);
    }
    let cache = ForwardCache {
        inputs: x.to_vec(),
        act,
        dact,
        n,
        generation: params.generation,
        in_dim: params.in_dim,
        hidden: params.hidden,
    };
    Ok((scores, cache))
}

/// Gradient of `sum_i dscores[i] * scores[i]` with respect to every parameter.
pub fn mlp_backward(params: &MlpParams, cache: &ForwardCache, dscores: &[f64]) -> Result<MlpParams> {
    if cache.generation != params.generation || cache.in_dim != params.in_dim || cache.hidden != params.hidden {
        return Err(KvpError::Usage("forward cache is stale for these parameters".into()));
    }
    if dscores.len() != cache.n {
        return Err(KvpError::Shape(format!("{} score gradients for {} rows", dscores.len(), cache.n)));
    }
    let (d, hdim) = (params.in_dim, params.hidden);
    let mut grad = params.zeros_like();
    let mut dz = vec![0.0; hdim];
    for (r, &ds) in dscores.iter().enumerate() {
        if ds == 0.0 {
            continue;
        }
        grad.b2[0] += ds;
        let act = &cache.act[r * hdim..(r + 1) * hdim];
        let dact = &cache.dact[r * hdim..(r + 1) * hdim];
        for h in 0..hdim {
            grad.w2[h] += ds * act[h];
            dz[h] = ds * params.w2[h] * dact[h];
            grad.b1[h] += dz[h];
        }
        let x = &cache.inputs[r * d..(r + 1) * d];
        for (h, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &mut grad.w1[h * d..(h + 1) * d];
            for (w, &xi) in row.iter_mut().zip(x) {
                *w += g * xi;
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub m: MlpParams,
    pub v: MlpParams,
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: &MlpParams, config: AdamWConfig) -> Self {
        AdamWState { config, m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One decoupled-weight-decay Adam update. Non-finite gradients abort the
/// step and leave both params and state untouched.
pub fn adamw_step(state: &mut AdamWState, params: &mut MlpParams, grads: &MlpParams, lr: f64) -> Result<()> {
    if grads.w1.len() != params.w1.len() || grads.w2.len() != params.w2.len() {
        return Err(KvpError::Shape("gradient shape differs from parameters".into()));
    }
    if !grads.is_finite() {
        return Err(KvpError::Numeric("non-finite gradient; step aborted".into()));
    }
    state.step += 1;
    let c = &state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - lr * c.weight_decay;

    let [pw1, pb1, pw2, pb2] = params.tensors_mut();
    let [mw1, mb1, mw2, mb2] = state.m.tensors_mut();
    let [vw1, vb1, vw2, vb2] = state.v.tensors_mut();
    for ((p, m), (v, g)) in [pw1, pb1, pw2, pb2]
        .into_iter()
        .zip([mw1, mb1, mw2, mb2])
        .zip([vw1, vb1, vw2, vb2].into_iter().zip(grads.tensors()))
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    params.generation += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub warmup_start_factor: f64,
    pub final_lr: f64,
    pub total_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { base_lr: 5e-5, warmup_steps: 100, warmup_start_factor: 0.01, final_lr: 1e-6, total_steps: 4000 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.final_lr > 0.0 && self.final_lr <= self.base_lr) {
            return Err(KvpError::Config(format!(
                "need 0 < final_lr ({}) <= base_lr ({})",
                self.final_lr, self.base_lr
            )));
        }
        if self.warmup_steps >= self.total_steps && self.total_steps > 0 {
            return Err(KvpError::Config(format!(
                "warmup_steps ({}) must be < total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Linear warmup from `base_lr * warmup_start_factor` to `base_lr`, cosine
    /// decay to `final_lr` at `total_steps`, then flat.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return self.final_lr;
        }
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            let factor = self.warmup_start_factor + (1.0 - self.warmup_start_factor) * t;
            // dividing by the reciprocal keeps decimal factors like 0.01 exact
            return self.base_lr / factor.recip();
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        let drop = 0.5 * (1.0 - (std::f64::consts::PI * progress).cos());
        self.base_lr - (self.base_lr - self.final_lr) * drop
    }
}

/// Global L2 norm over all gradient tensors.
pub fn grad_norm(grads: &MlpParams) -> f64 {
    grads.tensors().iter().flat_map(|t| t.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut MlpParams, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
