//! The three-layer head (linear → batch-norm → ReLU → linear), its exact
//! backward pass, the Adam optimizer, and the optional affine encoder adapter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const DEFAULT_HIDDEN: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics; running averages are refreshed by
    /// [`HeadParams::update_running_stats`].
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `H × D`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
    /// `C × H`
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache {
    pub mode: Mode,
    pub input: Matrix,
    /// `w1·z + b1`
    pub pre_bn: Matrix,
    /// Mean and (biased) variance that normalized `pre_bn`.
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub normalized: Matrix,
    /// `gamma·normalized + beta`, i.e. the ReLU input.
    pub bn_out: Matrix,
    pub hidden: Matrix,
    pub logits: Matrix,
}

/// Gradients for every trainable head parameter plus the head input.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub input: Matrix,
}

impl HeadGrads {
    pub fn slices(&self) -> [&[f64]; 6] {
        [
            self.w1.data(),
            &self.b1,
            &self.bn_gamma,
            &self.bn_beta,
            self.w2.data(),
            &self.b2,
        ]
    }
}

impl HeadParams {
    /// All-zero weights with neutral batch-norm state.
    pub fn zeros(d: usize, h: usize, c: usize) -> Self {
        Self {
            w1: Matrix::zeros(h, d),
            b1: vec![0.0; h],
            bn_gamma: vec![1.0; h],
            bn_beta: vec![0.0; h],
            bn_running_mean: vec![0.0; h],
            bn_running_var: vec![1.0; h],
            w2: Matrix::zeros(c, h),
            b2: vec![0.0; c],
        }
    }

    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn random(d: usize, h: usize, c: usize, rng: &mut RngState) -> Self {
        let mut p = Self::zeros(d, h, c);
        let mut fill = |v: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for x in v {
                *x = (2.0 * rng.next_f64() - 1.0) * bound;
            }
        };
        fill(p.w1.data_mut(), d);
        fill(&mut p.b1, d);
        fill(p.w2.data_mut(), h);
        fill(&mut p.b2, h);
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn classes(&self) -> usize {
        self.w2.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, c) = (self.input_dim(), self.hidden_dim(), self.classes());
        let ok = self.b1.len() == h
            && self.bn_gamma.len() == h
            && self.bn_beta.len() == h
            && self.bn_running_mean.len() == h
            && self.bn_running_var.len() == h
            && self.w2.cols() == h
            && self.b2.len() == c;
        if !ok {
            return Err(Error::invalid(format!(
                "head parameter shapes inconsistent with D={d}, H={h}, C={c}"
            )));
        }
        if self.bn_running_var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("running variance must be positive"));
        }
        Ok(())
    }

    /// Trainable parameters in a fixed order: w1, b1, gamma, beta, w2, b2.
    pub fn trainable(&self) -> [&[f64]; 6] {
        [
            self.w1.data(),
            &self.b1,
            &self.bn_gamma,
            &self.bn_beta,
            self.w2.data(),
            &self.b2,
        ]
    }

    pub fn trainable_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.data_mut(),
            &mut self.b1,
            &mut self.bn_gamma,
            &mut self.bn_beta,
            self.w2.data_mut(),
            &mut self.b2,
        ]
    }

    /// `logits = w2·ReLU(BN(w1·z + b1)) + b2`. Does not touch the running
    /// statistics; see [`Self::update_running_stats`].
    pub fn forward(&self, z: &Matrix, mode: Mode) -> Result<(Matrix, ForwardCache)> {
        if z.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "head expects {} input columns, got {}",
                self.input_dim(),
                z.cols()
            )));
        }
        let b = z.rows();
        if mode == Mode::Train && b < 2 {
            return Err(Error::invalid("train-mode batch norm needs at least 2 samples"));
        }
        let h = self.hidden_dim();
        let mut pre_bn = z.matmul_nt(&self.w1)?;
        pre_bn.add_row_vector(&self.b1);

        let (mean, var) = match mode {
            Mode::Train => batch_moments(&pre_bn),
            Mode::Eval => (self.bn_running_mean.clone(), self.bn_running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

        let mut normalized = Matrix::zeros(b, h);
        let mut bn_out = Matrix::zeros(b, h);
        let mut hidden = Matrix::zeros(b, h);
        for i in 0..b {
            let a = pre_bn.row(i);
            for j in 0..h {
                let xh = (a[j] - mean[j]) * inv_std[j];
                let y = self.bn_gamma[j] * xh + self.bn_beta[j];
                normalized.set(i, j, xh);
                bn_out.set(i, j, y);
                hidden.set(i, j, if y > 0.0 { y } else { 0.0 });
            }
        }
        let mut logits = hidden.matmul_nt(&self.w2)?;
        logits.add_row_vector(&self.b2);

        let cache = ForwardCache {
            mode,
            input: z.clone(),
            pre_bn,
            mean,
            var,
            inv_std,
            normalized,
            bn_out,
            hidden,
            logits: logits.clone(),
        };
        Ok((logits, cache))
    }

    /// Momentum update of the running statistics from a train-mode cache.
    /// The running variance tracks the unbiased batch variance.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let b = cache.input.rows() as f64;
        let unbias = b / (b - 1.0);
        for j in 0..self.hidden_dim() {
            self.bn_running_mean[j] = (1.0 - BN_MOMENTUM) * self.bn_running_mean[j] + BN_MOMENTUM * cache.mean[j];
            self.bn_running_var[j] = (1.0 - BN_MOMENTUM) * self.bn_running_var[j] + BN_MOMENTUM * cache.var[j] * unbias;
        }
    }

    /// Exact gradients of a scalar loss given `dL/dlogits`, including the
    /// batch-norm path through the batch mean and variance in train mode.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<HeadGrads> {
        let b = cache.input.rows();
        let h = self.hidden_dim();
        if dlogits.rows() != b || dlogits.cols() != self.classes() {
            return Err(Error::invalid(format!(
                "dlogits is {}x{}, expected {}x{}",
                dlogits.rows(),
                dlogits.cols(),
                b,
                self.classes()
            )));
        }
        if cache.hidden.cols() != h {
            return Err(Error::invalid("forward cache does not match these parameters"));
        }

        let w2 = dlogits.matmul_tn(&cache.hidden)?;
        let b2 = dlogits.col_sums();
        let mut dy = dlogits.matmul(&self.w2)?;
        for (g, y) in dy.data_mut().iter_mut().zip(cache.bn_out.data()) {
            if *y <= 0.0 {
                *g = 0.0;
            }
        }

        let mut gamma = vec![0.0; h];
        let mut beta = vec![0.0; h];
        for i in 0..b {
            let g = dy.row(i);
            let xh = cache.normalized.row(i);
            for j in 0..h {
                gamma[j] += g[j] * xh[j];
                beta[j] += g[j];
            }
        }

        // dxhat = dy·gamma; gamma's sum equals Σ dy·xhat, beta's Σ dy.
        let mut da = dy;
        match cache.mode {
            Mode::Eval => {
                for row in da.data_mut().chunks_exact_mut(h) {
                    for j in 0..h {
                        row[j] *= self.bn_gamma[j] * cache.inv_std[j];
                    }
                }
            }
            Mode::Train => {
                let bf = b as f64;
                for i in 0..b {
                    let xh = cache.normalized.row(i).to_vec();
                    let row = da.row_mut(i);
                    for j in 0..h {
                        let g = self.bn_gamma[j];
                        let dxhat = row[j] * g;
                        row[j] = cache.inv_std[j] / bf * (bf * dxhat - g * beta[j] - xh[j] * g * gamma[j]);
                    }
                }
            }
        }

        let w1 = da.matmul_tn(&cache.input)?;
        let b1 = da.col_sums();
        let input = da.matmul(&self.w1)?;
        Ok(HeadGrads {
            w1,
            b1,
            bn_gamma: gamma,
            bn_beta: beta,
            w2,
            b2,
            input,
        })
    }
}

/// Per-column mean and biased variance. Accumulates offsets from the first
/// row, so a constant column has exactly zero spread.
fn batch_moments(a: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = a.rows() as f64;
    let origin = a.row(0);
    let mut shift = vec![0.0; a.cols()];
    for row in a.row_iter() {
        for ((s, x), o) in shift.iter_mut().zip(row).zip(origin) {
            *s += x - o;
        }
    }
    let mean: Vec<f64> = origin.iter().zip(&shift).map(|(o, s)| o + s / n).collect();
    let mut var = vec![0.0; a.cols()];
    for row in a.row_iter() {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = x - m;
            *v += d * d;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}

/// Bias-corrected Adam over a fixed list of parameter slices.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh state shaped like `params`, with beta1 0.9, beta2 0.999, eps 1e-8.
    pub fn new(lr: f64, params: &[&[f64]]) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn for_head(lr: f64, head: &HeadParams) -> Self {
        Self::new(lr, &head.trainable())
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::invalid("adam: parameter group count mismatch"));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first_moment[k].len() {
                return Err(Error::invalid(format!("adam: shape mismatch in group {k}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[k];
            let v = &mut self.second_moment[k];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Identity,
    Adapter,
}

/// Trainable stage between the stored features and the heads.
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderParams {
    Identity,
    /// `x ↦ x·weightᵀ + bias`, `weight` is `D × D`.
    Adapter {
        weight: Matrix,
        bias: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl EncoderParams {
    /// Identity-initialized encoder of the given mode.
    pub fn new(mode: EncoderMode, d: usize) -> Self {
        match mode {
            EncoderMode::Identity => EncoderParams::Identity,
            EncoderMode::Adapter => EncoderParams::Adapter {
                weight: Matrix::identity(d),
                bias: vec![0.0; d],
            },
        }
    }

    pub fn mode(&self) -> EncoderMode {
        match self {
            EncoderParams::Identity => EncoderMode::Identity,
            EncoderParams::Adapter { .. } => EncoderMode::Adapter,
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            EncoderParams::Identity => Ok(x.clone()),
            EncoderParams::Adapter { weight, bias } => {
                if x.cols() != weight.cols() {
                    return Err(Error::invalid(format!(
                        "encoder expects {} columns, got {}",
                        weight.cols(),
                        x.cols()
                    )));
                }
                let mut out = x.matmul_nt(weight)?;
                out.add_row_vector(bias);
                Ok(out)
            }
        }
    }

    /// Parameter gradients given the encoder input and `dL/doutput`.
    /// `None` in identity mode.
    pub fn backward(&self, x: &Matrix, dout: &Matrix) -> Result<Option<EncoderGrads>> {
        match self {
            EncoderParams::Identity => Ok(None),
            EncoderParams::Adapter { .. } => Ok(Some(EncoderGrads {
                weight: dout.matmul_tn(x)?,
                bias: dout.col_sums(),
            })),
        }
    }

    pub fn trainable(&self) -> Vec<&[f64]> {
        match self {
            EncoderParams::Identity => Vec::new(),
            EncoderParams::Adapter { weight, bias } => vec![weight.data(), bias],
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            EncoderParams::Identity => Vec::new(),
            EncoderParams::Adapter { weight, bias } => vec![weight.data_mut(), bias],
        }
    }
}
