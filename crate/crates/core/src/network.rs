//! Smoothed-ReLU two-layer convolutional encoder, its scaled teacher, and
//! the linear classification head.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, LabError, Result};

/// Smoothed ReLU shape: `q`-th power ramp on `[0, ϱ]`, linear beyond.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationParams {
    pub q: u32,
    pub varrho: f64,
}

impl Default for ActivationParams {
    fn default() -> Self {
        Self { q: 3, varrho: 0.2 }
    }
}

impl ActivationParams {
    pub fn new(q: u32, varrho: f64) -> Result<Self> {
        let act = Self { q, varrho };
        act.validate()?;
        Ok(act)
    }

    pub fn validate(&self) -> Result<()> {
        if self.q < 2 {
            return Err(LabError::Argument(format!("q = {} must be at least 2", self.q)));
        }
        if !(self.varrho > 0.0 && self.varrho < 1.0) {
            return Err(LabError::Argument(format!(
                "varrho = {} must lie in (0, 1)",
                self.varrho
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn value(&self, z: f64) -> f64 {
        smoothed_relu(z, self)
    }

    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        smoothed_relu_prime(z, self)
    }
}

#[inline]
pub fn smoothed_relu(z: f64, act: &ActivationParams) -> f64 {
    let q = act.q as i32;
    if z <= 0.0 {
        0.0
    } else if z <= act.varrho {
        z.powi(q) / (act.q as f64 * act.varrho.powi(q - 1))
    } else {
        z - (1.0 - 1.0 / act.q as f64) * act.varrho
    }
}

#[inline]
pub fn smoothed_relu_prime(z: f64, act: &ActivationParams) -> f64 {
    if z <= 0.0 {
        0.0
    } else if z <= act.varrho {
        (z / act.varrho).powi(act.q as i32 - 1)
    } else {
        1.0
    }
}

/// Student encoder kernels, one `d`-vector per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    /// `(k·m) × d` kernel matrix.
    pub kernels: Array2<f64>,
    pub m: usize,
    pub sigma0: f64,
}

impl EncoderWeights {
    pub fn new(kernels: Array2<f64>, m: usize, sigma0: f64) -> Result<Self> {
        if m == 0 || !kernels.nrows().is_multiple_of(m) {
            return Err(LabError::Dimension(format!(
                "{} kernels is not a multiple of m = {m}",
                kernels.nrows()
            )));
        }
        Ok(Self {
            kernels,
            m,
            sigma0,
        })
    }

    /// `k·m` kernels with i.i.d. `N(0, σ₀²)` entries.
    pub fn gaussian<R: Rng + ?Sized>(k: usize, m: usize, d: usize, sigma0: f64, rng: &mut R) -> Self {
        let mut kernels = Array2::<f64>::zeros((k * m, d));
        for w in kernels.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *w = sigma0 * g;
        }
        Self {
            kernels,
            m,
            sigma0,
        }
    }

    pub fn zeros(k: usize, m: usize, d: usize) -> Self {
        Self {
            kernels: Array2::zeros((k * m, d)),
            m,
            sigma0: 0.0,
        }
    }

    pub fn num_kernels(&self) -> usize {
        self.kernels.nrows()
    }

    pub fn k(&self) -> usize {
        self.kernels.nrows() / self.m
    }

    pub fn dim(&self) -> usize {
        self.kernels.ncols()
    }

    /// Copy with every kernel multiplied by `tau`.
    pub fn scaled(&self, tau: f64) -> Self {
        Self {
            kernels: &self.kernels * tau,
            m: self.m,
            sigma0: self.sigma0,
        }
    }
}

/// Linear head `u_{i,r}`, a `k × (k·m)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub u: Array2<f64>,
}

impl HeadWeights {
    pub fn zeros(k: usize, num_kernels: usize) -> Self {
        Self {
            u: Array2::zeros((k, num_kernels)),
        }
    }

    pub fn k(&self) -> usize {
        self.u.nrows()
    }
}

pub(crate) fn encode(
    kernels: &ArrayView2<f64>,
    scale: f64,
    patches: &ArrayView2<f64>,
    act: &ActivationParams,
) -> Result<Array1<f64>> {
    dim_check("patch dimension", kernels.ncols(), patches.ncols())?;
    let pre = patches.dot(&kernels.t());
    let mut h = Array1::<f64>::zeros(kernels.nrows());
    for row in pre.rows() {
        for (hr, &a) in h.iter_mut().zip(row.iter()) {
            *hr += smoothed_relu(scale * a, act);
        }
    }
    Ok(h)
}

/// `h_r(X) = Σ_p ReLU̅(⟨w_r, x_p⟩)` for every kernel.
pub fn encoder_forward(
    w: &EncoderWeights,
    patches: &ArrayView2<f64>,
    act: &ActivationParams,
) -> Result<Array1<f64>> {
    encode(&w.kernels.view(), 1.0, patches, act)
}

/// Teacher output with kernels `τ·w_r`.
pub fn teacher_forward(
    w: &EncoderWeights,
    tau: f64,
    patches: &ArrayView2<f64>,
    act: &ActivationParams,
) -> Result<Array1<f64>> {
    if !(tau > 0.0) {
        return Err(LabError::Domain(format!("tau = {tau} must be positive")));
    }
    // ⟨τw, x⟩ = τ⟨w, x⟩, so scaling the pre-activation is exact
    encode(&w.kernels.view(), tau, patches, act)
}

/// Decoder coefficient `c(θ) = 1/θ`.
pub fn decoder_scale(theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(LabError::Domain(format!("theta = {theta} must lie in (0, 1]")));
    }
    Ok(1.0 / theta)
}

/// Max-shifted softmax.
pub fn softmax(logits: &ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = logits.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

/// `log Σ_j exp(F_j)` computed with max-subtraction.
pub fn log_sum_exp(logits: &ArrayView1<f64>) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Logits `F = U·h` and their softmax.
pub fn classifier_forward(
    w: &EncoderWeights,
    head: &HeadWeights,
    patches: &ArrayView2<f64>,
    act: &ActivationParams,
) -> Result<(Array1<f64>, Array1<f64>)> {
    dim_check("head width", w.num_kernels(), head.u.ncols())?;
    let h = encoder_forward(w, patches, act)?;
    let logits = head.u.dot(&h);
    let probs = softmax(&logits.view());
    Ok((logits, probs))
}

/// Argmax with ties broken towards the lowest index.
pub fn argmax(values: &ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
