//! MAE-style pretraining with a decoder tied to the encoder.
//!
//! Patch `p` is reconstructed as `c(θ)·Σ_r w_r·ReLU̅(⟨w_r, ε_p x_p⟩)`. With
//! `g_p = Σ_r w_r·y_{r,p}` the mask expectation is
//!
//! ```text
//! L(W; X) = ½ Σ_p ‖x_p − g_p‖² + ½((1−θ)/θ) Σ_p ‖g_p‖²
//! ```
//!
//! and, with `Δ_p = x_p − g_p/θ`, the exact gradient row is
//! `−∇_{w_r} L = Σ_p [y_{r,p}·Δ_p + y'_{r,p}·⟨w_r, Δ_p⟩·x_p]`.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::batch::{PatchBatch, DEFAULT_CHUNK};
use crate::dataset::{mask_patches, Dataset, LabeledSample, MaskVector};
use crate::error::{dim_check, LabError, Result};
use crate::network::{decoder_scale, ActivationParams, EncoderWeights};
use crate::pretrain_ts::{frobenius, guard};
use crate::probe::ProbeSet;
use crate::trace::TrainTrace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    pub theta: f64,
    pub eta: f64,
    #[serde(alias = "T")]
    pub iterations: usize,
    pub act: ActivationParams,
    pub log_every: usize,
    pub checkpoint_every: usize,
    /// Accept `q < 4`, outside the regime the MAE analysis covers.
    pub allow_low_q: bool,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            eta: 2.0,
            iterations: 3000,
            act: ActivationParams { q: 4, varrho: 0.2 },
            log_every: 100,
            checkpoint_every: 0,
            allow_low_q: false,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(LabError::Config(format!(
                "mae.theta = {} must lie in (0, 1]",
                self.theta
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(LabError::Config(format!("mae.eta = {} must be ≥ 0", self.eta)));
        }
        if self.iterations == 0 || self.log_every == 0 {
            return Err(LabError::Config(
                "mae.iterations and mae.log_every must be ≥ 1".into(),
            ));
        }
        self.act
            .validate()
            .map_err(|e| LabError::Config(format!("mae.act: {e}")))?;
        if self.act.q < 4 && !self.allow_low_q {
            return Err(LabError::Config(format!(
                "mae.act.q = {} is below 4; set mae.allow_low_q = true to run anyway",
                self.act.q
            )));
        }
        Ok(())
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(LabError::Domain(format!("theta = {theta} must lie in (0, 1]")));
    }
    Ok(())
}

/// `½ Σ_p ‖x_p − c(θ)·Σ_r w_r·ReLU̅(⟨w_r, ε_p x_p⟩)‖²`.
pub fn masked_loss_mae(
    w: &EncoderWeights,
    theta: f64,
    x: &LabeledSample,
    eps: &MaskVector,
    act: &ActivationParams,
) -> Result<f64> {
    let c = decoder_scale(theta)?;
    dim_check("patch dimension", w.dim(), x.dim())?;
    let masked = mask_patches(&x.patches.view(), eps)?;
    let mut total = 0.0;
    for (xp, mp) in x.patches.rows().into_iter().zip(masked.rows()) {
        let mut resid = xp.to_owned();
        for wr in w.kernels.rows() {
            let y = act.value(wr.dot(&mp));
            if y != 0.0 {
                resid.scaled_add(-c * y, &wr);
            }
        }
        total += resid.dot(&resid);
    }
    Ok(0.5 * total)
}

/// `g_p = Σ_r w_r·ReLU̅(⟨w_r, x_p⟩)` for one patch.
fn reconstruct(kernels: &ArrayView2<f64>, xp: &ndarray::ArrayView1<f64>, act: &ActivationParams) -> (Array1<f64>, Array1<f64>) {
    let pre = kernels.dot(xp);
    let y = pre.mapv(|a| act.value(a));
    (kernels.t().dot(&y), pre)
}

/// Closed-form mask expectation for raw kernel and patch matrices.
pub fn expected_loss_mae_raw(
    kernels: &ArrayView2<f64>,
    theta: f64,
    patches: &ArrayView2<f64>,
    act: &ActivationParams,
) -> Result<f64> {
    check_theta(theta)?;
    dim_check("patch dimension", kernels.ncols(), patches.ncols())?;
    let spread = (1.0 - theta) / theta;
    let mut total = 0.0;
    for xp in patches.rows() {
        let (g, _) = reconstruct(kernels, &xp, act);
        let resid = &xp - &g;
        total += resid.dot(&resid) + spread * g.dot(&g);
    }
    Ok(0.5 * total)
}

pub fn expected_loss_mae(
    w: &EncoderWeights,
    theta: f64,
    x: &LabeledSample,
    act: &ActivationParams,
) -> Result<f64> {
    expected_loss_mae_raw(&w.kernels.view(), theta, &x.patches.view(), act)
}

/// Exact gradient of [`expected_loss_mae`], patch by patch.
pub fn grad_mae(
    w: &EncoderWeights,
    theta: f64,
    x: &LabeledSample,
    act: &ActivationParams,
) -> Result<Array2<f64>> {
    check_theta(theta)?;
    dim_check("patch dimension", w.dim(), x.dim())?;
    let kernels = w.kernels.view();
    let mut grad = Array2::<f64>::zeros(w.kernels.raw_dim());
    for xp in x.patches.rows() {
        let (g, pre) = reconstruct(&kernels, &xp, act);
        let delta = &xp - &(&g / theta);
        for (r, &a) in pre.iter().enumerate() {
            let y = act.value(a);
            let yp = act.derivative(a);
            let mut row = grad.row_mut(r);
            if y != 0.0 {
                row.scaled_add(-y, &delta);
            }
            if yp != 0.0 {
                let proj = kernels.row(r).dot(&delta);
                row.scaled_add(-yp * proj, &xp);
            }
        }
    }
    Ok(grad)
}

/// Patch weights `A_{r,p} = y_{r,p} + y'_{r,p}·[⟨w_r, x_p⟩]^+` (`km × P`).
pub fn patch_weights(w: &EncoderWeights, x: &LabeledSample, act: &ActivationParams) -> Array2<f64> {
    let pre = w.kernels.dot(&x.patches.t());
    pre.mapv(|a| act.value(a) + act.derivative(a) * a.max(0.0))
}

/// The simplified descent direction `Σ_p A_{r,p}·Δ_p`, returned in gradient
/// convention. It keeps the `x_p` component of [`grad_mae`] exactly and
/// approximates the reconstruction component; useful as a diagnostic only.
pub fn grad_mae_simplified(
    w: &EncoderWeights,
    theta: f64,
    x: &LabeledSample,
    act: &ActivationParams,
) -> Result<Array2<f64>> {
    check_theta(theta)?;
    let kernels = w.kernels.view();
    let weights = patch_weights(w, x, act);
    let mut grad = Array2::<f64>::zeros(w.kernels.raw_dim());
    for (p, xp) in x.patches.rows().into_iter().enumerate() {
        let (g, _) = reconstruct(&kernels, &xp, act);
        let delta = &xp - &(&g / theta);
        for r in 0..w.num_kernels() {
            let a = weights[[r, p]];
            if a != 0.0 {
                grad.row_mut(r).scaled_add(-a, &delta);
            }
        }
    }
    Ok(grad)
}

/// Mean loss and gradient over a packed dataset, through the Gram form
///
/// ```text
/// L = ½‖x‖² − Σ_{p,r} y_{r,p}·a_{p,r} + (1/2θ)·Σ_p y_pᵀ (W Wᵀ) y_p
/// −∇W = (Y + Y'∘D)ᵀ X − (1/θ)(YᵀY) W,   D = A − (1/θ)·Y (W Wᵀ)
/// ```
///
/// which needs two patch-sized matrix products per chunk.
pub fn mae_objective(
    kernels: &ArrayView2<f64>,
    theta: f64,
    batch: &PatchBatch,
    act: &ActivationParams,
) -> Result<(f64, Array2<f64>)> {
    check_theta(theta)?;
    dim_check("patch dimension", kernels.ncols(), batch.dim)?;
    let inv = 1.0 / theta;
    let gram = kernels.dot(&kernels.t());
    let km = kernels.nrows();
    let mut loss = 0.0;
    let mut yty = Array2::<f64>::zeros((km, km));
    let mut grad = Array2::<f64>::zeros((km, batch.dim));
    for chunk in &batch.chunks {
        let pre = chunk.rows.dot(&kernels.t());
        let y = pre.mapv(|a| act.value(a));
        let yk = y.dot(&gram);
        loss += 0.5 * chunk.rows.iter().map(|v| v * v).sum::<f64>();
        loss -= (&y * &pre).sum();
        loss += 0.5 * inv * (&y * &yk).sum();
        let mut coef = y.clone();
        Zip::from(&mut coef)
            .and(&pre)
            .and(&yk)
            .for_each(|c, &a, &q| *c += act.derivative(a) * (a - inv * q));
        grad -= &coef.t().dot(&chunk.rows);
        yty += &y.t().dot(&y);
    }
    grad += &(yty.dot(kernels) * inv);
    let n = batch.num_samples as f64;
    grad /= n;
    Ok((loss / n, grad))
}

/// Full-batch gradient descent on the mask-expected MAE loss.
pub fn pretrain_mae(
    w0: &EncoderWeights,
    dataset: &Dataset,
    config: &MaeConfig,
    probes: &ProbeSet,
) -> Result<(EncoderWeights, TrainTrace)> {
    config.validate()?;
    let batch = PatchBatch::from_samples(&dataset.samples, DEFAULT_CHUNK)?;
    let mut w = w0.clone();
    let mut trace = TrainTrace::new("mae");
    let total = config.iterations;
    for t in 0..=total {
        let (loss, grad) = mae_objective(&w.kernels.view(), config.theta, &batch, &config.act)?;
        guard(t, loss)?;
        if t % config.log_every == 0 || t == total {
            let (rec, snap) = probes.record(t, loss, frobenius(&grad), &w)?;
            trace.records.push(rec);
            trace.snapshots.extend(snap);
        }
        if config.checkpoint_every > 0 && t % config.checkpoint_every == 0 {
            trace.checkpoints.push((t, w.clone()));
        }
        if t == total {
            break;
        }
        if config.eta != 0.0 {
            w.kernels.scaled_add(-config.eta, &grad);
        }
    }
    trace.check_lambda_growth(total / 10);
    Ok((w, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_feature_dictionary, sample_dataset, DataParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const ACT: ActivationParams = ActivationParams { q: 4, varrho: 0.2 };

    fn setup(seed: u64) -> (crate::dataset::FeatureDictionary, Dataset, EncoderWeights) {
        let params = DataParams {
            k: 3,
            d: 24,
            num_patches: 12,
            s: 1.0,
            ..DataParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dict = build_feature_dictionary(3, 24, &mut rng).unwrap();
        let data = sample_dataset(6, &dict, &params, &mut rng).unwrap();
        let w = EncoderWeights::gaussian(3, 2, 24, 0.4, &mut rng);
        (dict, data, w)
    }

    #[test]
    fn trivial_values() {
        let (_, data, w) = setup(1);
        let x = &data.samples[0];
        let half_norm = 0.5 * x.patches.iter().map(|v| v * v).sum::<f64>();
        let zero = EncoderWeights::zeros(3, 2, 24);
        let eps = MaskVector::all_ones(12);
        assert!((masked_loss_mae(&zero, 0.5, x, &eps, &ACT).unwrap() - half_norm).abs() < 1e-12);
        assert!((expected_loss_mae(&zero, 0.5, x, &ACT).unwrap() - half_norm).abs() < 1e-12);
        assert!(grad_mae(&zero, 0.5, x, &ACT).unwrap().iter().all(|&g| g == 0.0));

        let mut blank = x.clone();
        blank.patches.fill(0.0);
        assert_eq!(masked_loss_mae(&w, 0.5, &blank, &eps, &ACT).unwrap(), 0.0);

        // θ = 1 keeps only the reconstruction term
        let full = expected_loss_mae(&w, 1.0, x, &ACT).unwrap();
        assert!((full - masked_loss_mae(&w, 1.0, x, &eps, &ACT).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gram_path_matches_patch_path() {
        let (_, data, w) = setup(2);
        let batch = PatchBatch::from_samples(&data.samples, 4).unwrap();
        let (loss, grad) = mae_objective(&w.kernels.view(), 0.3, &batch, &ACT).unwrap();
        let n = data.len() as f64;
        let mut l2 = 0.0;
        let mut g2 = Array2::<f64>::zeros(grad.raw_dim());
        for x in &data.samples {
            l2 += expected_loss_mae(&w, 0.3, x, &ACT).unwrap() / n;
            g2.scaled_add(1.0 / n, &grad_mae(&w, 0.3, x, &ACT).unwrap());
        }
        assert!((loss - l2).abs() <= 1e-10 * l2.abs().max(1.0));
        for (a, b) in grad.iter().zip(g2.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn simplified_form_shares_sign_structure() {
        let (_, data, w) = setup(3);
        let x = &data.samples[0];
        let exact = grad_mae(&w, 0.5, x, &ACT).unwrap();
        let approx = grad_mae_simplified(&w, 0.5, x, &ACT).unwrap();
        assert_eq!(exact.raw_dim(), approx.raw_dim());
        let zero = EncoderWeights::zeros(3, 2, 24);
        assert!(patch_weights(&zero, x, &ACT).iter().all(|&a| a == 0.0));
    }

    #[test]
    fn config_checks_q() {
        let cfg = MaeConfig::default();
        assert!(cfg.validate().is_ok());
        let low = MaeConfig {
            act: ActivationParams { q: 3, varrho: 0.2 },
            ..cfg.clone()
        };
        assert!(matches!(low.validate(), Err(LabError::Config(_))));
        assert!(MaeConfig { allow_low_q: true, ..low }.validate().is_ok());
    }

    #[test]
    fn zero_rate_keeps_weights() {
        let (dict, data, w) = setup(4);
        let cfg = MaeConfig {
            eta: 0.0,
            iterations: 3,
            ..MaeConfig::default()
        };
        let (w_t, trace) = pretrain_mae(&w, &data, &cfg, &ProbeSet::new(&dict)).unwrap();
        assert_eq!(w_t, w);
        assert_eq!(trace.framework, "mae");
    }
}
