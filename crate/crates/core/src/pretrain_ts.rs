//! Teacher-student mask-reconstruction pretraining.
//!
//! The student `W` reconstructs, from a masked input, the representation a
//! teacher with kernels `τ·W` produces on the full input. The mask
//! expectation is taken in closed form, so a training step is one
//! full-batch gradient of
//!
//! ```text
//! L(W; X) = ½ Σ_r Φ_r(X)² + ½(1/θ − 1) Σ_r Σ_p ReLU̅(⟨w_r, x_p⟩)²
//! Φ_r(X)  = Σ_p [ReLU̅(⟨τw_r, x_p⟩) − ReLU̅(⟨w_r, x_p⟩)]
//! ```
//!
//! The teacher is a stop-gradient copy: derivatives flow through the
//! student branch only.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::batch::{PatchBatch, DEFAULT_CHUNK};
use crate::dataset::{mask_patches, Dataset, LabeledSample, MaskVector};
use crate::error::{dim_check, LabError, Result};
use crate::network::{decoder_scale, encode, ActivationParams, EncoderWeights};
use crate::probe::ProbeSet;
use crate::trace::TrainTrace;

/// Loss above which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    /// `c1 / (t + 1)`
    InverseT,
    /// `c1 / (t^{1/q} + 1)`
    #[default]
    InverseTPow1OverQ,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsConfig {
    pub theta: f64,
    pub eta: f64,
    #[serde(alias = "T")]
    pub iterations: usize,
    pub tau_c1: f64,
    pub tau_mode: TauMode,
    pub act: ActivationParams,
    pub log_every: usize,
    /// Keep weights every this many iterations (0 keeps none).
    pub checkpoint_every: usize,
}

impl Default for TsConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            eta: 0.003,
            iterations: 3000,
            tau_c1: 1.0,
            tau_mode: TauMode::default(),
            act: ActivationParams::default(),
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(LabError::Config(format!(
                "pretrain.theta = {} must lie in (0, 1]",
                self.theta
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(LabError::Config(format!("pretrain.eta = {} must be ≥ 0", self.eta)));
        }
        if self.iterations == 0 {
            return Err(LabError::Config("pretrain.iterations must be ≥ 1".into()));
        }
        if !(self.tau_c1 >= 0.0) {
            return Err(LabError::Config(format!(
                "pretrain.tau_c1 = {} must be ≥ 0",
                self.tau_c1
            )));
        }
        if self.log_every == 0 {
            return Err(LabError::Config("pretrain.log_every must be ≥ 1".into()));
        }
        self.act
            .validate()
            .map_err(|e| LabError::Config(format!("pretrain.act: {e}")))
    }
}

/// `τ_t = 1 + (1−θ)/(Cp·θ) + c1·g(t)` with `g` chosen by `mode`.
pub fn tau_schedule(t: usize, theta: f64, cp: usize, config: &TsConfig) -> f64 {
    let base = 1.0 + (1.0 - theta) / (cp as f64 * theta);
    let t = t as f64;
    let decay = match config.tau_mode {
        TauMode::InverseT => 1.0 / (t + 1.0),
        TauMode::InverseTPow1OverQ => 1.0 / (t.powf(1.0 / config.act.q as f64) + 1.0),
    };
    base + config.tau_c1 * decay
}

/// `½ Σ_r (ĥ_r(X) − c(θ)·h_r(εX))²` for one mask.
pub fn masked_loss_ts(
    w: &EncoderWeights,
    tau: f64,
    theta: f64,
    x: &LabeledSample,
    eps: &MaskVector,
    act: &ActivationParams,
) -> Result<f64> {
    let c = decoder_scale(theta)?;
    let teacher = encode(&w.kernels.view(), tau, &x.patches.view(), act)?;
    let masked = mask_patches(&x.patches.view(), eps)?;
    let student = encode(&w.kernels.view(), 1.0, &masked.view(), act)?;
    Ok(0.5
        * teacher
            .iter()
            .zip(student.iter())
            .map(|(t, s)| (t - c * s).powi(2))
            .sum::<f64>())
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(LabError::Domain(format!("theta = {theta} must lie in (0, 1]")));
    }
    Ok(())
}

/// Closed-form mask expectation with an explicit teacher kernel matrix.
pub fn expected_loss_ts_with_teacher(
    student: &ArrayView2<f64>,
    teacher: &ArrayView2<f64>,
    theta: f64,
    patches: &ArrayView2<f64>,
    act: &ActivationParams,
) -> Result<f64> {
    check_theta(theta)?;
    dim_check("teacher kernels", student.nrows(), teacher.nrows())?;
    let h_teacher = encode(teacher, 1.0, patches, act)?;
    let pre = patches.dot(&student.t());
    let spread = 1.0 / theta - 1.0;
    let mut h = Array1::<f64>::zeros(student.nrows());
    let mut sq = 0.0;
    for row in pre.rows() {
        for (hr, &a) in h.iter_mut().zip(row.iter()) {
            let y = act.value(a);
            *hr += y;
            sq += y * y;
        }
    }
    let phi2: f64 = h_teacher.iter().zip(h.iter()).map(|(t, s)| (t - s).powi(2)).sum();
    Ok(0.5 * phi2 + 0.5 * spread * sq)
}

/// `E_ε[masked_loss_ts]` in closed form.
pub fn expected_loss_ts(
    w: &EncoderWeights,
    tau: f64,
    theta: f64,
    x: &LabeledSample,
    act: &ActivationParams,
) -> Result<f64> {
    let teacher = &w.kernels * tau;
    expected_loss_ts_with_teacher(&w.kernels.view(), &teacher.view(), theta, &x.patches.view(), act)
}

/// Gradient of [`expected_loss_ts`] in `W` with the teacher held fixed:
/// row `r` is `−Σ_p (Φ_r − (1/θ − 1)·y_{r,p})·y'_{r,p}·x_p`.
pub fn grad_ts(
    w: &EncoderWeights,
    tau: f64,
    theta: f64,
    x: &LabeledSample,
    act: &ActivationParams,
) -> Result<Array2<f64>> {
    check_theta(theta)?;
    dim_check("patch dimension", w.dim(), x.dim())?;
    let km = w.num_kernels();
    let spread = 1.0 / theta - 1.0;
    let mut grad = Array2::<f64>::zeros((km, w.dim()));
    for r in 0..km {
        let wr = w.kernels.row(r);
        let pre: Vec<f64> = x.patches.rows().into_iter().map(|xp| wr.dot(&xp)).collect();
        let phi: f64 = pre.iter().map(|&a| act.value(tau * a) - act.value(a)).sum();
        let mut g = grad.row_mut(r);
        for (p, &a) in pre.iter().enumerate() {
            let coef = (phi - spread * act.value(a)) * act.derivative(a);
            if coef != 0.0 {
                g.scaled_add(-coef, &x.patches.row(p));
            }
        }
    }
    Ok(grad)
}

/// Mean loss and mean gradient over a packed dataset.
pub fn ts_objective(
    kernels: &ArrayView2<f64>,
    tau: f64,
    theta: f64,
    batch: &PatchBatch,
    act: &ActivationParams,
) -> Result<(f64, Array2<f64>)> {
    check_theta(theta)?;
    dim_check("patch dimension", kernels.ncols(), batch.dim)?;
    let km = kernels.nrows();
    let p = batch.num_patches;
    let spread = 1.0 / theta - 1.0;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((km, batch.dim));
    for chunk in &batch.chunks {
        let pre = chunk.rows.dot(&kernels.t());
        let mut coef = Array2::<f64>::zeros(pre.raw_dim());
        let mut phi = vec![0.0; km];
        for n in 0..chunk.num_samples() {
            phi.iter_mut().for_each(|v| *v = 0.0);
            let mut sq = 0.0;
            for row in n * p..(n + 1) * p {
                for (r, &a) in pre.row(row).iter().enumerate() {
                    let y = act.value(a);
                    phi[r] += act.value(tau * a) - y;
                    sq += y * y;
                }
            }
            loss += 0.5 * phi.iter().map(|v| v * v).sum::<f64>() + 0.5 * spread * sq;
            for row in n * p..(n + 1) * p {
                Zip::from(coef.row_mut(row))
                    .and(pre.row(row))
                    .and(&phi[..])
                    .for_each(|c, &a, &f| {
                        *c = -(f - spread * act.value(a)) * act.derivative(a);
                    });
            }
        }
        grad += &coef.t().dot(&chunk.rows);
    }
    let n = batch.num_samples as f64;
    grad /= n;
    Ok((loss / n, grad))
}

pub(crate) fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn guard(t: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(LabError::Divergence { iteration: t, loss });
    }
    Ok(())
}

/// Full-batch gradient descent on the mask-expected loss with the
/// scheduled teacher scale `τ_t`.
pub fn pretrain_ts(
    w0: &EncoderWeights,
    dataset: &Dataset,
    config: &TsConfig,
    probes: &ProbeSet,
) -> Result<(EncoderWeights, TrainTrace)> {
    config.validate()?;
    let batch = PatchBatch::from_samples(&dataset.samples, DEFAULT_CHUNK)?;
    let cp = dataset.params.cp;
    let mut w = w0.clone();
    let mut trace = TrainTrace::new("ts");
    let total = config.iterations;
    for t in 0..=total {
        let tau = tau_schedule(t, config.theta, cp, config);
        let (loss, grad) = ts_objective(&w.kernels.view(), tau, config.theta, &batch, &config.act)?;
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
        let data = sample_dataset(7, &dict, &params, &mut rng).unwrap();
        let w = EncoderWeights::gaussian(3, 2, 24, 0.4, &mut rng);
        (dict, data, w)
    }

    #[test]
    fn tau_values() {
        let mut cfg = TsConfig {
            tau_mode: TauMode::InverseT,
            ..TsConfig::default()
        };
        assert!((tau_schedule(0, 0.5, 2, &cfg) - 2.5).abs() < 1e-15);
        assert!((tau_schedule(10_000_000, 0.5, 2, &cfg) - 1.5).abs() < 1e-6);
        cfg.tau_c1 = 0.0;
        assert_eq!(tau_schedule(3, 1.0, 5, &cfg), 1.0);
        cfg.tau_mode = TauMode::InverseTPow1OverQ;
        cfg.tau_c1 = 1.0;
        assert!((tau_schedule(8, 0.5, 2, &cfg) - (1.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_and_trivial_masks() {
        let (_, data, w) = setup(1);
        let act = ActivationParams::default();
        let x = &data.samples[0];
        let zero = EncoderWeights::zeros(3, 2, 24);
        let eps = MaskVector::all_ones(12);
        assert_eq!(masked_loss_ts(&zero, 1.7, 0.5, x, &eps, &act).unwrap(), 0.0);
        assert_eq!(expected_loss_ts(&zero, 1.7, 0.5, x, &act).unwrap(), 0.0);
        assert!(grad_ts(&zero, 1.7, 0.5, x, &act).unwrap().iter().all(|&g| g == 0.0));
        assert_eq!(masked_loss_ts(&w, 1.0, 1.0, x, &eps, &act).unwrap(), 0.0);
        assert_eq!(expected_loss_ts(&w, 1.0, 1.0, x, &act).unwrap(), 0.0);
        assert!(expected_loss_ts(&w, 1.0, 0.0, x, &act).is_err());
    }

    #[test]
    fn batched_matches_per_sample() {
        let (_, data, w) = setup(2);
        let act = ActivationParams::default();
        let batch = PatchBatch::from_samples(&data.samples, 3).unwrap();
        let (loss, grad) = ts_objective(&w.kernels.view(), 1.8, 0.4, &batch, &act).unwrap();
        let n = data.len() as f64;
        let mut l2 = 0.0;
        let mut g2 = Array2::<f64>::zeros(grad.raw_dim());
        for x in &data.samples {
            l2 += expected_loss_ts(&w, 1.8, 0.4, x, &act).unwrap() / n;
            g2.scaled_add(1.0 / n, &grad_ts(&w, 1.8, 0.4, x, &act).unwrap());
        }
        assert!((loss - l2).abs() <= 1e-12 * l2.abs().max(1.0));
        for (a, b) in grad.iter().zip(g2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rate_and_single_step() {
        let (dict, data, w) = setup(3);
        let probes = ProbeSet::new(&dict);
        let cfg = TsConfig {
            eta: 0.0,
            iterations: 4,
            log_every: 1,
            ..TsConfig::default()
        };
        let (w_t, trace) = pretrain_ts(&w, &data, &cfg, &probes).unwrap();
        assert_eq!(w_t, w);
        assert_eq!(trace.records.len(), 5);

        let cfg = TsConfig {
            eta: 0.05,
            iterations: 1,
            ..TsConfig::default()
        };
        let (w1, _) = pretrain_ts(&w, &data, &cfg, &probes).unwrap();
        let tau = tau_schedule(0, 0.5, data.params.cp, &cfg);
        let act = cfg.act;
        let mut expect = w.kernels.clone();
        let n = data.len() as f64;
        for x in &data.samples {
            expect.scaled_add(-0.05 / n, &grad_ts(&w, tau, 0.5, x, &act).unwrap());
        }
        for (a, b) in w1.kernels.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        let ok = TsConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TsConfig { theta: 1.0, ..ok.clone() }.validate().is_ok());
        assert!(TsConfig { theta: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TsConfig { iterations: 0, ..ok.clone() }.validate().is_err());
        let parsed: TsConfig = toml::from_str("theta = 0.3\nT = 10").unwrap();
        assert_eq!(parsed.iterations, 10);
        assert!(toml::from_str::<TsConfig>("thetta = 0.3").is_err());
    }
}
