//! Cross-entropy fine-tuning of encoder plus linear head, the
//! supervised-from-scratch baseline, and evaluation split by view.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{sum_patch_blocks, PatchBatch, DEFAULT_CHUNK};
use crate::dataset::{Dataset, LabeledSample};
use crate::error::{dim_check, LabError, Result};
use crate::network::{
    argmax, classifier_forward, encoder_forward, log_sum_exp, softmax, ActivationParams,
    EncoderWeights, HeadWeights,
};
use crate::pretrain_ts::guard;
use crate::probe::{correlation_matrix, lambda_scores, ProbeSet};
use crate::trace::{FinetuneRecord, FinetuneTrace};

/// Where the encoder of a downstream run comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderInit {
    /// A pretrained encoder; `checkpoint` names a weight file when the
    /// encoder is not handed over in memory.
    Pretrained {
        #[serde(default)]
        checkpoint: Option<String>,
    },
    /// Fresh `N(0, σ₀²)` kernels; `None` means `σ₀ = 1/(2√k)`.
    Scratch {
        #[serde(default)]
        sigma0: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Encoder rate; `None` means `0.01·η₂`.
    pub eta1: Option<f64>,
    /// Head rate; `None` means `0.1·k`.
    pub eta2: Option<f64>,
    #[serde(alias = "T_down")]
    pub iterations: usize,
    #[serde(alias = "N2")]
    pub n2: usize,
    pub init: EncoderInit,
    /// Update the head first and the encoder against the new head.
    pub staged: bool,
    pub log_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            eta1: None,
            eta2: None,
            iterations: 500,
            n2: 1000,
            init: EncoderInit::Pretrained { checkpoint: None },
            staged: false,
            log_every: 50,
        }
    }
}

impl FinetuneConfig {
    pub fn eta2_for(&self, k: usize) -> f64 {
        self.eta2.unwrap_or(0.1 * k as f64)
    }

    pub fn eta1_for(&self, k: usize) -> f64 {
        self.eta1.unwrap_or(0.01 * self.eta2_for(k))
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let (e1, e2) = (self.eta1_for(k), self.eta2_for(k));
        if !(e1 >= 0.0 && e2 >= 0.0 && e1.is_finite() && e2.is_finite()) {
            return Err(LabError::Config(format!(
                "finetune rates must be finite and ≥ 0 (eta1 = {e1}, eta2 = {e2})"
            )));
        }
        if e2 < e1 {
            return Err(LabError::Config(format!(
                "finetune.eta2 = {e2} must be at least finetune.eta1 = {e1}"
            )));
        }
        if self.n2 < k {
            return Err(LabError::Config(format!(
                "finetune.n2 = {} must be at least k = {k}",
                self.n2
            )));
        }
        if self.iterations == 0 || self.log_every == 0 {
            return Err(LabError::Config(
                "finetune.iterations and finetune.log_every must be ≥ 1".into(),
            ));
        }
        if let EncoderInit::Scratch { sigma0: Some(s) } = self.init {
            if !(s > 0.0 && s.is_finite()) {
                return Err(LabError::Config(format!("init.sigma0 = {s} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy_overall: f64,
    /// Zero when the slice is empty; see the counts.
    pub accuracy_multiview: f64,
    pub accuracy_singleview: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Mean `F_y − max_{j≠y} F_j` over correctly classified samples.
    pub mean_margin: f64,
    pub n_total: usize,
    pub n_multiview: usize,
    pub n_singleview: usize,
    pub per_class_count: Vec<usize>,
}

fn check_label(y: usize, k: usize) -> Result<()> {
    if y >= k {
        return Err(LabError::Label { label: y, k });
    }
    Ok(())
}

/// `−log softmax_y(F)` together with the logits and probabilities.
pub fn ce_loss_and_logits(
    w: &EncoderWeights,
    head: &HeadWeights,
    x: &LabeledSample,
    y: usize,
    act: &ActivationParams,
) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    check_label(y, head.k())?;
    let (logits, probs) = classifier_forward(w, head, &x.patches.view(), act)?;
    let loss = log_sum_exp(&logits.view()) - logits[y];
    Ok((loss, logits, probs))
}

/// `∇u_{i,r} = (p_i − 1{i=y})·h_r(X)`.
pub fn grad_head(
    w: &EncoderWeights,
    head: &HeadWeights,
    x: &LabeledSample,
    y: usize,
    act: &ActivationParams,
) -> Result<Array2<f64>> {
    check_label(y, head.k())?;
    dim_check("head width", w.num_kernels(), head.u.ncols())?;
    let h = encoder_forward(w, &x.patches.view(), act)?;
    let mut e = softmax(&head.u.dot(&h).view());
    e[y] -= 1.0;
    let e2 = e.insert_axis(Axis(1));
    let h2 = h.insert_axis(Axis(0));
    Ok(e2.dot(&h2))
}

/// `∇w_r = [Σ_i (p_i − 1{i=y})·u_{i,r}]·Σ_p ReLU̅'(⟨w_r, x_p⟩)·x_p`.
pub fn grad_encoder_down(
    w: &EncoderWeights,
    head: &HeadWeights,
    x: &LabeledSample,
    y: usize,
    act: &ActivationParams,
) -> Result<Array2<f64>> {
    check_label(y, head.k())?;
    dim_check("head width", w.num_kernels(), head.u.ncols())?;
    dim_check("patch dimension", w.dim(), x.dim())?;
    let h = encoder_forward(w, &x.patches.view(), act)?;
    let mut e = softmax(&head.u.dot(&h).view());
    e[y] -= 1.0;
    let bracket = head.u.t().dot(&e);
    let mut grad = Array2::<f64>::zeros(w.kernels.raw_dim());
    for (r, &b) in bracket.iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        let wr = w.kernels.row(r);
        let mut row = grad.row_mut(r);
        for xp in x.patches.rows() {
            let yp = act.derivative(wr.dot(&xp));
            if yp != 0.0 {
                row.scaled_add(b * yp, &xp);
            }
        }
    }
    Ok(grad)
}

/// Mean loss, both mean gradients and per-slice correct counts over a
/// packed dataset.
pub struct DownstreamPass {
    pub loss: f64,
    pub grad_u: Array2<f64>,
    pub grad_w: Array2<f64>,
    pub correct_multi: usize,
    pub correct_single: usize,
    pub n_multi: usize,
    pub n_single: usize,
}

impl DownstreamPass {
    fn record(&self, t: usize) -> FinetuneRecord {
        let frac = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
        FinetuneRecord {
            t,
            loss: self.loss,
            acc_overall: frac(self.correct_multi + self.correct_single, self.n_multi + self.n_single),
            acc_multi: frac(self.correct_multi, self.n_multi),
            acc_single: frac(self.correct_single, self.n_single),
        }
    }
}

pub fn downstream_objective(
    kernels: &ArrayView2<f64>,
    u: &ArrayView2<f64>,
    batch: &PatchBatch,
    act: &ActivationParams,
    want_grad_w: bool,
) -> Result<DownstreamPass> {
    dim_check("patch dimension", kernels.ncols(), batch.dim)?;
    dim_check("head width", kernels.nrows(), u.ncols())?;
    let k = u.nrows();
    let p = batch.num_patches;
    let mut out = DownstreamPass {
        loss: 0.0,
        grad_u: Array2::zeros(u.raw_dim()),
        grad_w: Array2::zeros(kernels.raw_dim()),
        correct_multi: 0,
        correct_single: 0,
        n_multi: 0,
        n_single: 0,
    };
    for chunk in &batch.chunks {
        let pre = chunk.rows.dot(&kernels.t());
        let h = sum_patch_blocks(&pre.mapv(|a| act.value(a)).view(), p);
        let logits = h.dot(&u.t());
        let mut err = Array2::<f64>::zeros(logits.raw_dim());
        for (n, row) in logits.rows().into_iter().enumerate() {
            let y = chunk.labels[n];
            check_label(y, k)?;
            out.loss += log_sum_exp(&row) - row[y];
            let mut e = softmax(&row);
            e[y] -= 1.0;
            err.row_mut(n).assign(&e);
            let hit = argmax(&row) == y;
            if chunk.single_view[n] {
                out.n_single += 1;
                out.correct_single += hit as usize;
            } else {
                out.n_multi += 1;
                out.correct_multi += hit as usize;
            }
        }
        out.grad_u += &err.t().dot(&h);
        if want_grad_w {
            let bracket = err.dot(u);
            let mut coef = pre;
            for n in 0..chunk.num_samples() {
                for row in n * p..(n + 1) * p {
                    Zip::from(coef.row_mut(row))
                        .and(bracket.row(n))
                        .for_each(|c, &b| *c = b * act.derivative(*c));
                }
            }
            out.grad_w += &coef.t().dot(&chunk.rows);
        }
    }
    let n = batch.num_samples as f64;
    out.loss /= n;
    out.grad_u /= n;
    out.grad_w /= n;
    Ok(out)
}

/// Fine-tunes `w_init` with a zero-initialized head on `dataset`.
pub fn finetune(
    w_init: &EncoderWeights,
    dataset: &Dataset,
    config: &FinetuneConfig,
    act: &ActivationParams,
    probes: &ProbeSet,
) -> Result<(EncoderWeights, HeadWeights, FinetuneTrace)> {
    let k = w_init.k();
    config.validate(k)?;
    act.validate()?;
    dim_check("downstream sample count", config.n2, dataset.len())?;
    let batch = PatchBatch::from_samples(&dataset.samples, DEFAULT_CHUNK)?;
    let (eta1, eta2) = (config.eta1_for(k), config.eta2_for(k));
    let mut w = w_init.clone();
    let mut head = HeadWeights::zeros(k, w.num_kernels());
    let mut trace = FinetuneTrace::default();

    // features represented at the start; flagged if they fall below ϱ/2
    let lambda0 = lambda_scores(&correlation_matrix(&w, probes.dict)?.view());
    let floor = act.varrho / 2.0;

    let total = config.iterations;
    for t in 0..=total {
        let pass = downstream_objective(&w.kernels.view(), &head.u.view(), &batch, act, eta1 != 0.0)?;
        guard(t, pass.loss)?;
        if t % config.log_every == 0 || t == total {
            trace.records.push(pass.record(t));
            if eta1 != 0.0 {
                let lambda = lambda_scores(&correlation_matrix(&w, probes.dict)?.view());
                for (f, (&l0, &l)) in lambda0.iter().zip(lambda.iter()).enumerate() {
                    if l0 >= floor && l < floor {
                        trace.warnings.push(format!(
                            "feature {f}: lambda fell to {l} (< {floor}) at t = {t}"
                        ));
                    }
                }
            }
        }
        if t == total {
            break;
        }
        if config.staged {
            head.u.scaled_add(-eta2, &pass.grad_u);
            if eta1 != 0.0 {
                let second = downstream_objective(&w.kernels.view(), &head.u.view(), &batch, act, true)?;
                w.kernels.scaled_add(-eta1, &second.grad_w);
            }
        } else {
            if eta2 != 0.0 {
                head.u.scaled_add(-eta2, &pass.grad_u);
            }
            if eta1 != 0.0 {
                w.kernels.scaled_add(-eta1, &pass.grad_w);
            }
        }
    }
    Ok((w, head, trace))
}

/// Same loop from a fresh Gaussian encoder with `m` kernels per class.
pub fn train_supervised<R: Rng + ?Sized>(
    dataset: &Dataset,
    config: &FinetuneConfig,
    m: usize,
    act: &ActivationParams,
    probes: &ProbeSet,
    rng: &mut R,
) -> Result<(EncoderWeights, HeadWeights, FinetuneTrace)> {
    let k = dataset.params.k;
    let sigma0 = match config.init {
        EncoderInit::Scratch { sigma0 } => sigma0.unwrap_or(0.5 / (k as f64).sqrt()),
        EncoderInit::Pretrained { .. } => {
            return Err(LabError::Config(
                "supervised training needs init.kind = \"scratch\"".into(),
            ))
        }
    };
    let w0 = EncoderWeights::gaussian(k, m, dataset.params.d, sigma0, rng);
    finetune(&w0, dataset, config, act, probes)
}

/// Argmax accuracy, overall and per view slice.
pub fn evaluate(
    w: &EncoderWeights,
    head: &HeadWeights,
    test_set: &[LabeledSample],
    act: &ActivationParams,
) -> Result<EvalReport> {
    if test_set.is_empty() {
        return Err(LabError::Argument("evaluation set is empty".into()));
    }
    let k = head.k();
    let batch = PatchBatch::from_samples(test_set, DEFAULT_CHUNK)?;
    let mut per_class_hit = vec![0usize; k];
    let mut per_class_count = vec![0usize; k];
    let (mut hit_multi, mut hit_single, mut n_multi, mut n_single) = (0, 0, 0, 0);
    let mut margin_sum = 0.0;
    dim_check("head width", w.num_kernels(), head.u.ncols())?;
    for chunk in &batch.chunks {
        let pre = chunk.rows.dot(&w.kernels.t());
        let h = sum_patch_blocks(&pre.mapv(|a| act.value(a)).view(), batch.num_patches);
        let logits = h.dot(&head.u.t());
        for (n, row) in logits.rows().into_iter().enumerate() {
            let y = chunk.labels[n];
            check_label(y, k)?;
            let pred = argmax(&row);
            let hit = pred == y;
            per_class_count[y] += 1;
            if hit {
                per_class_hit[y] += 1;
                let runner_up = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != y)
                    .map(|(_, &v)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                margin_sum += row[y] - runner_up;
            }
            if chunk.single_view[n] {
                n_single += 1;
                hit_single += hit as usize;
            } else {
                n_multi += 1;
                hit_multi += hit as usize;
            }
        }
    }
    let frac = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let hits = hit_multi + hit_single;
    Ok(EvalReport {
        accuracy_overall: frac(hits, test_set.len()),
        accuracy_multiview: frac(hit_multi, n_multi),
        accuracy_singleview: frac(hit_single, n_single),
        per_class_accuracy: per_class_hit
            .iter()
            .zip(&per_class_count)
            .map(|(&h, &n)| frac(h, n))
            .collect(),
        mean_margin: if hits == 0 { 0.0 } else { margin_sum / hits as f64 },
        n_total: test_set.len(),
        n_multiview: n_multi,
        n_singleview: n_single,
        per_class_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_feature_dictionary, sample_dataset, DataParams, FeatureDictionary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const ACT: ActivationParams = ActivationParams { q: 3, varrho: 0.2 };

    fn setup(seed: u64, n: usize) -> (FeatureDictionary, Dataset, EncoderWeights) {
        let params = DataParams {
            k: 3,
            d: 24,
            num_patches: 12,
            s: 1.0,
            ..DataParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dict = build_feature_dictionary(3, 24, &mut rng).unwrap();
        let data = sample_dataset(n, &dict, &params, &mut rng).unwrap();
        let w = EncoderWeights::gaussian(3, 2, 24, 0.4, &mut rng);
        (dict, data, w)
    }

    #[test]
    fn zero_head_loss_and_grads() {
        let (_, data, w) = setup(1, 4);
        let head = HeadWeights::zeros(3, 6);
        let x = &data.samples[0];
        let (loss, _, probs) = ce_loss_and_logits(&w, &head, x, x.label, &ACT).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-15);
        assert!(probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        let gu = grad_head(&w, &head, x, x.label, &ACT).unwrap();
        let h = encoder_forward(&w, &x.patches.view(), &ACT).unwrap();
        for i in 0..3 {
            let c = if i == x.label { 1.0 / 3.0 - 1.0 } else { 1.0 / 3.0 };
            for r in 0..6 {
                assert!((gu[[i, r]] - c * h[r]).abs() < 1e-14);
            }
        }
        for col in gu.columns() {
            assert!(col.sum().abs() < 1e-14);
        }
        assert!(grad_encoder_down(&w, &head, x, x.label, &ACT).unwrap().iter().all(|&g| g == 0.0));
        assert!(matches!(
            ce_loss_and_logits(&w, &head, x, 3, &ACT),
            Err(LabError::Label { label: 3, k: 3 })
        ));
    }

    #[test]
    fn batched_matches_per_sample() {
        let (_, data, w) = setup(2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut head = HeadWeights::zeros(3, 6);
        head.u.iter_mut().for_each(|v| *v = rng.random::<f64>() - 0.5);
        let batch = PatchBatch::from_samples(&data.samples, 4).unwrap();
        let pass = downstream_objective(&w.kernels.view(), &head.u.view(), &batch, &ACT, true).unwrap();
        let n = data.len() as f64;
        let mut loss = 0.0;
        let mut gu = Array2::<f64>::zeros((3, 6));
        let mut gw = Array2::<f64>::zeros((6, 24));
        for x in &data.samples {
            loss += ce_loss_and_logits(&w, &head, x, x.label, &ACT).unwrap().0 / n;
            gu.scaled_add(1.0 / n, &grad_head(&w, &head, x, x.label, &ACT).unwrap());
            gw.scaled_add(1.0 / n, &grad_encoder_down(&w, &head, x, x.label, &ACT).unwrap());
        }
        assert!((pass.loss - loss).abs() < 1e-12);
        assert!(pass.grad_u.iter().zip(gu.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(pass.grad_w.iter().zip(gw.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn frozen_rates_and_head_only_step() {
        let (dict, data, w) = setup(3, 8);
        let probes = ProbeSet::new(&dict);
        let cfg = FinetuneConfig {
            eta1: Some(0.0),
            eta2: Some(0.0),
            iterations: 3,
            n2: 8,
            log_every: 1,
            ..FinetuneConfig::default()
        };
        let (w_t, head, trace) = finetune(&w, &data, &cfg, &ACT, &probes).unwrap();
        assert_eq!(w_t, w);
        assert!(head.u.iter().all(|&v| v == 0.0));
        assert!(trace.records.iter().all(|r| (r.loss - 3f64.ln()).abs() < 1e-12));

        let cfg = FinetuneConfig {
            eta1: Some(0.0),
            eta2: Some(0.3),
            iterations: 1,
            ..cfg
        };
        let (w1, head1, _) = finetune(&w, &data, &cfg, &ACT, &probes).unwrap();
        assert_eq!(w1, w);
        let zero = HeadWeights::zeros(3, 6);
        let mut expect = Array2::<f64>::zeros((3, 6));
        for x in &data.samples {
            expect.scaled_add(-0.3 / 8.0, &grad_head(&w, &zero, x, x.label, &ACT).unwrap());
        }
        assert!(head1.u.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-13));
    }

    #[test]
    fn evaluation_ties_and_counts() {
        let (_, data, w) = setup(4, 30);
        let head = HeadWeights::zeros(3, 6);
        let rep = evaluate(&w, &head, &data.samples, &ACT).unwrap();
        let class0 = data.samples.iter().filter(|x| x.label == 0).count();
        assert!((rep.accuracy_overall - class0 as f64 / 30.0).abs() < 1e-15);
        assert_eq!(rep.n_multiview + rep.n_singleview, rep.n_total);
        assert_eq!(rep.per_class_count.iter().sum::<usize>(), 30);
        assert!(evaluate(&w, &head, &[], &ACT).is_err());
    }

    #[test]
    fn config_validation() {
        let cfg = FinetuneConfig::default();
        assert!(cfg.validate(10).is_ok());
        assert!((cfg.eta2_for(10) - 1.0).abs() < 1e-15);
        assert!((cfg.eta1_for(10) - 0.01).abs() < 1e-15);
        assert!(FinetuneConfig { eta1: Some(2.0), ..cfg.clone() }.validate(10).is_err());
        assert!(FinetuneConfig { n2: 5, ..cfg.clone() }.validate(10).is_err());
        let parsed: FinetuneConfig =
            toml::from_str("T_down = 20\nN2 = 40\n[init]\nkind = \"scratch\"\nsigma0 = 0.1").unwrap();
        assert_eq!(parsed.init, EncoderInit::Scratch { sigma0: Some(0.1) });
    }
}
