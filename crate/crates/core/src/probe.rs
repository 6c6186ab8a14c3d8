//! Measurements of the tracked quantities: kernel/feature correlations,
//! the correlation scores `Λ_{i,l}`, the initial candidate sets
//! `M_{i,l}^(0)`, empirical analogs of the induction-hypothesis items,
//! capture / specialization summaries and the Ψ-based margin proxy.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureDictionary, FeatureId, LabeledSample, View};
use crate::error::{dim_check, LabError, Result};
use crate::network::{classifier_forward, ActivationParams, EncoderWeights, HeadWeights};
use crate::trace::TraceRecord;

/// Sentinel reported for a specialization ratio whose denominator is not positive.
pub const SPECIALIZATION_CAP: f64 = 1e6;

/// `(k·m) × 2k` matrix of `⟨w_r, v_{i,l}⟩`.
pub fn correlation_matrix(w: &EncoderWeights, dict: &FeatureDictionary) -> Result<Array2<f64>> {
    dim_check("kernel dimension", dict.dim(), w.dim())?;
    Ok(w.kernels.dot(&dict.matrix().t()))
}

/// `Λ_{i,l} = max_r [⟨w_r, v_{i,l}⟩]^+`, one entry per feature column.
pub fn lambda_scores(corr: &ArrayView2<f64>) -> Array1<f64> {
    corr.map_axis(Axis(0), |col| col.iter().cloned().fold(0.0, f64::max))
}

/// Row index of each column's maximum (lowest index on ties).
pub fn argmax_kernels(corr: &ArrayView2<f64>) -> Vec<usize> {
    corr.columns()
        .into_iter()
        .map(|col| crate::network::argmax(&col))
        .collect()
}

/// Per-kernel largest positive correlation with any feature the kernel
/// does not win; zero when it wins every feature.
pub fn offdiag_max_per_kernel(corr: &ArrayView2<f64>) -> Vec<f64> {
    let winners = argmax_kernels(corr);
    corr.rows()
        .into_iter()
        .enumerate()
        .map(|(r, row)| {
            row.iter()
                .enumerate()
                .filter(|&(f, _)| winners[f] != r)
                .map(|(_, &c)| c)
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Largest off-feature correlation over all kernels that win a feature.
pub fn winner_offdiag_max(corr: &ArrayView2<f64>) -> f64 {
    let winners = argmax_kernels(corr);
    let per_kernel = offdiag_max_per_kernel(corr);
    let mut best = 0.0f64;
    for &r in &winners {
        best = best.max(per_kernel[r]);
    }
    best
}

/// Max `|⟨w_r, ξ_p⟩|` over every kernel, sample and patch.
pub fn noise_correlation_max(
    w: &EncoderWeights,
    dict: &FeatureDictionary,
    samples: &[LabeledSample],
) -> f64 {
    let mut best = 0.0f64;
    for x in samples {
        let mut noise = Array2::<f64>::zeros(x.patches.raw_dim());
        for p in 0..x.num_patches() {
            noise.row_mut(p).assign(&x.noise(p, dict));
        }
        let proj = noise.dot(&w.kernels.t());
        best = proj.iter().fold(best, |b, v| b.max(v.abs()));
    }
    best
}

/// Full correlation state at one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSnapshot {
    pub t: usize,
    pub corr: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub argmax_kernel: Vec<usize>,
    pub offdiag_max: Vec<f64>,
    pub noise_corr_max: f64,
}

impl CorrelationSnapshot {
    pub fn capture(
        t: usize,
        w: &EncoderWeights,
        dict: &FeatureDictionary,
        noise_samples: &[LabeledSample],
    ) -> Result<Self> {
        let corr = correlation_matrix(w, dict)?;
        Ok(Self {
            t,
            lambda: lambda_scores(&corr.view()).to_vec(),
            argmax_kernel: argmax_kernels(&corr.view()),
            offdiag_max: offdiag_max_per_kernel(&corr.view()),
            noise_corr_max: noise_correlation_max(w, dict, noise_samples),
            corr: corr.rows().into_iter().map(|r| r.to_vec()).collect(),
        })
    }

    pub fn corr_matrix(&self) -> Array2<f64> {
        let rows = self.corr.len();
        let cols = self.corr.first().map_or(0, Vec::len);
        Array2::from_shape_fn((rows, cols), |(r, c)| self.corr[r][c])
    }
}

/// Initial candidate sets `M_{i,l}^(0)`, indexed by feature column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSets {
    pub sets: Vec<Vec<usize>>,
    pub c2: f64,
    pub lambda0: Vec<f64>,
}

impl CandidateSets {
    pub fn set(&self, feature: FeatureId) -> &[usize] {
        &self.sets[feature.index()]
    }

    pub fn contains(&self, feature: FeatureId, kernel: usize) -> bool {
        self.sets[feature.index()].binary_search(&kernel).is_ok()
    }

    /// Kernels that belong to at least one candidate set.
    pub fn union(&self, num_kernels: usize) -> Vec<bool> {
        let mut member = vec![false; num_kernels];
        for set in &self.sets {
            for &r in set {
                member[r] = true;
            }
        }
        member
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.sets.iter().map(Vec::len).collect()
    }

    pub fn mean_size(&self) -> f64 {
        self.sets.iter().map(Vec::len).sum::<usize>() as f64 / self.sets.len() as f64
    }

    pub fn max_size(&self) -> usize {
        self.sets.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// `M_{i,l}^(0) = { r : corr0[r,(i,l)] ≥ Λ_{i,l}^(0)·(1 − c2/ln k) }`.
pub fn candidate_sets(corr0: &ArrayView2<f64>, c2: f64) -> Result<CandidateSets> {
    let nf = corr0.ncols();
    let k = nf / 2;
    if k < 2 {
        return Err(LabError::Argument(format!(
            "candidate sets need k ≥ 2 so that ln k > 0 (k = {k})"
        )));
    }
    let lambda0 = lambda_scores(corr0);
    let factor = 1.0 - c2 / (k as f64).ln();
    let mut sets = Vec::with_capacity(nf);
    for f in 0..nf {
        let l0 = lambda0[f];
        if l0 <= 0.0 {
            let id = FeatureId::from_index(f);
            return Err(LabError::Degenerate {
                class: id.class,
                slot: id.slot,
                score: l0,
            });
        }
        let threshold = l0 * factor;
        let set: Vec<usize> = corr0
            .column(f)
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c >= threshold)
            .map(|(r, _)| r)
            .collect();
        sets.push(set);
    }
    Ok(CandidateSets {
        sets,
        c2,
        lambda0: lambda0.to_vec(),
    })
}

/// Thresholds for the empirical induction-hypothesis items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisThresholds {
    pub tol_a: f64,
    pub tol_b: f64,
    pub tol_c: f64,
    pub tol_d: f64,
    pub tol_e: f64,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub tol_g: f64,
    pub tol_h: f64,
}

impl HypothesisThresholds {
    /// Every tolerance equal to `tol`, `Λ` band `[lambda_lo, lambda_hi]`.
    pub fn uniform(tol: f64, lambda_lo: f64, lambda_hi: f64) -> Self {
        Self {
            tol_a: tol,
            tol_b: tol,
            tol_c: tol,
            tol_d: tol,
            tol_e: tol,
            lambda_lo,
            lambda_hi,
            tol_g: tol,
            tol_h: tol,
        }
    }

    /// Tolerances `c·σ₀·ln²k` and the band `[σ₀/ln²k, ln²k]`.
    pub fn scaled(sigma0: f64, k: usize, c: f64) -> Self {
        let l2 = (k as f64).ln().powi(2);
        Self::uniform(c * sigma0 * l2, sigma0 / l2, l2)
    }
}

/// Worst measured value and pass fraction of one item.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemStat {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl ItemStat {
    fn record(&mut self, value: f64, ok: bool) {
        self.checked += 1;
        if ok {
            self.passed += 1;
        }
        if self.checked == 1 || value > self.worst {
            self.worst = value;
        }
    }

    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }

    pub fn all_pass(&self) -> bool {
        self.passed == self.checked
    }
}

/// Items (a)–(h) measured on one weight state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub a: ItemStat,
    pub b: ItemStat,
    pub c: ItemStat,
    pub d: ItemStat,
    pub e: ItemStat,
    pub f: ItemStat,
    pub g: ItemStat,
    pub h: ItemStat,
}

impl HypothesisReport {
    pub fn items(&self) -> [(&'static str, &ItemStat); 8] {
        [
            ("a", &self.a),
            ("b", &self.b),
            ("c", &self.c),
            ("d", &self.d),
            ("e", &self.e),
            ("f", &self.f),
            ("g", &self.g),
            ("h", &self.h),
        ]
    }

    pub fn all_pass(&self) -> bool {
        self.items().iter().all(|(_, s)| s.all_pass())
    }
}

/// Measures the induction-hypothesis analogs on `samples`.
///
/// Items (a)–(e) are patch-level: (a) deviation of `⟨w_r, x_p⟩` from
/// `⟨w_r, v⟩·z_p` for candidate kernels on their own feature's patches,
/// (b)/(c) candidate kernels on other feature patches / background patches,
/// (d)/(e) kernels outside every candidate set on feature / background
/// patches. Items (f)–(h) are weight-level: the `Λ` band, the lower bound on
/// candidate correlations and the upper bound on non-candidate correlations.
pub fn hypothesis_report(
    w: &EncoderWeights,
    dict: &FeatureDictionary,
    samples: &[LabeledSample],
    m0: &CandidateSets,
    th: &HypothesisThresholds,
) -> Result<HypothesisReport> {
    let nf = dict.num_features();
    dim_check("candidate sets", nf, m0.sets.len())?;
    let km = w.num_kernels();
    let corr = correlation_matrix(w, dict)?;
    let in_any = m0.union(km);
    let mut rep = HypothesisReport::default();

    for x in samples {
        if x.active.is_empty() || x.z.len() != x.num_patches() {
            return Err(LabError::Metadata(
                "sample carries no patch assignment".into(),
            ));
        }
        let pre = x.patches.dot(&w.kernels.t()); // P × km
        let feature_of: Vec<Option<FeatureId>> =
            (0..x.num_patches()).map(|p| x.patch_feature(p)).collect();

        for f_idx in 0..nf {
            let f = FeatureId::from_index(f_idx);
            for &r in m0.set(f) {
                for p in 0..x.num_patches() {
                    let a = pre[[p, r]];
                    match feature_of[p] {
                        Some(g) if g == f => {
                            let dev = (a - corr[[r, f_idx]] * x.z[p]).abs();
                            rep.a.record(dev, dev <= th.tol_a);
                        }
                        Some(_) => rep.b.record(a.abs(), a.abs() <= th.tol_b),
                        None => rep.c.record(a.abs(), a.abs() <= th.tol_c),
                    }
                }
            }
        }
        for r in (0..km).filter(|&r| !in_any[r]) {
            for p in 0..x.num_patches() {
                let a = pre[[p, r]].abs();
                if feature_of[p].is_some() {
                    rep.d.record(a, a <= th.tol_d);
                } else {
                    rep.e.record(a, a <= th.tol_e);
                }
            }
        }
    }

    let lambda = lambda_scores(&corr.view());
    for f_idx in 0..nf {
        let l = lambda[f_idx];
        // report the distance outside the band as the measured value
        let outside = (th.lambda_lo - l).max(l - th.lambda_hi).max(0.0);
        rep.f.record(outside, l >= th.lambda_lo && l <= th.lambda_hi);
        let f = FeatureId::from_index(f_idx);
        for r in 0..km {
            let c = corr[[r, f_idx]];
            if m0.contains(f, r) {
                rep.g.record(-c, c >= -th.tol_g);
            } else {
                rep.h.record(c, c <= th.tol_h);
            }
        }
    }
    Ok(rep)
}

/// Capture record of one feature at the final iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCapture {
    pub feature: FeatureId,
    pub lambda: f64,
    pub captured: bool,
    pub winner: usize,
    pub winner_in_m0: bool,
    /// Largest correlation of the winner kernel with any other feature.
    pub winner_second: f64,
    /// `Λ / winner_second`, capped at [`SPECIALIZATION_CAP`].
    pub specialization_ratio: f64,
}

/// Specialization record of one kernel that wins at least one feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpecialization {
    pub kernel: usize,
    /// Largest entry of the kernel's correlation row.
    pub top: f64,
    pub top_feature: FeatureId,
    /// Second-largest entry of the kernel's correlation row.
    pub second: f64,
    pub won_features: Vec<FeatureId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureReport {
    pub varrho: f64,
    pub features: Vec<FeatureCapture>,
    pub kernels: Vec<KernelSpecialization>,
    pub captured_fraction: f64,
    /// Among captured features, fraction whose winner lies in `M^(0)`.
    pub winner_in_m0_fraction: f64,
    pub mean_specialization_ratio: f64,
}

impl CaptureReport {
    /// Fraction of winning kernels whose second-largest correlation is at
    /// most `max(abs_bound, rel_bound·top)`.
    pub fn specialized_fraction(&self, abs_bound: f64, rel_bound: f64) -> f64 {
        if self.kernels.is_empty() {
            return 0.0;
        }
        let ok = self
            .kernels
            .iter()
            .filter(|ks| ks.second <= abs_bound.max(rel_bound * ks.top))
            .count();
        ok as f64 / self.kernels.len() as f64
    }
}

pub fn capture_report(corr: &ArrayView2<f64>, m0: &CandidateSets, varrho: f64) -> Result<CaptureReport> {
    let nf = corr.ncols();
    dim_check("candidate sets", nf, m0.sets.len())?;
    let lambda = lambda_scores(corr);
    let winners = argmax_kernels(corr);

    let mut features = Vec::with_capacity(nf);
    for f_idx in 0..nf {
        let feature = FeatureId::from_index(f_idx);
        let r = winners[f_idx];
        let second = corr
            .row(r)
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f_idx)
            .map(|(_, &c)| c)
            .fold(f64::NEG_INFINITY, f64::max);
        let ratio = if second > 0.0 {
            (lambda[f_idx] / second).min(SPECIALIZATION_CAP)
        } else {
            SPECIALIZATION_CAP
        };
        features.push(FeatureCapture {
            feature,
            lambda: lambda[f_idx],
            captured: lambda[f_idx] >= varrho,
            winner: r,
            winner_in_m0: m0.contains(feature, r),
            winner_second: second,
            specialization_ratio: ratio,
        });
    }

    let mut kernel_ids: Vec<usize> = winners.clone();
    kernel_ids.sort_unstable();
    kernel_ids.dedup();
    let kernels = kernel_ids
        .into_iter()
        .map(|r| {
            let row = corr.row(r);
            let top_idx = crate::network::argmax(&row);
            let second = row
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != top_idx)
                .map(|(_, &c)| c)
                .fold(f64::NEG_INFINITY, f64::max);
            KernelSpecialization {
                kernel: r,
                top: row[top_idx],
                top_feature: FeatureId::from_index(top_idx),
                second,
                won_features: (0..nf)
                    .filter(|&f| winners[f] == r)
                    .map(FeatureId::from_index)
                    .collect(),
            }
        })
        .collect();

    let captured: Vec<&FeatureCapture> = features.iter().filter(|f| f.captured).collect();
    let captured_fraction = captured.len() as f64 / nf as f64;
    let winner_in_m0_fraction = if captured.is_empty() {
        0.0
    } else {
        captured.iter().filter(|f| f.winner_in_m0).count() as f64 / captured.len() as f64
    };
    let mean_specialization_ratio =
        features.iter().map(|f| f.specialization_ratio).sum::<f64>() / nf as f64;

    Ok(CaptureReport {
        varrho,
        features,
        kernels,
        captured_fraction,
        winner_in_m0_fraction,
        mean_specialization_ratio,
    })
}

/// Ψ quantities and the per-class margin proxy for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsiMargin {
    /// `Ψ_{i,l} = Σ_{r ∈ M_{i,l}} ([⟨w_r, v_{i,l}⟩]^+)²`, per feature column.
    pub psi: Vec<f64>,
    /// Proxy for `F_j − F_y` per class; entry `y` is zero.
    pub proxy: Vec<f64>,
}

pub fn psi_values(w: &EncoderWeights, dict: &FeatureDictionary, m0: &CandidateSets) -> Result<Vec<f64>> {
    let corr = correlation_matrix(w, dict)?;
    dim_check("candidate sets", corr.ncols(), m0.sets.len())?;
    Ok((0..corr.ncols())
        .map(|f| {
            m0.sets[f]
                .iter()
                .map(|&r| corr[[r, f]].max(0.0).powi(2))
                .sum()
        })
        .collect())
}

/// Margin proxy `0.4·Σ_l 1{v_{j,l} ∈ V(X)}·Ψ_{j,l} − (label evidence)`, where
/// the label evidence is `Ψ_{y,1} + Ψ_{y,2}` for multi-view samples and
/// `Ψ_{y,l̂} + ρ·Ψ_{y,3−l̂}` for single-view ones.
pub fn psi_margin(
    w: &EncoderWeights,
    dict: &FeatureDictionary,
    m0: &CandidateSets,
    x: &LabeledSample,
    rho: f64,
) -> Result<PsiMargin> {
    if x.active.is_empty() {
        return Err(LabError::Metadata("sample has no active-feature metadata".into()));
    }
    let psi = psi_values(w, dict, m0)?;
    let k = dict.k();
    let y = x.label;
    let own = |l: usize| psi[FeatureId::new(y, l).index()];
    let evidence = match x.view {
        View::Multi => own(0) + own(1),
        View::Single { main_slot } => own(main_slot) + rho * own(1 - main_slot),
    };
    let proxy = (0..k)
        .map(|j| {
            if j == y {
                return 0.0;
            }
            let competing: f64 = (0..2)
                .filter(|&l| x.has_feature(FeatureId::new(j, l)))
                .map(|l| psi[FeatureId::new(j, l).index()])
                .sum();
            0.4 * competing - evidence
        })
        .collect();
    Ok(PsiMargin { psi, proxy })
}

/// Spearman correlation between the proxy margins and the true margins
/// `F_j − F_y` over competing classes `j ≠ y`, with average ranks on ties.
/// Returns `None` when either side is constant.
pub fn psi_rank_agreement(
    w: &EncoderWeights,
    head: &HeadWeights,
    dict: &FeatureDictionary,
    m0: &CandidateSets,
    x: &LabeledSample,
    rho: f64,
    act: &ActivationParams,
) -> Result<Option<f64>> {
    let pm = psi_margin(w, dict, m0, x, rho)?;
    let (logits, _) = classifier_forward(w, head, &x.patches.view(), act)?;
    let y = x.label;
    let mut proxy = Vec::new();
    let mut truth = Vec::new();
    for j in (0..dict.k()).filter(|&j| j != y) {
        proxy.push(pm.proxy[j]);
        truth.push(logits[j] - logits[y]);
    }
    Ok(spearman(&proxy, &truth))
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &t in &idx[i..=j] {
            ranks[t] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va * vb).sqrt())
    }
}

/// What the training loops measure at each logged iteration.
#[derive(Clone, Copy, Debug)]
pub struct ProbeSet<'a> {
    pub dict: &'a FeatureDictionary,
    /// Held-out samples for the noise-correlation column of snapshots.
    pub noise_samples: &'a [LabeledSample],
    pub keep_snapshots: bool,
}

impl<'a> ProbeSet<'a> {
    pub fn new(dict: &'a FeatureDictionary) -> Self {
        Self {
            dict,
            noise_samples: &[],
            keep_snapshots: false,
        }
    }

    pub fn with_snapshots(mut self, noise_samples: &'a [LabeledSample]) -> Self {
        self.noise_samples = noise_samples;
        self.keep_snapshots = true;
        self
    }

    pub fn record(
        &self,
        t: usize,
        loss: f64,
        grad_norm: f64,
        w: &EncoderWeights,
    ) -> Result<(TraceRecord, Option<CorrelationSnapshot>)> {
        let corr = correlation_matrix(w, self.dict)?;
        let lambda = lambda_scores(&corr.view());
        let n = lambda.len() as f64;
        let record = TraceRecord {
            t,
            loss,
            lambda_min: lambda.iter().cloned().fold(f64::INFINITY, f64::min),
            lambda_mean: lambda.sum() / n,
            lambda_max: lambda.iter().cloned().fold(0.0, f64::max),
            offdiag_max: winner_offdiag_max(&corr.view()),
            grad_norm,
        };
        let snap = if self.keep_snapshots {
            Some(CorrelationSnapshot::capture(t, w, self.dict, self.noise_samples)?)
        } else {
            None
        };
        Ok((record, snap))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_feature_dictionary, sample_datapoint, DataParams};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn corr_of_dictionary_rows_is_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dict = build_feature_dictionary(3, 20, &mut rng).unwrap();
        let w = EncoderWeights::new(dict.matrix().to_owned(), 2, 0.0).unwrap();
        let corr = correlation_matrix(&w, &dict).unwrap();
        for ((i, j), &c) in corr.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((c - target).abs() < 1e-12);
        }
        let zero = EncoderWeights::zeros(3, 2, 20);
        assert!(correlation_matrix(&zero, &dict).unwrap().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn corr_matches_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dict = build_feature_dictionary(3, 16, &mut rng).unwrap();
        let w = EncoderWeights::gaussian(3, 2, 16, 0.3, &mut rng);
        let corr = correlation_matrix(&w, &dict).unwrap();
        for r in 0..w.num_kernels() {
            for f in 0..6 {
                let v = dict.vector(FeatureId::from_index(f));
                let dot: f64 = (0..16).map(|j| w.kernels[[r, j]] * v[j]).sum();
                assert!((corr[[r, f]] - dot).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn lambda_clamps_and_ignores_row_order() {
        let corr = array![[-0.5, 0.37, 0.1], [-0.2, 0.1, 0.3]];
        let l = lambda_scores(&corr.view());
        assert_eq!(l.to_vec(), vec![0.0, 0.37, 0.3]);
        let swapped = array![[-0.2, 0.1, 0.3], [-0.5, 0.37, 0.1]];
        assert_eq!(lambda_scores(&swapped.view()), l);
    }

    #[test]
    fn candidate_sets_single_kernel_and_monotone() {
        let corr = array![[0.3, 0.2, 0.1, 0.4]];
        let m = candidate_sets(&corr.view(), 1.0).unwrap();
        assert!(m.sets.iter().all(|s| s == &vec![0]));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dict = build_feature_dictionary(5, 40, &mut rng).unwrap();
        let w = EncoderWeights::gaussian(5, 4, 40, 0.2, &mut rng);
        let corr = correlation_matrix(&w, &dict).unwrap();
        let small = candidate_sets(&corr.view(), 0.1).unwrap();
        let large = candidate_sets(&corr.view(), 0.6).unwrap();
        let winners = argmax_kernels(&corr.view());
        for ((s, l), w) in small.sets.iter().zip(&large.sets).zip(&winners) {
            assert!(s.iter().all(|r| l.contains(r)));
            assert!(s.contains(w));
        }
    }

    #[test]
    fn candidate_sets_degenerate_column() {
        let corr = array![[0.3, -0.2, 0.1, 0.4], [0.1, -0.1, 0.2, 0.0]];
        assert!(matches!(
            candidate_sets(&corr.view(), 1.0),
            Err(LabError::Degenerate { class: 0, slot: 1, .. })
        ));
    }

    #[test]
    fn capture_identity_and_zero() {
        let corr = Array2::<f64>::eye(4);
        let m0 = candidate_sets(&corr.view(), 1.0).unwrap();
        let rep = capture_report(&corr.view(), &m0, 0.2).unwrap();
        assert_eq!(rep.captured_fraction, 1.0);
        assert_eq!(rep.winner_in_m0_fraction, 1.0);
        assert!(rep.features.iter().all(|f| f.specialization_ratio == SPECIALIZATION_CAP));
        assert_eq!(rep.specialized_fraction(0.0, 0.25), 1.0);

        let zero = Array2::<f64>::zeros((4, 4));
        let rep = capture_report(&zero.view(), &m0, 0.2).unwrap();
        assert_eq!(rep.captured_fraction, 0.0);
    }

    #[test]
    fn psi_for_dictionary_winners_counts_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = DataParams {
            k: 3,
            d: 24,
            num_patches: 12,
            s: 1.0,
            ..DataParams::default()
        };
        let dict = build_feature_dictionary(params.k, params.d, &mut rng).unwrap();
        // two kernels per feature, both equal to the feature vector
        let mut kernels = Array2::<f64>::zeros((12, 24));
        for r in 0..12 {
            kernels.row_mut(r).assign(&dict.vector(FeatureId::from_index(r / 2)));
        }
        let w = EncoderWeights::new(kernels, 4, 0.0).unwrap();
        let corr = correlation_matrix(&w, &dict).unwrap();
        let m0 = candidate_sets(&corr.view(), 1.0).unwrap();
        assert!(m0.sets.iter().all(|s| s.len() == 2));
        let x = sample_datapoint(&dict, &params, &mut rng).unwrap();
        let pm = psi_margin(&w, &dict, &m0, &x, 0.05).unwrap();
        for &p in &pm.psi {
            assert!((p - 2.0).abs() < 1e-12);
        }

        let zero = EncoderWeights::zeros(3, 4, 24);
        let pm = psi_margin(&zero, &dict, &m0, &x, 0.05).unwrap();
        assert!(pm.psi.iter().all(|&p| p == 0.0));
        assert!(pm.proxy.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn spearman_known_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
    }
}
