//! Orthonormal feature dictionary and the multi-view / single-view sample
//! generator.
//!
//! Every sample keeps its full generative metadata (active features, patch
//! assignment, `z` coefficients and feature-noise coefficients) so that the
//! probes in [`crate::probe`] can measure quantities that depend on the
//! ground truth.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Index of one dictionary feature: class `i` in `0..k`, slot `l` in `{0, 1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureId {
    pub class: usize,
    pub slot: usize,
}

impl FeatureId {
    pub fn new(class: usize, slot: usize) -> Self {
        debug_assert!(slot < 2);
        Self { class, slot }
    }

    /// Column index in the `2k`-wide feature layout (`2·class + slot`).
    pub fn index(self) -> usize {
        2 * self.class + self.slot
    }

    pub fn from_index(index: usize) -> Self {
        Self {
            class: index / 2,
            slot: index % 2,
        }
    }

    /// The other feature of the same class.
    pub fn sibling(self) -> Self {
        Self {
            class: self.class,
            slot: 1 - self.slot,
        }
    }
}

/// Parameters of the generative data model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataParams {
    /// Number of classes.
    pub k: usize,
    /// Patch dimension.
    pub d: usize,
    /// Patches per sample.
    pub num_patches: usize,
    /// Feature-sparsity control; each off-class feature is active with probability `s/k`.
    pub s: f64,
    /// Patches per active feature.
    pub cp: usize,
    /// Upper bound of the feature-noise coefficients.
    pub gamma: f64,
    /// Gaussian noise scale on feature patches; `None` means `1/(√d·(ln k)²)`.
    pub sigma_p: Option<f64>,
    /// Probability of drawing a single-view sample.
    pub mu: f64,
    /// Minor-feature mass of single-view samples; `None` means `k^(-0.01)`.
    pub rho: Option<f64>,
    /// When set, [`DataParams::rho_override`] replaces `rho`.
    pub use_rho_override: bool,
    pub rho_override: f64,
    /// Interval for the total `z` mass of a main feature.
    pub z_sum_main: [f64; 2],
    /// Interval for the total `z` mass of an off-class feature.
    pub z_sum_offclass: [f64; 2],
}

impl Default for DataParams {
    fn default() -> Self {
        Self {
            k: 10,
            d: 512,
            num_patches: 20,
            s: 2.0,
            cp: 2,
            gamma: 1e-4,
            sigma_p: None,
            mu: 0.2,
            rho: None,
            use_rho_override: true,
            rho_override: 0.05,
            z_sum_main: [1.0, 1.5],
            z_sum_offclass: [0.2, 0.4],
        }
    }
}

impl DataParams {
    pub fn num_features(&self) -> usize {
        2 * self.k
    }

    pub fn effective_sigma_p(&self) -> f64 {
        self.sigma_p.unwrap_or_else(|| {
            let ln_k = (self.k as f64).ln();
            1.0 / ((self.d as f64).sqrt() * ln_k * ln_k)
        })
    }

    pub fn effective_rho(&self) -> f64 {
        if self.use_rho_override {
            self.rho_override
        } else {
            self.rho.unwrap_or_else(|| (self.k as f64).powf(-0.01))
        }
    }

    /// Standard deviation of the background-patch Gaussian noise, `γk/√d`.
    pub fn background_noise_std(&self) -> f64 {
        self.gamma * self.k as f64 / (self.d as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let arg = |msg: String| Err(LabError::Argument(msg));
        if self.k == 0 {
            return arg("k must be positive".into());
        }
        if self.d < 2 * self.k {
            return Err(LabError::Dimension(format!(
                "d = {} must be at least 2k = {}",
                self.d,
                2 * self.k
            )));
        }
        if self.num_patches == 0 || self.cp == 0 {
            return arg("num_patches and cp must be positive".into());
        }
        if !(self.s >= 0.0) || !(self.gamma >= 0.0) {
            return arg("s and gamma must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return arg(format!("mu = {} is outside [0, 1]", self.mu));
        }
        let sigma = self.effective_sigma_p();
        if !(sigma.is_finite() && sigma >= 0.0) {
            return arg(format!(
                "sigma_p = {sigma} is not a finite non-negative number (set it explicitly when k < 2)"
            ));
        }
        if !(self.effective_rho() > 0.0) {
            return arg("rho must be positive".into());
        }
        for (name, iv) in [
            ("z_sum_main", self.z_sum_main),
            ("z_sum_offclass", self.z_sum_offclass),
        ] {
            if !(iv[0] >= 0.0 && iv[0] <= iv[1] && iv[1].is_finite()) {
                return arg(format!("{name} = {iv:?} is not a valid non-negative interval"));
            }
        }
        let worst = self.cp * (2 + (2.0 * self.s).ceil() as usize);
        if worst > self.num_patches {
            return arg(format!(
                "cp·(2 + ceil(2s)) = {worst} exceeds num_patches = {}",
                self.num_patches
            ));
        }
        Ok(())
    }
}

/// The `2k` orthonormal feature vectors, stored row-wise as a `2k × d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDictionary {
    k: usize,
    vectors: Array2<f64>,
}

impl FeatureDictionary {
    /// Wraps an explicit `2k × d` matrix; rows must be orthonormal.
    pub fn from_rows(vectors: Array2<f64>) -> Result<Self> {
        let rows = vectors.nrows();
        if rows == 0 || !rows.is_multiple_of(2) {
            return Err(LabError::Dimension(format!(
                "dictionary needs an even, positive number of rows, got {rows}"
            )));
        }
        let gram = vectors.dot(&vectors.t());
        let err = max_identity_deviation(&gram.view());
        if err > 1e-8 {
            return Err(LabError::Argument(format!(
                "dictionary rows are not orthonormal (max Gram deviation {err:e})"
            )));
        }
        Ok(Self {
            k: rows / 2,
            vectors,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn num_features(&self) -> usize {
        2 * self.k
    }

    pub fn vector(&self, feature: FeatureId) -> ArrayView1<'_, f64> {
        self.vectors.row(feature.index())
    }

    /// All vectors as rows of a `2k × d` matrix.
    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn gram(&self) -> Array2<f64> {
        self.vectors.dot(&self.vectors.t())
    }
}

pub(crate) fn max_identity_deviation(gram: &ArrayView2<f64>) -> f64 {
    let mut worst = 0.0f64;
    for ((i, j), &g) in gram.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        worst = worst.max((g - target).abs());
    }
    worst
}

/// Draws a `d × 2k` Gaussian matrix and orthonormalizes its columns with
/// two passes of modified Gram-Schmidt.
pub fn build_feature_dictionary<R: Rng + ?Sized>(
    k: usize,
    d: usize,
    rng: &mut R,
) -> Result<FeatureDictionary> {
    if k == 0 {
        return Err(LabError::Argument("k must be positive".into()));
    }
    if d < 2 * k {
        return Err(LabError::Dimension(format!(
            "d = {d} must be at least 2k = {}",
            2 * k
        )));
    }
    let n = 2 * k;
    let mut rows = Array2::<f64>::zeros((n, d));
    for v in rows.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    for i in 0..n {
        for _pass in 0..2 {
            for j in 0..i {
                let (done, mut rest) = rows.view_mut().split_at(Axis(0), i);
                let qj = done.row(j);
                let mut vi = rest.row_mut(0);
                let proj = vi.dot(&qj);
                vi.scaled_add(-proj, &qj);
            }
        }
        let mut vi = rows.row_mut(i);
        let norm = vi.dot(&vi).sqrt();
        if norm < 1e-12 {
            return Err(LabError::Domain(
                "Gaussian draw was numerically rank deficient".into(),
            ));
        }
        vi /= norm;
    }
    Ok(FeatureDictionary { k, vectors: rows })
}

/// Multi-view or single-view tag of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    Multi,
    /// Single-view with the dominant main feature in slot `main_slot`.
    Single { main_slot: usize },
}

impl View {
    pub fn is_single(self) -> bool {
        matches!(self, View::Single { .. })
    }
}

/// An active feature of a sample together with its `Cp` patch indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveFeature {
    pub feature: FeatureId,
    pub patches: Vec<usize>,
}

/// One generated sample plus the metadata needed to probe it.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `P × d` patch matrix.
    pub patches: Array2<f64>,
    pub label: usize,
    pub view: View,
    /// `V(X)` with the patch sets `P_v(X)`; the two main features come first.
    pub active: Vec<ActiveFeature>,
    /// Per-patch `z_p`; zero on patches that carry no feature.
    pub z: Vec<f64>,
    /// `P × 2k` feature-noise coefficients `α_{p,v'}`.
    pub alpha: Array2<f64>,
}

impl LabeledSample {
    pub fn num_patches(&self) -> usize {
        self.patches.nrows()
    }

    pub fn dim(&self) -> usize {
        self.patches.ncols()
    }

    pub fn feature_patches(&self, feature: FeatureId) -> Option<&[usize]> {
        self.active
            .iter()
            .find(|a| a.feature == feature)
            .map(|a| a.patches.as_slice())
    }

    pub fn has_feature(&self, feature: FeatureId) -> bool {
        self.feature_patches(feature).is_some()
    }

    /// Feature carried by patch `p`, if any.
    pub fn patch_feature(&self, p: usize) -> Option<FeatureId> {
        self.active
            .iter()
            .find(|a| a.patches.contains(&p))
            .map(|a| a.feature)
    }

    /// `Σ_{p ∈ P_v} z_p`.
    pub fn z_mass(&self, feature: FeatureId) -> Option<f64> {
        self.feature_patches(feature)
            .map(|ps| ps.iter().map(|&p| self.z[p]).sum())
    }

    /// `Σ_{p ∈ P_v} z_p^q`, kept for auditing the moment condition.
    pub fn z_power_sum(&self, feature: FeatureId, q: i32) -> Option<f64> {
        self.feature_patches(feature)
            .map(|ps| ps.iter().map(|&p| self.z[p].powi(q)).sum())
    }

    /// Gaussian noise component `ξ_p`, recovered as
    /// `x_p − z_p·v − Σ α_{p,v'}·v'`.
    pub fn noise(&self, p: usize, dict: &FeatureDictionary) -> Array1<f64> {
        let mut xi = self.patches.row(p).to_owned();
        if let Some(f) = self.patch_feature(p) {
            xi.scaled_add(-self.z[p], &dict.vector(f));
        }
        let feature_noise = self.alpha.row(p).dot(&dict.matrix());
        xi -= &feature_noise;
        xi
    }
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, iv: [f64; 2]) -> f64 {
    iv[0] + (iv[1] - iv[0]) * rng.random::<f64>()
}

/// Draws one sample from the multi-view / single-view mixture.
pub fn sample_datapoint<R: Rng + ?Sized>(
    dict: &FeatureDictionary,
    params: &DataParams,
    rng: &mut R,
) -> Result<LabeledSample> {
    params.validate()?;
    if dict.k() != params.k || dict.dim() != params.d {
        return Err(LabError::Dimension(format!(
            "dictionary is k = {}, d = {} but params ask for k = {}, d = {}",
            dict.k(),
            dict.dim(),
            params.k,
            params.d
        )));
    }
    let k = params.k;
    let p_count = params.num_patches;

    let label = rng.random_range(0..k);
    let view = if rng.random::<f64>() < params.mu {
        View::Single {
            main_slot: rng.random_range(0..2),
        }
    } else {
        View::Multi
    };

    let mut features = vec![FeatureId::new(label, 0), FeatureId::new(label, 1)];
    let include = (params.s / k as f64).min(1.0);
    for i in (0..k).filter(|&i| i != label) {
        for l in 0..2 {
            if rng.random::<f64>() < include {
                features.push(FeatureId::new(i, l));
            }
        }
    }

    let needed = features.len() * params.cp;
    if needed > p_count {
        return Err(LabError::Assignment {
            needed,
            available: p_count,
        });
    }

    // partial Fisher-Yates: the first `needed` entries are a uniform
    // ordered draw without replacement
    let mut order: Vec<usize> = (0..p_count).collect();
    for i in 0..needed {
        let j = rng.random_range(i..p_count);
        order.swap(i, j);
    }

    let rho = params.effective_rho();
    let mut z = vec![0.0; p_count];
    let mut active = Vec::with_capacity(features.len());
    for (slot_idx, &feature) in features.iter().enumerate() {
        let mut patches = order[slot_idx * params.cp..(slot_idx + 1) * params.cp].to_vec();
        patches.sort_unstable();
        let interval = if feature.class != label {
            params.z_sum_offclass
        } else {
            match view {
                View::Multi => params.z_sum_main,
                View::Single { main_slot } if main_slot == feature.slot => params.z_sum_main,
                View::Single { .. } => [rho, 1.5 * rho],
            }
        };
        let total = uniform_in(rng, interval);
        let weights: Vec<f64> = (0..params.cp).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let wsum: f64 = weights.iter().sum();
        for (&p, w) in patches.iter().zip(&weights) {
            z[p] = total * w / wsum;
        }
        active.push(ActiveFeature { feature, patches });
    }

    let mut feature_of = vec![None; p_count];
    for a in &active {
        for &p in &a.patches {
            feature_of[p] = Some(a.feature);
        }
    }

    let nf = 2 * k;
    let sigma_feature = params.effective_sigma_p();
    let sigma_background = params.background_noise_std();
    let mut alpha = Array2::<f64>::zeros((p_count, nf));
    let mut x = Array2::<f64>::zeros((p_count, params.d));
    let basis = dict.matrix();
    for p in 0..p_count {
        for a in alpha.row_mut(p).iter_mut() {
            *a = params.gamma * rng.random::<f64>();
        }
        let sigma = if feature_of[p].is_some() {
            sigma_feature
        } else {
            sigma_background
        };
        let mut row = x.row_mut(p);
        for v in row.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *v = sigma * g;
        }
        for j in 0..nf {
            row.scaled_add(alpha[[p, j]], &basis.row(j));
        }
        if let Some(f) = feature_of[p] {
            row.scaled_add(z[p], &dict.vector(f));
        }
    }

    Ok(LabeledSample {
        patches: x,
        label,
        view,
        active,
        z,
        alpha,
    })
}

/// Per-class counts and audit ranges for a drawn dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub multi_per_class: Vec<usize>,
    pub single_per_class: Vec<usize>,
    /// Draws discarded because their active features did not fit into `P` patches.
    pub rejected_draws: usize,
    /// Range of `Σ z_p^3` over dominant main features.
    pub main_z_cube_sum: [f64; 2],
    /// Range of `Σ z_p^4` over dominant main features.
    pub main_z_fourth_sum: [f64; 2],
}

impl DatasetSummary {
    pub fn from_samples(k: usize, samples: &[LabeledSample], rejected_draws: usize) -> Self {
        let mut multi = vec![0; k];
        let mut single = vec![0; k];
        let mut cube = [f64::INFINITY, f64::NEG_INFINITY];
        let mut fourth = [f64::INFINITY, f64::NEG_INFINITY];
        for x in samples {
            match x.view {
                View::Multi => multi[x.label] += 1,
                View::Single { .. } => single[x.label] += 1,
            }
            let dominant: Vec<usize> = match x.view {
                View::Multi => vec![0, 1],
                View::Single { main_slot } => vec![main_slot],
            };
            for l in dominant {
                let f = FeatureId::new(x.label, l);
                if let (Some(c), Some(q)) = (x.z_power_sum(f, 3), x.z_power_sum(f, 4)) {
                    cube = [cube[0].min(c), cube[1].max(c)];
                    fourth = [fourth[0].min(q), fourth[1].max(q)];
                }
            }
        }
        Self {
            n: samples.len(),
            multi_per_class: multi,
            single_per_class: single,
            rejected_draws,
            main_z_cube_sum: cube,
            main_z_fourth_sum: fourth,
        }
    }

    pub fn single_total(&self) -> usize {
        self.single_per_class.iter().sum()
    }

    pub fn multi_total(&self) -> usize {
        self.multi_per_class.iter().sum()
    }
}

/// A drawn dataset with the parameters that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub params: DataParams,
    pub samples: Vec<LabeledSample>,
    pub summary: DatasetSummary,
}

impl Dataset {
    pub fn new(params: DataParams, samples: Vec<LabeledSample>, rejected_draws: usize) -> Self {
        let summary = DatasetSummary::from_samples(params.k, &samples, rejected_draws);
        Self {
            params,
            samples,
            summary,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

const MAX_CONSECUTIVE_REJECTIONS: usize = 10_000;

/// Draws `n` samples. Draws whose active features do not fit into `P`
/// patches are discarded and redrawn; the discard count is reported in
/// the summary.
pub fn sample_dataset<R: Rng + ?Sized>(
    n: usize,
    dict: &FeatureDictionary,
    params: &DataParams,
    rng: &mut R,
) -> Result<Dataset> {
    if n == 0 {
        return Err(LabError::Argument("dataset size must be at least 1".into()));
    }
    let mut samples = Vec::with_capacity(n);
    let mut rejected = 0;
    while samples.len() < n {
        let mut streak = 0;
        let sample = loop {
            match sample_datapoint(dict, params, rng) {
                Ok(x) => break x,
                Err(e @ LabError::Assignment { .. }) => {
                    rejected += 1;
                    streak += 1;
                    if streak >= MAX_CONSECUTIVE_REJECTIONS {
                        return Err(e);
                    }
                }
                Err(e) => return Err(e),
            }
        };
        samples.push(sample);
    }
    Ok(Dataset::new(params.clone(), samples, rejected))
}

/// Per-patch Bernoulli keep indicators `ε_p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVector {
    pub bits: Vec<bool>,
}

impl MaskVector {
    pub fn sample<R: Rng + ?Sized>(num_patches: usize, theta: f64, rng: &mut R) -> Self {
        Self {
            bits: (0..num_patches).map(|_| rng.random::<f64>() < theta).collect(),
        }
    }

    pub fn all_ones(num_patches: usize) -> Self {
        Self {
            bits: vec![true; num_patches],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `εX = (ε_1 x_1, …, ε_P x_P)`.
pub fn apply_mask(x: &LabeledSample, eps: &MaskVector) -> Result<Array2<f64>> {
    mask_patches(&x.patches.view(), eps)
}

pub(crate) fn mask_patches(patches: &ArrayView2<f64>, eps: &MaskVector) -> Result<Array2<f64>> {
    crate::error::dim_check("mask length", patches.nrows(), eps.len())?;
    let mut out = patches.to_owned();
    for (p, &keep) in eps.bits.iter().enumerate() {
        if !keep {
            out.slice_mut(s![p, ..]).fill(0.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_params() -> DataParams {
        DataParams {
            k: 4,
            d: 32,
            num_patches: 16,
            s: 1.0,
            ..DataParams::default()
        }
    }

    #[test]
    fn dictionary_in_r2_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dict = build_feature_dictionary(1, 2, &mut rng).unwrap();
        let a = dict.vector(FeatureId::new(0, 0));
        let b = dict.vector(FeatureId::new(0, 1));
        assert!(a.dot(&b).abs() < 1e-12);
        assert!((a.dot(&a) - 1.0).abs() < 1e-12);
        assert!((b.dot(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dictionary_gram_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dict = build_feature_dictionary(5, 64, &mut rng).unwrap();
        // explicit entrywise Gram computation
        let n = dict.num_features();
        for i in 0..n {
            for j in 0..n {
                let vi = dict.vector(FeatureId::from_index(i));
                let vj = dict.vector(FeatureId::from_index(j));
                let g: f64 = vi.iter().zip(vj.iter()).map(|(a, b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((g - target).abs() < 1e-10, "G[{i},{j}] = {g}");
            }
        }
    }

    #[test]
    fn dictionary_rejects_small_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            build_feature_dictionary(5, 9, &mut rng),
            Err(LabError::Dimension(_))
        ));
    }

    #[test]
    fn dictionary_is_deterministic() {
        let a = build_feature_dictionary(3, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_feature_dictionary(3, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mu_zero_gives_only_multi_view() {
        let params = DataParams {
            mu: 0.0,
            ..small_params()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dict = build_feature_dictionary(params.k, params.d, &mut rng).unwrap();
        for _ in 0..10_000 {
            let x = sample_datapoint(&dict, &params, &mut rng).unwrap();
            assert_eq!(x.view, View::Multi);
        }
    }

    #[test]
    fn s_zero_keeps_only_main_features() {
        let params = DataParams {
            s: 0.0,
            ..small_params()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dict = build_feature_dictionary(params.k, params.d, &mut rng).unwrap();
        for _ in 0..500 {
            let x = sample_datapoint(&dict, &params, &mut rng).unwrap();
            let feats: Vec<FeatureId> = x.active.iter().map(|a| a.feature).collect();
            assert_eq!(
                feats,
                vec![FeatureId::new(x.label, 0), FeatureId::new(x.label, 1)]
            );
        }
    }

    #[test]
    fn sample_metadata_invariants() {
        let params = small_params();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dict = build_feature_dictionary(params.k, params.d, &mut rng).unwrap();
        let rho = params.effective_rho();
        for _ in 0..2000 {
            let x = sample_datapoint(&dict, &params, &mut rng).unwrap();
            let mut seen = vec![false; params.num_patches];
            for a in &x.active {
                assert_eq!(a.patches.len(), params.cp);
                for &p in &a.patches {
                    assert!(!seen[p], "patch {p} assigned twice");
                    seen[p] = true;
                }
            }
            let main = [FeatureId::new(x.label, 0), FeatureId::new(x.label, 1)];
            let in_iv = |m: f64, iv: [f64; 2]| m >= iv[0] - 1e-12 && m <= iv[1] + 1e-12;
            match x.view {
                View::Multi => {
                    for f in main {
                        assert!(in_iv(x.z_mass(f).unwrap(), params.z_sum_main));
                    }
                }
                View::Single { main_slot } => {
                    let dom = FeatureId::new(x.label, main_slot);
                    assert!(in_iv(x.z_mass(dom).unwrap(), params.z_sum_main));
                    assert!(in_iv(x.z_mass(dom.sibling()).unwrap(), [rho, 1.5 * rho]));
                }
            }
            for a in x.active.iter().filter(|a| a.feature.class != x.label) {
                assert!(in_iv(x.z_mass(a.feature).unwrap(), params.z_sum_offclass));
            }
            for &alpha in x.alpha.iter() {
                assert!((0.0..=params.gamma).contains(&alpha));
            }
        }
    }

    #[test]
    fn noise_recovery_matches_construction() {
        let params = DataParams {
            gamma: 0.05,
            ..small_params()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dict = build_feature_dictionary(params.k, params.d, &mut rng).unwrap();
        let x = sample_datapoint(&dict, &params, &mut rng).unwrap();
        for p in 0..x.num_patches() {
            let xi = x.noise(p, &dict);
            // noise is the remainder after removing every dictionary term
            let mut rebuilt = xi.clone();
            rebuilt += &x.alpha.row(p).dot(&dict.matrix());
            if let Some(f) = x.patch_feature(p) {
                rebuilt.scaled_add(x.z[p], &dict.vector(f));
            }
            for (a, b) in rebuilt.iter().zip(x.patches.row(p).iter()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn infeasible_assignment_is_reported() {
        // passes validation (2·(2 + 2) = 8 ≤ 8) but three or more off-class
        // features overflow the 8 patches
        let params = DataParams {
            num_patches: 8,
            cp: 2,
            s: 1.0,
            ..small_params()
        };
        params.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dict = build_feature_dictionary(params.k, params.d, &mut rng).unwrap();
        let mut overflowed = 0;
        for _ in 0..500 {
            match sample_datapoint(&dict, &params, &mut rng) {
                Ok(x) => assert!(x.active.len() * params.cp <= params.num_patches),
                Err(LabError::Assignment { needed, available }) => {
                    assert!(needed > available);
                    overflowed += 1;
                }
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(overflowed > 0);
        let ds = sample_dataset(200, &dict, &params, &mut rng).unwrap();
        assert_eq!(ds.len(), 200);
        assert!(ds.summary.rejected_draws > 0);
    }

    #[test]
    fn empty_dataset_rejected() {
        let params = small_params();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dict = build_feature_dictionary(params.k, params.d, &mut rng).unwrap();
        assert!(matches!(
            sample_dataset(0, &dict, &params, &mut rng),
            Err(LabError::Argument(_))
        ));
    }

    #[test]
    fn mask_identity_zero_and_single() {
        let params = small_params();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dict = build_feature_dictionary(params.k, params.d, &mut rng).unwrap();
        let x = sample_datapoint(&dict, &params, &mut rng).unwrap();
        let p = x.num_patches();

        assert_eq!(apply_mask(&x, &MaskVector::all_ones(p)).unwrap(), x.patches);

        let zeros = MaskVector { bits: vec![false; p] };
        assert!(apply_mask(&x, &zeros).unwrap().iter().all(|&v| v == 0.0));

        let mut one_off = MaskVector::all_ones(p);
        one_off.bits[3] = false;
        let masked = apply_mask(&x, &one_off).unwrap();
        for q in 0..p {
            if q == 3 {
                assert!(masked.row(q).iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(masked.row(q), x.patches.row(q));
            }
        }

        let short = MaskVector::all_ones(p - 1);
        assert!(matches!(apply_mask(&x, &short), Err(LabError::Dimension(_))));
    }

    #[test]
    fn validate_rejects_bad_params() {
        let mut p = small_params();
        p.mu = 1.5;
        assert!(p.validate().is_err());
        let mut p = small_params();
        p.d = 7;
        assert!(matches!(p.validate(), Err(LabError::Dimension(_))));
        let mut p = small_params();
        p.num_patches = 5;
        assert!(p.validate().is_err());
        assert!(DataParams::default().validate().is_ok());
    }
}
