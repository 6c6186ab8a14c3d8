//! Configuration-driven experiment runner.
//!
//! One top-level seed drives everything: each purpose (dictionary, each
//! data split, initialization, probes, masks) draws from its own stream of
//! the seeded generator, see [`crate::seeds`]. Given the same config the
//! runner writes byte-identical CSV and JSON files.
//!
//! Output layout of a full comparison run:
//!
//! ```text
//! <out>/config.toml             resolved configuration
//! <out>/dataset_summary.json    per-split summaries
//! <out>/candidate_sets.json     M^(0) and the initial hypothesis report
//! <out>/<pipeline>/pretrain_trace.csv       (ts_mrp, mae_mrp)
//! <out>/<pipeline>/pretrain_snapshots.csv   (with verbose probes)
//! <out>/<pipeline>/capture.json             (ts_mrp, mae_mrp)
//! <out>/<pipeline>/encoder.ckpt             (ts_mrp, mae_mrp)
//! <out>/<pipeline>/finetune_trace.csv
//! <out>/<pipeline>/model.ckpt
//! <out>/<pipeline>/eval.json
//! <out>/comparison.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    build_feature_dictionary, sample_dataset, DataParams, Dataset, DatasetSummary,
    FeatureDictionary, LabeledSample,
};
use crate::downstream::{evaluate, finetune, train_supervised, EncoderInit, EvalReport, FinetuneConfig};
use crate::error::{LabError, Result};
use crate::io::{save_checkpoint, save_dataset, write_json};
use crate::network::{ActivationParams, EncoderWeights, HeadWeights};
use crate::pretrain_mae::{pretrain_mae, MaeConfig};
use crate::pretrain_ts::{pretrain_ts, TsConfig};
use crate::probe::{
    candidate_sets, capture_report, correlation_matrix, hypothesis_report, psi_rank_agreement,
    CandidateSets, CaptureReport, HypothesisReport, HypothesisThresholds, ProbeSet,
};
use crate::seeds::{rng_for, Stream};
use crate::trace::TrainTrace;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    TsMrp,
    MaeMrp,
    Supervised,
}

impl Pipeline {
    pub const ALL: [Pipeline; 3] = [Pipeline::TsMrp, Pipeline::MaeMrp, Pipeline::Supervised];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::TsMrp => "ts_mrp",
            Pipeline::MaeMrp => "mae_mrp",
            Pipeline::Supervised => "supervised",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                LabError::Config(format!(
                    "unknown pipeline `{s}`; expected one of ts_mrp, mae_mrp, supervised"
                ))
            })
    }

    pub fn is_pretrained(self) -> bool {
        self != Pipeline::Supervised
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sizes {
    pub n_pretrain: usize,
    pub n_test: usize,
    /// Held-out samples with metadata used by the probes.
    pub n_probe: usize,
    /// Test samples used for the Ψ-margin rank agreement.
    pub n_psi: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self {
            n_pretrain: 4000,
            n_test: 5000,
            n_probe: 200,
            n_psi: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Kernels per class.
    pub m: usize,
    /// Initialization scale; `None` means `1/(2√k)`.
    pub sigma0: Option<f64>,
    /// Margin constant of the candidate-set threshold.
    pub c2: f64,
    /// Hypothesis tolerances are `hypothesis_c·σ₀·ln²k`.
    pub hypothesis_c: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            m: 6,
            sigma0: None,
            c2: 1.0,
            hypothesis_c: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn sigma0_for(&self, k: usize) -> f64 {
        self.sigma0.unwrap_or(0.5 / (k as f64).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub pipelines: Vec<Pipeline>,
    /// Used when no output directory is given on the command line.
    pub output_dir: Option<PathBuf>,
    pub verbose_probes: bool,
    /// Adds wall-clock timings to the comparison report, which makes it
    /// differ between otherwise identical runs.
    pub record_timing: bool,
    /// Run the selected pipelines concurrently.
    pub parallel: bool,
    pub data: DataParams,
    pub sizes: Sizes,
    pub model: ModelConfig,
    /// Teacher-student pretraining; its activation is also used when
    /// fine-tuning the resulting encoder.
    pub pretrain: TsConfig,
    /// MAE pretraining; its activation is also used when fine-tuning the
    /// resulting encoder.
    pub mae: MaeConfig,
    pub finetune: FinetuneConfig,
    /// The from-scratch baseline; it uses the `pretrain` activation.
    pub supervised: FinetuneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            pipelines: vec![Pipeline::TsMrp, Pipeline::Supervised],
            output_dir: None,
            verbose_probes: false,
            record_timing: false,
            parallel: false,
            data: DataParams::default(),
            sizes: Sizes::default(),
            model: ModelConfig::default(),
            pretrain: TsConfig::default(),
            mae: MaeConfig::default(),
            finetune: FinetuneConfig::default(),
            supervised: FinetuneConfig {
                init: EncoderInit::Scratch { sigma0: None },
                ..FinetuneConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            LabError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(LabError::Config(format!(
                "schema_version = {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.pipelines.is_empty() {
            return Err(LabError::Config("pipelines: select at least one pipeline".into()));
        }
        self.data
            .validate()
            .map_err(|e| LabError::Config(format!("data: {e}")))?;
        let k = self.data.k;
        if self.sizes.n_pretrain == 0 || self.sizes.n_test == 0 || self.sizes.n_probe == 0 {
            return Err(LabError::Config("sizes: every split needs at least one sample".into()));
        }
        if self.model.m == 0 {
            return Err(LabError::Config("model.m must be ≥ 1".into()));
        }
        let s0 = self.model.sigma0_for(k);
        if !(s0 > 0.0 && s0.is_finite()) {
            return Err(LabError::Config(format!("model.sigma0 = {s0} must be positive")));
        }
        if self.has(Pipeline::TsMrp) {
            self.pretrain.validate()?;
        }
        if self.has(Pipeline::MaeMrp) {
            self.mae.validate()?;
        }
        if self.has(Pipeline::TsMrp) || self.has(Pipeline::MaeMrp) {
            self.finetune
                .validate(k)
                .map_err(|e| LabError::Config(format!("finetune: {e}")))?;
            if !matches!(self.finetune.init, EncoderInit::Pretrained { .. }) {
                return Err(LabError::Config(
                    "finetune.init.kind must be \"pretrained\"".into(),
                ));
            }
        }
        if self.has(Pipeline::Supervised) {
            self.supervised
                .validate(k)
                .map_err(|e| LabError::Config(format!("supervised: {e}")))?;
            if !matches!(self.supervised.init, EncoderInit::Scratch { .. }) {
                return Err(LabError::Config(
                    "supervised.init.kind must be \"scratch\"".into(),
                ));
            }
            self.pretrain
                .act
                .validate()
                .map_err(|e| LabError::Config(format!("pretrain.act: {e}")))?;
            // every pipeline trains on the same downstream split
            if self.supervised.n2 != self.finetune.n2 {
                return Err(LabError::Config(format!(
                    "supervised.n2 = {} must equal finetune.n2 = {} (the pipelines share the downstream split)",
                    self.supervised.n2, self.finetune.n2
                )));
            }
        }
        Ok(())
    }

    pub fn has(&self, p: Pipeline) -> bool {
        self.pipelines.contains(&p)
    }

    /// Selected pipelines in canonical order, without duplicates.
    pub fn ordered_pipelines(&self) -> Vec<Pipeline> {
        Pipeline::ALL.into_iter().filter(|p| self.has(*p)).collect()
    }

    pub fn sigma0(&self) -> f64 {
        self.model.sigma0_for(self.data.k)
    }

    /// Activation used by `pipeline`, both for pretraining and downstream.
    pub fn activation(&self, pipeline: Pipeline) -> ActivationParams {
        match pipeline {
            Pipeline::MaeMrp => self.mae.act,
            _ => self.pretrain.act,
        }
    }
}

/// What to do when the output directory already has content.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OutputPolicy {
    #[default]
    Refuse,
    Overwrite,
    /// Use `<dir>-1`, `<dir>-2`, … instead.
    Version,
}

/// Creates the output directory according to `policy` and returns the
/// directory actually used.
pub fn prepare_output_dir(dir: &Path, policy: OutputPolicy) -> Result<PathBuf> {
    let occupied = |p: &Path| p.exists() && fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(true);
    let target = if occupied(dir) {
        match policy {
            OutputPolicy::Refuse => return Err(LabError::OutputExists(dir.display().to_string())),
            OutputPolicy::Overwrite => {
                fs::remove_dir_all(dir)?;
                dir.to_path_buf()
            }
            OutputPolicy::Version => {
                let mut i = 1;
                loop {
                    let cand = PathBuf::from(format!("{}-{i}", dir.display()));
                    if !occupied(&cand) {
                        break cand;
                    }
                    i += 1;
                }
            }
        }
    } else {
        dir.to_path_buf()
    };
    fs::create_dir_all(&target)?;
    Ok(target)
}

/// The data splits of one experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Pretrain,
    Downstream,
    Test,
    Probe,
}

impl Split {
    fn stream(self) -> Stream {
        match self {
            Split::Pretrain => Stream::PretrainData,
            Split::Downstream => Stream::DownstreamData,
            Split::Test => Stream::TestData,
            Split::Probe => Stream::Probe,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Downstream => "downstream",
            Split::Test => "test",
            Split::Probe => "probe",
        }
    }
}

pub fn make_dictionary(cfg: &ExperimentConfig) -> Result<FeatureDictionary> {
    build_feature_dictionary(cfg.data.k, cfg.data.d, &mut rng_for(cfg.seed, Stream::Dictionary))
}

pub fn split_size(cfg: &ExperimentConfig, split: Split) -> usize {
    match split {
        Split::Pretrain => cfg.sizes.n_pretrain,
        Split::Downstream => cfg.finetune.n2,
        Split::Test => cfg.sizes.n_test,
        Split::Probe => cfg.sizes.n_probe,
    }
}

pub fn make_split(cfg: &ExperimentConfig, dict: &FeatureDictionary, split: Split) -> Result<Dataset> {
    sample_dataset(
        split_size(cfg, split),
        dict,
        &cfg.data,
        &mut rng_for(cfg.seed, split.stream()),
    )
}

/// Shared Gaussian initialization of the pretraining pipelines.
pub fn initial_encoder(cfg: &ExperimentConfig) -> EncoderWeights {
    EncoderWeights::gaussian(
        cfg.data.k,
        cfg.model.m,
        cfg.data.d,
        cfg.sigma0(),
        &mut rng_for(cfg.seed, Stream::Init),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub summary: DatasetSummary,
}

/// Writes every split to `<out>/data/<split>.bin` plus `dataset_summary.json`.
pub fn run_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SplitSummary>> {
    let dict = make_dictionary(cfg)?;
    let data_dir = out.join("data");
    fs::create_dir_all(&data_dir)?;
    let mut summaries = Vec::new();
    for split in [Split::Pretrain, Split::Downstream, Split::Test, Split::Probe] {
        let ds = make_split(cfg, &dict, split)?;
        save_dataset(&data_dir.join(format!("{}.bin", split.name())), &ds, &dict, Some(cfg.seed))?;
        summaries.push(SplitSummary {
            split: split.name().to_string(),
            summary: ds.summary.clone(),
        });
    }
    write_json(&out.join("dataset_summary.json"), &summaries)?;
    Ok(summaries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureSummary {
    pub captured_fraction: f64,
    pub winner_in_m0_fraction: f64,
    pub mean_specialization_ratio: f64,
    /// Fraction of winning kernels whose second-largest correlation is at
    /// most `max(5σ₀·ln k, 0.25·top)`.
    pub specialized_fraction: f64,
    pub candidate_mean_size: f64,
    pub candidate_max_size: usize,
    /// Features whose final `Λ` exceeds `√(θ/|M|)` (MAE diagnostic).
    pub lambda_bound_exceeded: Option<usize>,
}

impl CaptureSummary {
    pub fn from_report(rep: &CaptureReport, m0: &CandidateSets, sigma0: f64, k: usize) -> Self {
        Self {
            captured_fraction: rep.captured_fraction,
            winner_in_m0_fraction: rep.winner_in_m0_fraction,
            mean_specialization_ratio: rep.mean_specialization_ratio,
            specialized_fraction: rep.specialized_fraction(5.0 * sigma0 * (k as f64).ln(), 0.25),
            candidate_mean_size: m0.mean_size(),
            candidate_max_size: m0.max_size(),
            lambda_bound_exceeded: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureFile {
    pub summary: CaptureSummary,
    pub report: CaptureReport,
    pub hypothesis_final: HypothesisReport,
    pub trace_warnings: Vec<String>,
}

/// Result of one pretraining pipeline.
pub struct PretrainOutcome {
    pub encoder: EncoderWeights,
    pub trace: TrainTrace,
    pub capture: CaptureFile,
}

/// Pretrains from `w0` with the pipeline's objective and measures capture.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_pipeline(
    cfg: &ExperimentConfig,
    pipeline: Pipeline,
    w0: &EncoderWeights,
    m0: &CandidateSets,
    dict: &FeatureDictionary,
    data: &Dataset,
    probe_samples: &[LabeledSample],
) -> Result<PretrainOutcome> {
    let mut probes = ProbeSet::new(dict);
    if cfg.verbose_probes {
        probes = probes.with_snapshots(probe_samples);
    }
    let (encoder, trace) = match pipeline {
        Pipeline::TsMrp => pretrain_ts(w0, data, &cfg.pretrain, &probes)?,
        Pipeline::MaeMrp => pretrain_mae(w0, data, &cfg.mae, &probes)?,
        Pipeline::Supervised => {
            return Err(LabError::Argument("the supervised pipeline has no pretraining".into()))
        }
    };
    let act = cfg.activation(pipeline);
    let corr = correlation_matrix(&encoder, dict)?;
    let report = capture_report(&corr.view(), m0, act.varrho)?;
    let sigma0 = cfg.sigma0();
    let k = cfg.data.k;
    let mut summary = CaptureSummary::from_report(&report, m0, sigma0, k);
    if pipeline == Pipeline::MaeMrp {
        let theta = cfg.mae.theta;
        summary.lambda_bound_exceeded = Some(
            report
                .features
                .iter()
                .zip(&m0.sets)
                .filter(|(f, set)| f.lambda > (theta / set.len() as f64).sqrt())
                .count(),
        );
    }
    let thresholds = HypothesisThresholds::scaled(sigma0, k, cfg.model.hypothesis_c);
    let hypothesis_final = hypothesis_report(&encoder, dict, probe_samples, m0, &thresholds)?;
    let capture = CaptureFile {
        summary,
        report,
        hypothesis_final,
        trace_warnings: trace.warnings.clone(),
    };
    Ok(PretrainOutcome {
        encoder,
        trace,
        capture,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub pipeline: Pipeline,
    pub eval: EvalReport,
    pub capture: Option<CaptureSummary>,
    pub final_pretrain_loss: Option<f64>,
    pub final_finetune_loss: f64,
    /// Fraction of test samples whose Ψ-proxy margins rank-correlate
    /// positively with the true logit margins.
    pub psi_agreement: Option<f64>,
    pub warnings: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleViewGap {
    pub pipeline: Pipeline,
    pub mrp_single_view: f64,
    pub supervised_single_view: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub seed: u64,
    pub pipelines: Vec<PipelineSummary>,
    pub single_view_gaps: Vec<SingleViewGap>,
    pub timings: Option<Vec<Timing>>,
}

impl ComparisonReport {
    pub fn summary(&self, p: Pipeline) -> Option<&PipelineSummary> {
        self.pipelines.iter().find(|s| s.pipeline == p)
    }

    /// Gap entries agree with the recorded slice accuracies.
    pub fn is_consistent(&self) -> bool {
        let Some(sup) = self.summary(Pipeline::Supervised) else {
            return self.single_view_gaps.is_empty();
        };
        self.single_view_gaps.iter().all(|g| {
            self.summary(g.pipeline).is_some_and(|s| {
                s.eval.accuracy_singleview == g.mrp_single_view
                    && sup.eval.accuracy_singleview == g.supervised_single_view
                    && g.gap == g.mrp_single_view - g.supervised_single_view
            })
        })
    }

    fn fill_gaps(&mut self) {
        let Some(sup) = self.summary(Pipeline::Supervised).map(|s| s.eval.accuracy_singleview) else {
            return;
        };
        self.single_view_gaps = self
            .pipelines
            .iter()
            .filter(|s| s.pipeline.is_pretrained())
            .map(|s| SingleViewGap {
                pipeline: s.pipeline,
                mrp_single_view: s.eval.accuracy_singleview,
                supervised_single_view: sup,
                gap: s.eval.accuracy_singleview - sup,
            })
            .collect();
    }
}

/// Fraction of `samples` whose Ψ-proxy ordering agrees positively with the
/// logit ordering (undefined rank correlations count as disagreement).
pub fn psi_agreement(
    w: &EncoderWeights,
    head: &HeadWeights,
    dict: &FeatureDictionary,
    m0: &CandidateSets,
    samples: &[LabeledSample],
    rho: f64,
    act: &ActivationParams,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut agree = 0;
    for x in samples {
        if let Some(r) = psi_rank_agreement(w, head, dict, m0, x, rho, act)? {
            if r > 0.0 {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / samples.len() as f64)
}

/// Fine-tunes (or trains from scratch), evaluates and writes the
/// downstream artifacts of one pipeline into `dir`.
#[allow(clippy::too_many_arguments)]
pub fn downstream_pipeline(
    cfg: &ExperimentConfig,
    pipeline: Pipeline,
    encoder: Option<&EncoderWeights>,
    dict: &FeatureDictionary,
    down: &Dataset,
    test: &Dataset,
    dir: &Path,
) -> Result<(EncoderWeights, HeadWeights, EvalReport, f64)> {
    fs::create_dir_all(dir)?;
    let act = cfg.activation(pipeline);
    let probes = ProbeSet::new(dict);
    let (w, head, trace) = match (pipeline, encoder) {
        (Pipeline::Supervised, _) => train_supervised(
            down,
            &cfg.supervised,
            cfg.model.m,
            &act,
            &probes,
            &mut rng_for(cfg.seed, Stream::ScratchInit),
        )?,
        (_, Some(w0)) => finetune(w0, down, &cfg.finetune, &act, &probes)?,
        (_, None) => {
            return Err(LabError::Argument(format!(
                "pipeline {} needs a pretrained encoder",
                pipeline.name()
            )))
        }
    };
    trace.write_csv(fs::File::create(dir.join("finetune_trace.csv"))?)?;
    save_checkpoint(&dir.join("model.ckpt"), &w, Some(&head), Some(trace.records.last().map_or(0, |r| r.t)))?;
    let eval = evaluate(&w, &head, &test.samples, &act)?;
    write_json(&dir.join("eval.json"), &eval)?;
    let loss = trace.last_loss().unwrap_or(f64::NAN);
    Ok((w, head, eval, loss))
}

/// Writes the pretraining artifacts of one pipeline into `dir`.
pub fn write_pretrain_outputs(cfg: &ExperimentConfig, outcome: &PretrainOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let tagged = outcome.trace.framework == "mae";
    outcome
        .trace
        .write_csv(fs::File::create(dir.join("pretrain_trace.csv"))?, tagged)?;
    if cfg.verbose_probes {
        outcome
            .trace
            .write_snapshots_csv(fs::File::create(dir.join("pretrain_snapshots.csv"))?)?;
    }
    for (t, w) in &outcome.trace.checkpoints {
        save_checkpoint(&dir.join(format!("encoder_t{t:06}.ckpt")), w, None, Some(*t))?;
    }
    write_json(&dir.join("capture.json"), &outcome.capture)?;
    let last = outcome.trace.records.last().map(|r| r.t);
    save_checkpoint(&dir.join("encoder.ckpt"), &outcome.encoder, None, last)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateFile {
    pub c2: f64,
    pub sizes: Vec<usize>,
    pub mean_size: f64,
    pub max_size: usize,
    pub lambda0: Vec<f64>,
    pub sets: Vec<Vec<usize>>,
    pub hypothesis_initial: HypothesisReport,
}

/// Initial encoder, its candidate sets and the `t = 0` hypothesis report.
pub fn initial_state(
    cfg: &ExperimentConfig,
    dict: &FeatureDictionary,
    probe_samples: &[LabeledSample],
) -> Result<(EncoderWeights, CandidateSets, CandidateFile)> {
    let w0 = initial_encoder(cfg);
    let corr0 = correlation_matrix(&w0, dict)?;
    let m0 = candidate_sets(&corr0.view(), cfg.model.c2)?;
    let thresholds = HypothesisThresholds::scaled(cfg.sigma0(), cfg.data.k, cfg.model.hypothesis_c);
    let hypothesis_initial = hypothesis_report(&w0, dict, probe_samples, &m0, &thresholds)?;
    let file = CandidateFile {
        c2: m0.c2,
        sizes: m0.sizes(),
        mean_size: m0.mean_size(),
        max_size: m0.max_size(),
        lambda0: m0.lambda0.clone(),
        sets: m0.sets.clone(),
        hypothesis_initial,
    };
    Ok((w0, m0, file))
}

/// Pretrains every selected MRP pipeline and writes its artifacts.
pub fn run_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(Pipeline, CaptureSummary)>> {
    let dict = make_dictionary(cfg)?;
    let data = make_split(cfg, &dict, Split::Pretrain)?;
    let probe = make_split(cfg, &dict, Split::Probe)?;
    let (w0, m0, cand) = initial_state(cfg, &dict, &probe.samples)?;
    write_json(&out.join("candidate_sets.json"), &cand)?;
    let mut done = Vec::new();
    for p in cfg.ordered_pipelines().into_iter().filter(|p| p.is_pretrained()) {
        let outcome = pretrain_pipeline(cfg, p, &w0, &m0, &dict, &data, &probe.samples)?;
        write_pretrain_outputs(cfg, &outcome, &out.join(p.name()))?;
        done.push((p, outcome.capture.summary));
    }
    Ok(done)
}

/// Runs the downstream stage of every selected pipeline. MRP pipelines read
/// `encoder`, which must be given when one is selected.
pub fn run_finetune(
    cfg: &ExperimentConfig,
    encoder: Option<&EncoderWeights>,
    out: &Path,
) -> Result<Vec<(Pipeline, EvalReport)>> {
    let dict = make_dictionary(cfg)?;
    let down = make_split(cfg, &dict, Split::Downstream)?;
    let test = make_split(cfg, &dict, Split::Test)?;
    let mut done = Vec::new();
    for p in cfg.ordered_pipelines() {
        let (_, _, eval, _) = downstream_pipeline(cfg, p, encoder, &dict, &down, &test, &out.join(p.name()))?;
        done.push((p, eval));
    }
    Ok(done)
}

/// Evaluates a stored model on the configured test split.
pub fn run_evaluate(
    cfg: &ExperimentConfig,
    w: &EncoderWeights,
    head: &HeadWeights,
    act: &ActivationParams,
    out: &Path,
) -> Result<EvalReport> {
    let dict = make_dictionary(cfg)?;
    let test = make_split(cfg, &dict, Split::Test)?;
    let eval = evaluate(w, head, &test.samples, act)?;
    write_json(&out.join("eval.json"), &eval)?;
    Ok(eval)
}

/// Shared inputs of the per-pipeline stages of [`run_experiment`].
struct Stage<'a> {
    cfg: &'a ExperimentConfig,
    dict: &'a FeatureDictionary,
    pre: Option<&'a Dataset>,
    probe: &'a Dataset,
    down: &'a Dataset,
    test: &'a Dataset,
    w0: &'a EncoderWeights,
    m0: &'a CandidateSets,
    out: &'a Path,
}

impl Stage<'_> {
    fn run(&self, p: Pipeline) -> Result<(PipelineSummary, Vec<Timing>)> {
        let cfg = self.cfg;
        let dir = self.out.join(p.name());
        let mut timings = Vec::new();
        let mut clock = Instant::now();
        let (encoder, capture, pre_loss, warn) = if p.is_pretrained() {
            let pre = self.pre.expect("pretrain split exists when an MRP pipeline is selected");
            let outcome = pretrain_pipeline(cfg, p, self.w0, self.m0, self.dict, pre, &self.probe.samples)?;
            write_pretrain_outputs(cfg, &outcome, &dir)?;
            timings.push(Timing {
                stage: format!("{}_pretrain", p.name()),
                seconds: clock.elapsed().as_secs_f64(),
            });
            clock = Instant::now();
            let warn = outcome.trace.warnings.len();
            (Some(outcome.encoder), Some(outcome.capture.summary), outcome.trace.last_loss(), warn)
        } else {
            (None, None, None, 0)
        };
        let (w, head, eval, ft_loss) =
            downstream_pipeline(cfg, p, encoder.as_ref(), self.dict, self.down, self.test, &dir)?;
        let psi = if p.is_pretrained() {
            let n = cfg.sizes.n_psi.min(self.test.len());
            let rho = cfg.data.effective_rho();
            Some(psi_agreement(&w, &head, self.dict, self.m0, &self.test.samples[..n], rho, &cfg.activation(p))?)
        } else {
            None
        };
        timings.push(Timing {
            stage: format!("{}_downstream", p.name()),
            seconds: clock.elapsed().as_secs_f64(),
        });
        let summary = PipelineSummary {
            pipeline: p,
            eval,
            capture,
            final_pretrain_loss: pre_loss,
            final_finetune_loss: ft_loss,
            psi_agreement: psi,
            warnings: warn,
        };
        Ok((summary, timings))
    }
}

/// The full head-to-head comparison; writes every artifact listed in the
/// module documentation. With `parallel` set the pipelines run on their
/// own threads; each writes only below its own directory and the report
/// is assembled in canonical pipeline order, so the files do not depend on
/// scheduling.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ComparisonReport> {
    cfg.validate()?;
    let clock = Instant::now();
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    let dict = make_dictionary(cfg)?;
    let needs_pretrain = cfg.has(Pipeline::TsMrp) || cfg.has(Pipeline::MaeMrp);
    let probe = make_split(cfg, &dict, Split::Probe)?;
    let down = make_split(cfg, &dict, Split::Downstream)?;
    let test = make_split(cfg, &dict, Split::Test)?;
    let pre = if needs_pretrain {
        Some(make_split(cfg, &dict, Split::Pretrain)?)
    } else {
        None
    };
    let mut summaries = Vec::new();
    if let Some(pre) = &pre {
        summaries.push(SplitSummary {
            split: "pretrain".into(),
            summary: pre.summary.clone(),
        });
    }
    for (name, ds) in [("downstream", &down), ("test", &test), ("probe", &probe)] {
        summaries.push(SplitSummary {
            split: name.into(),
            summary: ds.summary.clone(),
        });
    }
    write_json(&out.join("dataset_summary.json"), &summaries)?;

    let (w0, m0, cand) = initial_state(cfg, &dict, &probe.samples)?;
    if needs_pretrain {
        write_json(&out.join("candidate_sets.json"), &cand)?;
    }
    let mut timings = vec![Timing {
        stage: "data".into(),
        seconds: clock.elapsed().as_secs_f64(),
    }];

    let stage = Stage {
        cfg,
        dict: &dict,
        pre: pre.as_ref(),
        probe: &probe,
        down: &down,
        test: &test,
        w0: &w0,
        m0: &m0,
        out,
    };
    let pipelines = cfg.ordered_pipelines();
    let results: Vec<Result<(PipelineSummary, Vec<Timing>)>> = if cfg.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = pipelines
                .iter()
                .map(|&p| {
                    let stage = &stage;
                    s.spawn(move || stage.run(p))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("pipeline thread panicked"))
                .collect()
        })
    } else {
        pipelines.iter().map(|&p| stage.run(p)).collect()
    };

    let mut report = ComparisonReport {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        pipelines: Vec::new(),
        single_view_gaps: Vec::new(),
        timings: None,
    };
    for r in results {
        let (summary, t) = r?;
        report.pipelines.push(summary);
        timings.extend(t);
    }
    report.fill_gaps();
    if cfg.record_timing {
        report.timings = Some(timings);
    }
    write_json(&out.join("comparison.json"), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);

        let err = ExperimentConfig::from_toml_str("seed = 1\n[data]\nkk = 3\n").unwrap_err();
        assert!(err.to_string().contains("kk"), "{err}");
        assert!(ExperimentConfig::from_toml_str("pipelines = []").is_err());
        assert!(ExperimentConfig::from_toml_str("schema_version = 9").is_err());
        assert!(ExperimentConfig::from_toml_str("pipelines = [\"bogus\"]").is_err());
        let only = ExperimentConfig::from_toml_str("pipelines = [\"supervised\", \"ts_mrp\"]").unwrap();
        assert_eq!(only.ordered_pipelines(), vec![Pipeline::TsMrp, Pipeline::Supervised]);
        let err = ExperimentConfig::from_toml_str("[supervised]\nn2 = 50\ninit = { kind = \"scratch\" }\n").unwrap_err();
        assert!(err.to_string().contains("finetune.n2"), "{err}");
    }

    #[test]
    fn output_policy() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        assert_eq!(prepare_output_dir(&dir, OutputPolicy::Refuse).unwrap(), dir);
        fs::write(dir.join("x"), "1").unwrap();
        assert!(matches!(
            prepare_output_dir(&dir, OutputPolicy::Refuse),
            Err(LabError::OutputExists(_))
        ));
        let v = prepare_output_dir(&dir, OutputPolicy::Version).unwrap();
        assert_eq!(v, tmp.path().join("run-1"));
        assert!(dir.join("x").exists());
        prepare_output_dir(&dir, OutputPolicy::Overwrite).unwrap();
        assert!(!dir.join("x").exists());
    }
}
