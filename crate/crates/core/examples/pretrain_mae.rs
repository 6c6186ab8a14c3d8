//! MAE-style pretraining with q = 4.
//!
//! Same shrunken data model as the teacher-student example. The encoder
//! doubles as its own linear decoder, so each kernel is pushed to
//! reconstruct the patches it fires on.

use mrp_lab::dataset::{build_feature_dictionary, sample_dataset, DataParams};
use mrp_lab::network::EncoderWeights;
use mrp_lab::pretrain_mae::{pretrain_mae, MaeConfig};
use mrp_lab::probe::{candidate_sets, capture_report, correlation_matrix, ProbeSet};
use mrp_lab::seeds::{rng_for, Stream};

fn main() -> mrp_lab::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let seed = 11;
    let params = DataParams { k: 4, d: 64, num_patches: 12, s: 1.0, ..DataParams::default() };
    let dict = build_feature_dictionary(params.k, params.d, &mut rng_for(seed, Stream::Dictionary))?;
    let data = sample_dataset(300, &dict, &params, &mut rng_for(seed, Stream::PretrainData))?;
    let probe_samples = sample_dataset(40, &dict, &params, &mut rng_for(seed, Stream::Probe))?;

    let sigma0 = 0.5 / (params.k as f64).sqrt();
    let w0 = EncoderWeights::gaussian(params.k, 3, params.d, sigma0, &mut rng_for(seed, Stream::Init));
    let m0 = candidate_sets(&correlation_matrix(&w0, &dict)?.view(), 1.0)?;

    let cfg = MaeConfig { iterations, log_every: (iterations / 8).max(1), ..MaeConfig::default() };
    let probes = ProbeSet::new(&dict).with_snapshots(&probe_samples.samples);
    let (w, trace) = pretrain_mae(&w0, &data, &cfg, &probes)?;

    for r in &trace.records {
        println!("t={:<5} loss {:>10.5}  mean Lambda {:.3}  offdiag {:.3}", r.t, r.loss, r.lambda_mean, r.offdiag_max);
    }
    if let (Some(first), Some(last)) = (trace.snapshots.first(), trace.snapshots.last()) {
        println!(
            "max |<w_r, xi_p>| on held-out patches: {:.4} -> {:.4}",
            first.noise_corr_max, last.noise_corr_max
        );
    }

    let rep = capture_report(&correlation_matrix(&w, &dict)?.view(), &m0, cfg.act.varrho)?;
    let abs = 5.0 * sigma0 * (params.k as f64).ln();
    println!(
        "captured {:.2}  winner in M0 {:.2}  specialized {:.2}  mean ratio {:.1}",
        rep.captured_fraction,
        rep.winner_in_m0_fraction,
        rep.specialized_fraction(abs, 0.25),
        rep.mean_specialization_ratio
    );
    Ok(())
}
