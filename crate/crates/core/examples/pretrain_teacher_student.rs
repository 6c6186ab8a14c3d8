//! Teacher-student pretraining on a shrunken data model.
//!
//! Shows the `τ_t` schedule, runs full-batch descent on the mask-expected
//! loss, and reports which kernel captured each feature and whether it
//! came from the initial candidate set `M^(0)`.
//!
//! ```text
//! cargo run --release --example pretrain_teacher_student [iterations]
//! ```

use mrp_lab::dataset::{build_feature_dictionary, sample_dataset, DataParams};
use mrp_lab::network::EncoderWeights;
use mrp_lab::pretrain_ts::{pretrain_ts, tau_schedule, TsConfig};
use mrp_lab::probe::{candidate_sets, capture_report, correlation_matrix, ProbeSet};
use mrp_lab::seeds::{rng_for, Stream};

fn main() -> mrp_lab::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let seed = 11;
    let params = DataParams { k: 4, d: 64, num_patches: 12, s: 1.0, ..DataParams::default() };
    let dict = build_feature_dictionary(params.k, params.d, &mut rng_for(seed, Stream::Dictionary))?;
    let data = sample_dataset(300, &dict, &params, &mut rng_for(seed, Stream::PretrainData))?;

    let sigma0 = 0.5 / (params.k as f64).sqrt();
    let w0 = EncoderWeights::gaussian(params.k, 3, params.d, sigma0, &mut rng_for(seed, Stream::Init));
    let m0 = candidate_sets(&correlation_matrix(&w0, &dict)?.view(), 1.0)?;
    println!("candidate set sizes {:?}", m0.sizes());

    let cfg = TsConfig { iterations, log_every: (iterations / 8).max(1), ..TsConfig::default() };
    print!("tau_t:");
    for t in [0, 1, 10, 100, iterations] {
        print!("  t={t} {:.3}", tau_schedule(t, cfg.theta, params.cp, &cfg));
    }
    println!();

    let (w, trace) = pretrain_ts(&w0, &data, &cfg, &ProbeSet::new(&dict))?;
    println!("\n{:>6} {:>10} {:>8} {:>8} {:>8} {:>8}", "t", "loss", "min L", "mean L", "max L", "offdiag");
    for r in &trace.records {
        println!(
            "{:>6} {:>10.5} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            r.t, r.loss, r.lambda_min, r.lambda_mean, r.lambda_max, r.offdiag_max
        );
    }
    for w in &trace.warnings {
        println!("warning: {w}");
    }

    let rep = capture_report(&correlation_matrix(&w, &dict)?.view(), &m0, cfg.act.varrho)?;
    println!("\nfeature   Lambda  winner  in M0  ratio");
    for f in &rep.features {
        println!(
            "({}, {})  {:>8.3}  {:>6}  {:>5}  {:>5.1}",
            f.feature.class, f.feature.slot, f.lambda, f.winner, f.winner_in_m0, f.specialization_ratio
        );
    }
    let abs = 5.0 * sigma0 * (params.k as f64).ln();
    println!(
        "captured {:.2}  winner in M0 {:.2}  specialized {:.2}",
        rep.captured_fraction,
        rep.winner_in_m0_fraction,
        rep.specialized_fraction(abs, 0.25)
    );
    Ok(())
}
