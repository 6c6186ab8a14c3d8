//! Closed-form mask expectations against Monte Carlo.
//!
//! For a random encoder and one sample, compares the analytic expected
//! teacher-student and MAE losses with averages over Bernoulli(θ) masks.

use mrp_lab::dataset::{build_feature_dictionary, sample_dataset, DataParams};
use mrp_lab::network::{ActivationParams, EncoderWeights};
use mrp_lab::oracles::mc_expected_loss;
use mrp_lab::pretrain_mae::{expected_loss_mae, masked_loss_mae};
use mrp_lab::pretrain_ts::{expected_loss_ts, masked_loss_ts};
use mrp_lab::seeds::{rng_for, Stream};

fn main() -> mrp_lab::Result<()> {
    let params = DataParams { k: 5, d: 64, num_patches: 10, s: 1.0, ..DataParams::default() };
    let dict = build_feature_dictionary(params.k, params.d, &mut rng_for(1, Stream::Dictionary))?;
    let x = sample_dataset(1, &dict, &params, &mut rng_for(1, Stream::TestData))?.samples.remove(0);
    // large enough that most pre-activations land past the ramp
    let w = EncoderWeights::gaussian(params.k, 2, params.d, 0.3, &mut rng_for(1, Stream::Init));
    let masks = 20_000;
    let tau = 1.7;

    println!("{:<4} {:>5} {:>12} {:>12} {:>9} {:>6}", "loss", "theta", "closed form", "MC mean", "MC s.e.", "z");
    for theta in [0.3, 0.5, 0.8] {
        let ts = ActivationParams::new(3, 0.2)?;
        let exact = expected_loss_ts(&w, tau, theta, &x, &ts)?;
        let mut rng = rng_for(1, Stream::Mask);
        let mc = mc_expected_loss(|eps| masked_loss_ts(&w, tau, theta, &x, eps, &ts), theta, x.num_patches(), masks, &mut rng)?;
        row("ts", theta, exact, mc.mean, mc.stderr);

        let mae = ActivationParams::new(4, 0.2)?;
        let exact = expected_loss_mae(&w, theta, &x, &mae)?;
        let mc = mc_expected_loss(|eps| masked_loss_mae(&w, theta, &x, eps, &mae), theta, x.num_patches(), masks, &mut rng)?;
        row("mae", theta, exact, mc.mean, mc.stderr);
    }
    Ok(())
}

fn row(name: &str, theta: f64, exact: f64, mean: f64, se: f64) {
    println!("{name:<4} {theta:>5.1} {exact:>12.6} {mean:>12.6} {se:>9.2e} {:>6.2}", (mean - exact) / se);
}
