//! Analytic gradients against central finite differences.
//!
//! Checks the teacher-student gradient (teacher held fixed), the exact MAE
//! gradient, and both fine-tuning gradients on coordinates whose
//! pre-activations stay clear of the activation kinks.

use mrp_lab::dataset::{build_feature_dictionary, sample_dataset, DataParams, LabeledSample};
use mrp_lab::downstream::{ce_loss_and_logits, grad_encoder_down, grad_head};
use mrp_lab::network::{ActivationParams, EncoderWeights, HeadWeights};
use mrp_lab::oracles::{fd_gradient, gather, grad_check, kink_free_coords, GradCheck, DEFAULT_KINK_MARGIN};
use mrp_lab::pretrain_mae::{expected_loss_mae_raw, grad_mae};
use mrp_lab::pretrain_ts::{expected_loss_ts_with_teacher, grad_ts};
use mrp_lab::seeds::{rng_for, Stream};
use ndarray::Array2;
use rand::Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn main() -> mrp_lab::Result<()> {
    let params = DataParams { k: 4, d: 64, num_patches: 12, s: 1.0, ..DataParams::default() };
    let dict = build_feature_dictionary(params.k, params.d, &mut rng_for(2, Stream::Dictionary))?;
    let x = sample_dataset(1, &dict, &params, &mut rng_for(2, Stream::TestData))?.samples.remove(0);
    let w = EncoderWeights::gaussian(params.k, 3, params.d, 0.3, &mut rng_for(2, Stream::Init));
    let mut rng = rng_for(2, Stream::Probe);
    let coords = |act: &ActivationParams, rng: &mut dyn rand::RngCore| {
        kink_free_coords(&w.kernels.view(), &[x.patches.view()], &[1.0], act, DEFAULT_KINK_MARGIN, 100, rng)
    };

    let ts = ActivationParams::new(3, 0.2)?;
    let (tau, theta) = (1.6, 0.5);
    let teacher = &w.kernels * tau;
    let c = coords(&ts, &mut rng)?;
    let analytic = grad_ts(&w, tau, theta, &x, &ts)?;
    let numeric = fd_gradient(
        |v| expected_loss_ts_with_teacher(v, &teacher.view(), theta, &x.patches.view(), &ts),
        &w.kernels.view(),
        STEP,
        &c,
    )?;
    report("teacher-student", &analytic, &numeric, &c);

    let mae = ActivationParams::new(4, 0.2)?;
    let c = coords(&mae, &mut rng)?;
    let analytic = grad_mae(&w, theta, &x, &mae)?;
    let numeric = fd_gradient(|v| expected_loss_mae_raw(v, theta, &x.patches.view(), &mae), &w.kernels.view(), STEP, &c)?;
    report("mae", &analytic, &numeric, &c);

    // a non-zero head so the encoder gradient is not trivially zero
    let mut head = HeadWeights::zeros(params.k, w.num_kernels());
    head.u.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    let y = x.label;
    let c = coords(&ts, &mut rng)?;
    let analytic = grad_encoder_down(&w, &head, &x, y, &ts)?;
    let numeric = fd_gradient(|v| ce_at(v, &w, &head, &x, &ts), &w.kernels.view(), STEP, &c)?;
    report("fine-tune encoder", &analytic, &numeric, &c);

    let analytic = grad_head(&w, &head, &x, y, &ts)?;
    let hc: Vec<(usize, usize)> = (0..head.u.nrows()).flat_map(|i| (0..head.u.ncols()).map(move |j| (i, j))).collect();
    let numeric = fd_gradient(
        |u| {
            let h = HeadWeights { u: u.to_owned() };
            Ok(ce_loss_and_logits(&w, &h, &x, y, &ts)?.0)
        },
        &head.u.view(),
        STEP,
        &hc,
    )?;
    report("fine-tune head", &analytic, &numeric, &hc);
    Ok(())
}

fn ce_at(
    v: &ndarray::ArrayView2<f64>,
    w: &EncoderWeights,
    head: &HeadWeights,
    x: &LabeledSample,
    act: &ActivationParams,
) -> mrp_lab::Result<f64> {
    let probe = EncoderWeights::new(v.to_owned(), w.m, w.sigma0)?;
    Ok(ce_loss_and_logits(&probe, head, x, x.label, act)?.0)
}

fn report(name: &str, analytic: &Array2<f64>, numeric: &[f64], coords: &[(usize, usize)]) {
    let a = gather(analytic, coords);
    let floor = 1e-3 * analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let GradCheck { max_rel_err, pass, .. } = grad_check(&a, numeric, TOL, floor);
    println!("{name:<18} {} coords  max rel err {max_rel_err:.2e}  {}", coords.len(), if pass { "ok" } else { "FAIL" });
}
