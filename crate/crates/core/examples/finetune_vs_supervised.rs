//! The downstream contrast on a shrunken data model: a teacher-student
//! pretrained encoder fine-tuned with cross-entropy against the same
//! network trained from scratch, scored separately on multi-view and
//! single-view test samples.

use mrp_lab::dataset::{build_feature_dictionary, sample_dataset, DataParams};
use mrp_lab::downstream::{evaluate, finetune, train_supervised, EncoderInit, EvalReport, FinetuneConfig};
use mrp_lab::network::EncoderWeights;
use mrp_lab::pretrain_ts::{pretrain_ts, TsConfig};
use mrp_lab::probe::ProbeSet;
use mrp_lab::seeds::{rng_for, Stream};

fn main() -> mrp_lab::Result<()> {
    let seed = 5;
    let params = DataParams { k: 4, d: 64, num_patches: 12, s: 1.0, ..DataParams::default() };
    let dict = build_feature_dictionary(params.k, params.d, &mut rng_for(seed, Stream::Dictionary))?;
    let pre = sample_dataset(300, &dict, &params, &mut rng_for(seed, Stream::PretrainData))?;
    let down = sample_dataset(200, &dict, &params, &mut rng_for(seed, Stream::DownstreamData))?;
    let test = sample_dataset(2000, &dict, &params, &mut rng_for(seed, Stream::TestData))?;
    let probes = ProbeSet::new(&dict);

    let m = 3;
    let sigma0 = 0.5 / (params.k as f64).sqrt();
    let w0 = EncoderWeights::gaussian(params.k, m, params.d, sigma0, &mut rng_for(seed, Stream::Init));
    let ts = TsConfig { iterations: 1000, ..TsConfig::default() };
    let (encoder, _) = pretrain_ts(&w0, &pre, &ts, &probes)?;

    let ft = FinetuneConfig { iterations: 300, n2: down.len(), ..FinetuneConfig::default() };
    println!("eta2 = {}  eta1 = {}", ft.eta2_for(params.k), ft.eta1_for(params.k));
    let (w, head, trace) = finetune(&encoder, &down, &ft, &ts.act, &probes)?;
    println!("fine-tune final loss {:.4}", trace.last_loss().unwrap_or(f64::NAN));
    let mrp = evaluate(&w, &head, &test.samples, &ts.act)?;

    let scratch = FinetuneConfig { init: EncoderInit::Scratch { sigma0: None }, ..ft };
    let (w, head, _) = train_supervised(&down, &scratch, m, &ts.act, &probes, &mut rng_for(seed, Stream::ScratchInit))?;
    let sup = evaluate(&w, &head, &test.samples, &ts.act)?;

    println!("\n{:<12} {:>8} {:>11} {:>12}", "", "overall", "multi-view", "single-view");
    row("TS-MRP", &mrp);
    row("supervised", &sup);
    println!(
        "single-view gap {:+.3} over {} single-view test samples",
        mrp.accuracy_singleview - sup.accuracy_singleview,
        mrp.n_singleview
    );
    Ok(())
}

fn row(name: &str, e: &EvalReport) {
    println!(
        "{name:<12} {:>8.3} {:>11.3} {:>12.3}",
        e.accuracy_overall, e.accuracy_multiview, e.accuracy_singleview
    );
}
