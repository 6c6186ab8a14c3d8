//! Probing a weight state: initial candidate sets `M^(0)`, the
//! induction-hypothesis items at initialization and after pretraining,
//! and the Ψ margin proxy after fine-tuning.

use mrp_lab::dataset::{build_feature_dictionary, sample_dataset, DataParams};
use mrp_lab::downstream::{finetune, FinetuneConfig};
use mrp_lab::network::EncoderWeights;
use mrp_lab::pretrain_ts::{pretrain_ts, TsConfig};
use mrp_lab::probe::{
    candidate_sets, correlation_matrix, hypothesis_report, psi_margin, psi_rank_agreement, HypothesisReport,
    HypothesisThresholds, ProbeSet,
};
use mrp_lab::seeds::{rng_for, Stream};

fn main() -> mrp_lab::Result<()> {
    let seed = 2;
    let params = DataParams { k: 4, d: 64, num_patches: 12, s: 1.0, ..DataParams::default() };
    let dict = build_feature_dictionary(params.k, params.d, &mut rng_for(seed, Stream::Dictionary))?;
    let pre = sample_dataset(300, &dict, &params, &mut rng_for(seed, Stream::PretrainData))?;
    let down = sample_dataset(200, &dict, &params, &mut rng_for(seed, Stream::DownstreamData))?;
    let probe = sample_dataset(60, &dict, &params, &mut rng_for(seed, Stream::Probe))?;

    let sigma0 = 0.5 / (params.k as f64).sqrt();
    let w0 = EncoderWeights::gaussian(params.k, 3, params.d, sigma0, &mut rng_for(seed, Stream::Init));
    let corr0 = correlation_matrix(&w0, &dict)?;
    let m0 = candidate_sets(&corr0.view(), 1.0)?;
    println!("M0 sizes {:?} (mean {:.2}, max {})", m0.sizes(), m0.mean_size(), m0.max_size());
    for (f, set) in m0.sets.iter().enumerate() {
        println!("  feature {f}: Lambda0 {:.3}  kernels {:?}", m0.lambda0[f], set);
    }

    let th = HypothesisThresholds::scaled(sigma0, params.k, 1.0);
    print_items("init", &hypothesis_report(&w0, &dict, &probe.samples, &m0, &th)?);

    let ts = TsConfig { iterations: 1000, ..TsConfig::default() };
    let (w, _) = pretrain_ts(&w0, &pre, &ts, &ProbeSet::new(&dict))?;
    print_items("pretrained", &hypothesis_report(&w, &dict, &probe.samples, &m0, &th)?);

    let ft = FinetuneConfig { iterations: 300, n2: down.len(), ..FinetuneConfig::default() };
    let (w, head, _) = finetune(&w, &down, &ft, &ts.act, &ProbeSet::new(&dict))?;
    let rho = params.effective_rho();
    let x = &probe.samples[0];
    let margin = psi_margin(&w, &dict, &m0, x, rho)?;
    println!("\nsample with label {}: Psi {:.3?}", x.label, margin.psi);
    println!("proxy F_j - F_y per class {:.3?}", margin.proxy);
    let mut agree = 0;
    for x in &probe.samples {
        if psi_rank_agreement(&w, &head, &dict, &m0, x, rho, &ts.act)?.is_some_and(|r| r > 0.0) {
            agree += 1;
        }
    }
    println!("proxy and logits rank-agree on {agree} of {} probe samples", probe.len());
    Ok(())
}

fn print_items(label: &str, rep: &HypothesisReport) {
    print!("{label:<11}");
    for (name, s) in rep.items() {
        print!(" {name}:{:.2}", s.pass_fraction());
    }
    println!();
}
