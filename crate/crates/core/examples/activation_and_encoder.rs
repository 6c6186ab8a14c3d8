//! The smoothed ReLU and the two-layer encoder.
//!
//! Prints the activation on a grid for q = 3 and q = 4, then pushes one
//! sample through a random encoder, its `τ`-scaled teacher, and a zero
//! head.

use mrp_lab::dataset::{build_feature_dictionary, sample_dataset, DataParams};
use mrp_lab::network::{
    classifier_forward, encoder_forward, smoothed_relu, smoothed_relu_prime, teacher_forward,
    ActivationParams, EncoderWeights, HeadWeights,
};
use mrp_lab::seeds::{rng_for, Stream};

fn main() -> mrp_lab::Result<()> {
    let acts = [ActivationParams::new(3, 0.2)?, ActivationParams::new(4, 0.2)?];
    println!("{:>6} {:>10} {:>10} {:>10} {:>10}", "z", "q=3", "q=3 '", "q=4", "q=4 '");
    for i in -2..=8 {
        let z = i as f64 * 0.05;
        print!("{z:>6.2}");
        for act in &acts {
            print!(" {:>10.5} {:>10.5}", smoothed_relu(z, act), smoothed_relu_prime(z, act));
        }
        println!();
    }

    let params = DataParams { k: 4, d: 64, num_patches: 12, s: 1.0, ..DataParams::default() };
    let dict = build_feature_dictionary(params.k, params.d, &mut rng_for(0, Stream::Dictionary))?;
    let x = sample_dataset(1, &dict, &params, &mut rng_for(0, Stream::TestData))?.samples.remove(0);
    let m = 3;
    let sigma0 = 0.5 / (params.k as f64).sqrt();
    let w = EncoderWeights::gaussian(params.k, m, params.d, sigma0, &mut rng_for(0, Stream::Init));

    let act = acts[0];
    let h = encoder_forward(&w, &x.patches.view(), &act)?;
    let teacher = teacher_forward(&w, 1.5, &x.patches.view(), &act)?;
    println!("\nencoder with {} kernels, sigma0 = {sigma0:.3}", w.num_kernels());
    println!("student h(X): {:.4}", h);
    println!("teacher (tau = 1.5): {:.4}", teacher);

    let head = HeadWeights::zeros(params.k, w.num_kernels());
    let (logits, probs) = classifier_forward(&w, &head, &x.patches.view(), &act)?;
    println!("zero head logits {logits:.3} -> uniform probabilities {probs:.3}");
    Ok(())
}
