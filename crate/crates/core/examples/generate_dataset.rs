//! Draw a dictionary and a small labeled dataset, inspect one sample's
//! generative metadata, then round-trip everything through the binary
//! container.
//!
//! ```text
//! cargo run --release --example generate_dataset
//! ```

use mrp_lab::dataset::{build_feature_dictionary, sample_dataset, DataParams, View};
use mrp_lab::io::{load_dataset, save_dataset};
use mrp_lab::seeds::{rng_for, Stream};

fn main() -> mrp_lab::Result<()> {
    let seed = 3;
    let params = DataParams { k: 5, d: 128, ..DataParams::default() };
    params.validate()?;

    let dict = build_feature_dictionary(params.k, params.d, &mut rng_for(seed, Stream::Dictionary))?;
    let data = sample_dataset(400, &dict, &params, &mut rng_for(seed, Stream::PretrainData))?;

    let s = &data.summary;
    println!("n = {}  multi-view = {}  single-view = {}", s.n, s.multi_total(), s.single_total());
    println!("per class (multi)  {:?}", s.multi_per_class);
    println!("per class (single) {:?}", s.single_per_class);
    println!("rejected draws: {}", s.rejected_draws);
    println!("sum z^3 over dominant main features in [{:.3}, {:.3}]", s.main_z_cube_sum[0], s.main_z_cube_sum[1]);

    let x = data.samples.iter().find(|x| x.view.is_single()).unwrap_or(&data.samples[0]);
    let view = match x.view {
        View::Multi => "multi-view".to_string(),
        View::Single { main_slot } => format!("single-view, dominant slot {main_slot}"),
    };
    println!("\nsample: label {} ({view})", x.label);
    for a in &x.active {
        let mass = x.z_mass(a.feature).unwrap_or(0.0);
        println!(
            "  feature ({}, {}) on patches {:?}  z mass {mass:.3}",
            a.feature.class, a.feature.slot, a.patches
        );
    }
    let p = x.active[0].patches[0];
    let noise = x.noise(p, &dict);
    println!("  |xi| on patch {p}: {:.4}", noise.dot(&noise).sqrt());

    let dir = tempfile_dir();
    let path = dir.join("pretrain.bin");
    save_dataset(&path, &data, &dict, Some(seed))?;
    let (back, dict_back, dict_seed) = load_dataset(&path)?;
    println!(
        "\nround trip through {}: lossless = {}, dictionary seed {:?}",
        path.display(),
        back == data && dict_back == dict,
        dict_seed
    );
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("mrp-lab-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    dir
}
