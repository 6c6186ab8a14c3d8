//! Config-driven end-to-end run: every selected pipeline is pretrained,
//! fine-tuned and evaluated, and the results land in one output tree.
//!
//! ```text
//! cargo run --release --example run_experiment [config.toml] [out-dir]
//! ```
//!
//! Without arguments it runs `configs/smoke.toml` into a fresh directory
//! under the system temp dir.

use std::path::PathBuf;

use mrp_lab::experiment::{prepare_output_dir, run_experiment, ExperimentConfig, OutputPolicy};

fn main() -> mrp_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.toml"));
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("mrp-lab-run"));

    let cfg = ExperimentConfig::load(&config)?;
    let out = prepare_output_dir(&out, OutputPolicy::Version)?;
    println!("config {}  ->  {}", config.display(), out.display());

    let report = run_experiment(&cfg, &out)?;
    for s in &report.pipelines {
        print!(
            "{:<11} overall {:.3}  multi {:.3}  single {:.3}",
            s.pipeline.name(),
            s.eval.accuracy_overall,
            s.eval.accuracy_multiview,
            s.eval.accuracy_singleview
        );
        match &s.capture {
            Some(c) => println!("  captured {:.2}  in M0 {:.2}", c.captured_fraction, c.winner_in_m0_fraction),
            None => println!(),
        }
    }
    for g in &report.single_view_gaps {
        println!("single-view gap {} vs supervised: {:+.3}", g.pipeline.name(), g.gap);
    }

    let mut files: Vec<_> = walk(&out);
    files.sort();
    println!("\n{} files written:", files.len());
    for f in files {
        println!("  {}", f.strip_prefix(&out).unwrap_or(&f).display());
    }
    Ok(())
}

fn walk(dir: &std::path::Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).into_iter().flatten().flatten() {
        let p = entry.path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
