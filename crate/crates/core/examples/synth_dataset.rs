//! Generates a small synthetic three-site dataset and summarises its splits.
//!
//! `cargo run --release --example synth_dataset -- [out_dir]`

use partseg::synthgen::{generate, SynthConfig};
use partseg::volume::Split;

fn main() -> partseg::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("partseg-synth"));
    let cfg = SynthConfig {
        n_train: 12,
        n_val: 3,
        n_test: 6,
        ..SynthConfig::default()
    };
    let (fls, wmh_only, isl_only) = cfg.split_counts();
    println!("training subjects: {fls} fully labelled, {wmh_only} WMH-only, {isl_only} ISL-only");

    let manifest = generate(&cfg, &out)?;
    let subsets = manifest.derive_subsets();
    println!("FLS {} | PLS_WMH {} | PLS_ISL {} | PLS_all {}", subsets.fls.len(), subsets.pls_wmh.len(), subsets.pls_isl.len(), subsets.pls_all.len());
    for split in [Split::Train, Split::Validation, Split::Test] {
        let ids: Vec<String> = manifest
            .split(split)
            .map(|r| format!("{}[{}{}]", r.id, if r.has_wmh() { "W" } else { "-" }, if r.has_isl() { "I" } else { "-" }))
            .collect();
        println!("{split:?}: {}", ids.join(" "));
    }
    println!("manifest written to {}", out.join("manifest.json").display());
    Ok(())
}
