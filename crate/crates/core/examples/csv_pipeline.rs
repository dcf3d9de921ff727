//! The full file-based workflow on a CSV with a categorical column: schema,
//! load, split, standardize, fit, then a Gini comparison on the test split.
//!
//! ```text
//! cargo run --release --example csv_pipeline
//! ```

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tweedie_avb::avb::{train_with_validation, TrainConfig};
use tweedie_avb::data::{load_csv, split_dataset, standardize, SchemaConfig, SplitSpec};
use tweedie_avb::evaluation::pairwise_gini_matrix;
use tweedie_avb::tweedie::{to_compound, tweedie_sample, EdmParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Claim amounts in dollars: an age effect, a vehicle-use effect and a
    // random effect per region.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let regions = ["north", "south", "east", "west"];
    let region_effect = [-0.3, 0.1, 0.4, -0.1];
    let mut csv = String::from("claim,driver_age,use,region\n");
    for _ in 0..2000 {
        let age: f64 = rng.random_range(18.0..80.0);
        let commercial = rng.random_bool(0.3);
        let r = rng.random_range(0..regions.len());
        let eta = 6.0 - 0.02 * (age - 45.0) + if commercial { 0.5 } else { 0.0 } + region_effect[r];
        let y = 100.0 * tweedie_sample(&to_compound(&EdmParams::new((eta - 4.6).exp(), 1.4, 2.0)?)?, &mut rng)?;
        let usage = if commercial { "commercial" } else { "private" };
        writeln!(csv, "{y},{age},{usage},{}", regions[r])?;
    }
    let dir = std::env::temp_dir().join("tweedie-avb-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("claims.csv");
    std::fs::write(&path, csv)?;

    let schema = SchemaConfig {
        response_column: "claim".into(),
        fixed_columns: vec!["driver_age".into()],
        group_column: Some("region".into()),
        categorical_columns: vec!["use".into()],
        indicator_columns: Vec::new(),
    };
    let raw = load_csv(&path, &schema)?;
    println!("columns {:?}, groups {:?}", raw.column_names, raw.group_labels);

    let (train, valid, test) = split_dataset(&raw, &SplitSpec::default())?;
    let (train, scaled, transform) = standardize(&train, &[&valid])?;
    println!("driver_age standardized with mean {:.2}, sd {:.2}", transform.means[0], transform.scales[0]);
    let mut fit = train_with_validation(&train, &scaled[0], &TrainConfig::default())?;
    fit.metadata.standardization = transform;

    let summary = |name: &str| fit.draws.mean_of(name).unwrap_or(f64::NAN);
    println!(
        "posterior means: p {:.3}, phi {:.3}, sigma_b {:.3}, weights {:?}",
        summary("p_index"),
        summary("dispersion"),
        summary("sigma_b"),
        fit.draws.weight_means()
    );
    println!("region effects (label: posterior mean, truth):");
    let means = fit.draws.means();
    let effects = &means[means.len() - raw.group_count..];
    for (label, b) in raw.group_labels.iter().zip(effects) {
        let truth = regions.iter().position(|r| r == label).map_or(f64::NAN, |k| region_effect[k]);
        println!("  {label:>6}: {b:>7.3} {truth:>7.3}");
    }

    let preds: Vec<f64> = fit.predict(&test, 0)?.iter().map(|p| p.mean).collect();
    let flat = vec![fit.metadata.train_mean_response; test.len()];
    let matrix = pairwise_gini_matrix(&test.responses, &[("flat".into(), flat), ("avb".into(), preds)])?;
    println!("\ntest-split Gini matrix\n{}", matrix.to_csv());
    Ok(())
}
