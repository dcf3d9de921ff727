//! Fits the bundled sample, saves the fit, reloads it and predicts rows
//! from a known and an unseen group.
//!
//! ```text
//! cargo run --release --example predict_new_rows
//! ```

use tweedie_avb::avb::{train_with_validation, FitResult, TrainConfig};
use tweedie_avb::data::{load_csv, split_dataset, standardize, SchemaConfig, SplitSpec};
use tweedie_avb::model::Dataset;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let schema = SchemaConfig {
        response_column: "y".into(),
        fixed_columns: vec!["x1".into(), "x2".into()],
        group_column: Some("group".into()),
        categorical_columns: Vec::new(),
        indicator_columns: Vec::new(),
    };
    let raw = load_csv(concat!(env!("CARGO_MANIFEST_DIR"), "/data/sample.csv"), &schema)?;
    let (train, valid, _) = split_dataset(&raw, &SplitSpec::default())?;
    let (train, others, transform) = standardize(&train, &[&valid])?;
    let mut fit = train_with_validation(&train, &others[0], &TrainConfig::default())?;
    fit.metadata.standardization = transform;

    let dir = std::env::temp_dir().join("tweedie-avb-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("fit.json");
    fit.save(&path)?;
    let fit = FitResult::load(&path)?;
    println!("saved and reloaded {}", path.display());

    let new_rows = Dataset {
        group_labels: vec!["g01".into(), "unseen".into()],
        ..Dataset::from_rows(vec![0.0, 0.0], &[vec![1.0, -1.0], vec![1.0, -1.0]], vec![0, 1], 2)?
    };
    let preds = fit.predict(&new_rows, 0)?;
    for (label, p) in new_rows.group_labels.iter().zip(&preds) {
        println!(
            "group {label:>6}: mean {:.4}, 5% {:.4}, median {:.4}, 95% {:.4}",
            p.mean, p.q05, p.q50, p.q95
        );
    }
    Ok(())
}
