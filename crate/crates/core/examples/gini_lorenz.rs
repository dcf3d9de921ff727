//! Ordered Lorenz curves and Gini indices: the hand examples, a pairwise
//! matrix over three models and split standard errors.
//!
//! ```text
//! cargo run --release --example gini_lorenz
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tweedie_avb::evaluation::{gini_index, ordered_lorenz, pairwise_gini_matrix, split_gini, EvaluationError};
use tweedie_avb::tweedie::{to_compound, tweedie_sample, EdmParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let y = [0.0, 1.0, 2.0];
    let flat = [1.0, 1.0, 1.0];
    for preds in [[2.0, 1.0, 0.5], [0.5, 1.0, 2.0]] {
        let curve = ordered_lorenz(&y, &flat, &preds)?;
        println!("predictions {preds:?}: points {:?}, gini {:.4}", curve.points, gini_index(&curve));
    }

    // Claims whose mean depends on x; models that see all, part or none of it.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 4000;
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| tweedie_sample(&to_compound(&EdmParams::new((0.8 * x).exp(), 1.5, 1.0)?)?, &mut rng))
        .collect::<Result<_, _>>()?;
    let models = vec![
        ("flat".to_string(), vec![1.0; n]),
        ("half".to_string(), xs.iter().map(|x| (0.4 * x).exp()).collect()),
        ("full".to_string(), xs.iter().map(|x| (0.8 * x).exp()).collect()),
    ];
    let matrix = pairwise_gini_matrix(&ys, &models)?;
    println!("\npairwise Gini (rows: baseline, columns: model)\n{}", matrix.to_csv());

    let splits = split_gini(20, |_| {
        let rows = rand::seq::index::sample(&mut rng, n, n / 2).into_vec();
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let curve = ordered_lorenz(&pick(&ys), &pick(&models[0].1), &pick(&models[2].1))?;
        Ok::<_, EvaluationError>(gini_index(&curve))
    })?;
    println!(
        "full vs flat over 20 random halves: {:.4} ± {:.4}",
        splits.mean, splits.standard_error
    );
    Ok(())
}
