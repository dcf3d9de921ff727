//! Simulates the default synthetic design, fits it with adversarial
//! variational Bayes and compares the posterior with the truth.
//!
//! ```text
//! cargo run --release --example simulate_and_fit [seed] [rows]
//! RUST_LOG=debug cargo run --release --example simulate_and_fit   # validation trace
//! ```

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tweedie_avb::avb::{train_with_validation, TrainConfig};
use tweedie_avb::data::{simulate_dataset, split_dataset, SimTruth, SplitSpec};
use tweedie_avb::evaluation::{posterior_summary, random_effect_bias};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let rows: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5000);

    let truth = SimTruth {
        n_obs: rows,
        ..SimTruth::default()
    };
    let (data, realized) = simulate_dataset(&truth, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let (train, valid, _) = split_dataset(&data, &SplitSpec { seed, ..SplitSpec::default() })?;
    println!("{} rows, {} groups; training on {}", data.len(), data.group_count, train.len());

    let start = Instant::now();
    let fit = train_with_validation(
        &train,
        &valid,
        &TrainConfig {
            seed,
            ..TrainConfig::default()
        },
    )?;
    println!(
        "trained in {:.1?}; kept step {} of {}",
        start.elapsed(),
        fit.traces.best_step,
        fit.traces.generator_loss.len()
    );

    let show = |name: &str, draws: &[f64], truth: f64| -> Result<(), Box<dyn std::error::Error>> {
        let s = posterior_summary(draws, 20)?;
        println!(
            "{name:>10}: mean {:>7.4}  90% [{:>7.4}, {:>7.4}]  truth {truth:.4}",
            s.mean, s.q05, s.q95
        );
        Ok(())
    };
    let column = |name: &str| fit.draws.column(name).unwrap_or_default();
    for (k, w) in truth.fixed_weights.iter().enumerate() {
        show(&format!("w{k}"), &column(&format!("w{k}")), *w)?;
    }
    show("p", &column("p_index"), truth.p_index)?;
    show("phi", &column("dispersion"), truth.dispersion)?;
    let sigma2: Vec<f64> = column("sigma_b").iter().map(|s| s * s).collect();
    show("sigma_b^2", &sigma2, truth.sigma_b.powi(2))?;

    if let Some(b) = &realized.group_effects {
        let bias = random_effect_bias(&fit.draws.effect_draws(), b)?;
        println!("group effects: mean |bias| {:.4}, max |bias| {:.4}", bias.mean_abs, bias.max_abs);
    }
    Ok(())
}
