//! Runs the Metropolis reference sampler and the variational fit on the
//! same small training split and compares their posterior means.
//!
//! ```text
//! cargo run --release --example mcmc_reference [rows]
//! ```

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tweedie_avb::avb::{train_with_validation, DrawTable, TrainConfig};
use tweedie_avb::data::{simulate_dataset, split_dataset, SimTruth, SplitSpec};
use tweedie_avb::mcmc::{run_chain, ChainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let rows: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(500);
    let truth = SimTruth {
        n_obs: rows,
        ..SimTruth::default()
    };
    let (data, _) = simulate_dataset(&truth, &mut ChaCha8Rng::seed_from_u64(0))?;

    // both methods see the same training rows; the variational fit also
    // watches the validation rows for early stopping
    let split = SplitSpec {
        train: 0.75,
        valid: 0.125,
        test: 0.125,
        seed: 0,
    };
    let (train, valid, _) = split_dataset(&data, &split)?;
    let start = Instant::now();
    let chain = run_chain(&train, &ChainConfig::default())?;
    println!("chain: {} draws in {:.1?}", chain.draws.len(), start.elapsed());
    let rates = &chain.acceptance;
    println!(
        "  acceptance: weights {:?}, p {:.2}, phi {:.2}, sigma_b {:.2}, effects {:.2}, shift {:.2}",
        rates.weights.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>(),
        rates.raw_p,
        rates.raw_log_dispersion,
        rates.raw_log_sigma_b,
        rates.group_effects,
        rates.intercept_shift
    );

    let start = Instant::now();
    let fit = train_with_validation(&train, &valid, &TrainConfig::default())?;
    println!("avb: trained in {:.1?}", start.elapsed());

    let row = |name: &str, d: &DrawTable| {
        let mut out = d.weight_means();
        out.push(d.mean_of("p_index").unwrap_or(f64::NAN));
        out.push(d.mean_of("dispersion").unwrap_or(f64::NAN));
        out.push(d.mean_of("sigma_b").unwrap_or(f64::NAN));
        println!("{name:>6}: {}", out.iter().map(|v| format!("{v:>8.4}")).collect::<String>());
    };
    println!("{:>6}  {:>8}{:>8}{:>8}{:>8}{:>8}{:>8}", "", "w0", "w1", "w2", "p", "phi", "sigma_b");
    row("mcmc", &chain.draws);
    row("avb", &fit.draws);
    let mut t = truth.fixed_weights.clone();
    t.extend([truth.p_index, truth.dispersion, truth.sigma_b]);
    println!("{:>6}: {}", "truth", t.iter().map(|v| format!("{v:>8.4}")).collect::<String>());
    Ok(())
}
