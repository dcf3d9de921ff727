//! A critic trained to tell `N(1, 1)` from `N(0, 1)` recovers the log density
//! ratio `z − 1/2`, which is what the variational fit relies on to stand in
//! for the KL term.
//!
//! ```text
//! cargo run --release --example density_ratio_critic
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tweedie_avb::avb::{normal_vector, train_critic, CriticTrainConfig, Discriminator};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut critic = Discriminator::new(1, &[32, 32], &mut rng);
    let cfg = CriticTrainConfig {
        batch_size: 128,
        ..CriticTrainConfig::default()
    };
    let trace = train_critic(
        &mut critic,
        |r| normal_vector(1, 1.0, r),
        |r| normal_vector(1, 0.0, r),
        &cfg,
        &mut rng,
    )?;
    let tail = &trace[trace.len() - 500..];
    println!(
        "{} steps; mean loss over the last 500: {:.4}",
        cfg.steps,
        tail.iter().sum::<f64>() / tail.len() as f64
    );

    println!("{:>6} {:>9} {:>9} {:>8}", "z", "T(z)", "z − 0.5", "error");
    let mut worst: f64 = 0.0;
    for k in 0..=10 {
        let z = -2.0 + 0.5 * k as f64;
        let t = critic.evaluate(&[z]);
        worst = worst.max((t - (z - 0.5)).abs());
        println!("{z:>6.2} {t:>9.4} {:>9.4} {:>8.4}", z - 0.5, (t - (z - 0.5)).abs());
    }
    println!("max |T(z) − (z − 0.5)| = {worst:.4}");
    Ok(())
}
