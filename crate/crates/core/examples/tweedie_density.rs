//! Parameter maps, the truncated marginal against the series reference, and
//! sampling moments.
//!
//! ```text
//! cargo run --release --example tweedie_density
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tweedie_avb::tweedie::{
    marginal_log_likelihood, series_log_density_oracle, summation_window, to_compound, to_edm, tweedie_moments,
    tweedie_sample, EdmParams, TruncationConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let edm = EdmParams::new(3.0, 1.5, 1.0)?;
    let c = to_compound(&edm)?;
    let back = to_edm(&c)?;
    println!("mu={} p={} phi={}", edm.mu, edm.p_index, edm.dispersion);
    println!("  lambda={:.6} alpha={:.6} beta={:.6}", c.lambda, c.alpha, c.beta);
    println!("  round trip: mu={:.12} p={:.12} phi={:.12}", back.mu, back.p_index, back.dispersion);

    println!("\n{:>6} {:>8} {:>14} {:>14} {:>10}", "y", "window", "truncated", "series", "abs err");
    for y in [0.0, 0.1, 1.0, 3.0, 10.0, 30.0] {
        let adaptive = TruncationConfig::default();
        let window = if y > 0.0 {
            let w = summation_window(y, c.alpha, c.beta.ln(), c.lambda.ln(), &adaptive);
            format!("{}..{}", w.start(), w.end())
        } else {
            "-".into()
        };
        let approx = marginal_log_likelihood(y, &c, &adaptive)?;
        let exact = series_log_density_oracle(y, &edm, 1e-14)?;
        println!("{y:>6} {window:>8} {approx:>14.8} {exact:>14.8} {:>10.2e}", (approx - exact).abs());
    }

    let fixed = TruncationConfig { n_max: 10, adaptive: false };
    println!(
        "\nfixed window 1..10 at y=30: {:.8}",
        marginal_log_likelihood(30.0, &c, &fixed)?
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 200_000;
    let draws: Vec<f64> = (0..n).map(|_| tweedie_sample(&c, &mut rng)).collect::<Result<_, _>>()?;
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let zeros = draws.iter().filter(|&&y| y == 0.0).count() as f64 / n as f64;
    let (m, v) = tweedie_moments(&edm);
    println!("\n{n} draws: mean {mean:.4} (exact {m:.4}), variance {var:.4} (exact {v:.4})");
    println!("zero fraction {zeros:.4} (exact {:.4})", (-c.lambda).exp());
    Ok(())
}
