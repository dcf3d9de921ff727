//! The scalar tape and Adam on a small Poisson regression, with a
//! finite-difference check of the gradient.
//!
//! ```text
//! cargo run --release --example autodiff_adam
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use tweedie_avb::autodiff::{finite_diff_check, sum, AdamConfig, AdamState, ParamStore, Tape, Var};

fn negative_log_likelihood<'t>(tape: &'t Tape, w: &[Var<'t>], xs: &[f64], ys: &[f64]) -> Var<'t> {
    let terms: Vec<Var<'t>> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let eta = w[0] + w[1] * x;
            eta.exp() - eta * y
        })
        .collect();
    sum(&terms).unwrap_or_else(|_| tape.constant(0.0)) * (1.0 / xs.len() as f64)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth = [0.5, -0.8];
    let xs: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| Poisson::new((truth[0] + truth[1] * x).exp()).map(|p| p.sample(&mut rng)))
        .collect::<Result<_, _>>()?;

    let report = finite_diff_check(|t, w| negative_log_likelihood(t, w, &xs, &ys), &[0.1, 0.2], 1e-5)?;
    println!("finite-difference check: max relative error {:.2e}", report.max_rel_error);

    let mut params = ParamStore::new();
    params.register("w", 2, |_| 0.0)?;
    let mut adam = AdamState::new(
        params.len(),
        AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        },
    )?;
    for step in 0..=600 {
        let tape = Tape::new();
        let w = params.on_tape(&tape, true);
        let loss = negative_log_likelihood(&tape, &w, &xs, &ys);
        let grads = tape.backward(loss)?;
        adam.step(&mut params, &grads.wrt_all(&w))?;
        if step % 100 == 0 {
            println!("step {step:>3}: loss {:.5}  w = {:?}", loss.value(), params.get("w")?);
        }
    }
    println!("truth: {truth:?}");
    Ok(())
}
