//! Work with predictive mixtures directly: variance decomposition into
//! noise and model-spread terms, quantiles by bisection, and interval
//! behavior as the coverage level changes.
//!
//! ```bash
//! cargo run --release --example uncertainty_intervals
//! ```

use fieldcast::bayes::{
    mixture_quantile, normal_cdf, predictive_variance, MixtureComponent, PredictiveMixture,
};

fn main() -> fieldcast::Result<()> {
    // a hand-built 4-component mixture, as a 4-particle ensemble would emit
    let mix = PredictiveMixture::new(vec![
        MixtureComponent { mean: 9.8, std: 0.6 },
        MixtureComponent { mean: 10.4, std: 0.7 },
        MixtureComponent { mean: 10.1, std: 0.6 },
        MixtureComponent { mean: 9.5, std: 0.8 },
    ]);

    let m = mix.component_count() as f64;
    let noise = mix.components.iter().map(|c| c.std * c.std).sum::<f64>() / m;
    let spread = predictive_variance(&mix) - noise;
    println!("point mean        {:.4}", mix.point_mean());
    println!("total variance    {:.4}", predictive_variance(&mix));
    println!("  noise term      {noise:.4}");
    println!("  model spread    {spread:.4}");

    println!("\nquantiles:");
    for q in [0.025, 0.25, 0.5, 0.75, 0.975] {
        let x = mixture_quantile(&mix, q)?;
        println!("  q={q:<6} -> {x:.4}   (CDF check {:.6})", mix.cdf(x));
    }

    println!("\ncentral intervals:");
    let mut last_width = 0.0;
    for level in [0.5, 0.8, 0.9, 0.95, 0.99] {
        let (lo, hi) = mix.interval(level)?;
        let width = hi - lo;
        assert!(width >= last_width, "widening the level cannot narrow the interval");
        last_width = width;
        println!("  {level:>4}: [{lo:.3}, {hi:.3}]  width {width:.3}");
    }

    // a singleton mixture is exactly Gaussian
    let single = PredictiveMixture::new(vec![MixtureComponent { mean: 0.0, std: 1.0 }]);
    println!(
        "\nsingleton sanity: q(0.975) = {:.6} (normal CDF at it: {:.6})",
        single.quantile(0.975)?,
        normal_cdf(single.quantile(0.975)?)
    );
    Ok(())
}
