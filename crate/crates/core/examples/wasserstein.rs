//! Exact W2 distances between empirical measures.

use meanfield::measure::{wasserstein2_with_method, EmpiricalMeasure};

fn main() -> meanfield::Result<()> {
    let line_a = EmpiricalMeasure::from_scalars(&[0.0, 1.0, 2.0, 5.0])?;
    let line_b = EmpiricalMeasure::from_scalars(&[0.5, 1.5, 2.5])?;
    let (w, method) = wasserstein2_with_method(&line_a, &line_b)?;
    println!("1d, different sizes: W2 = {w:.6} via {method:?}");

    let mu = EmpiricalMeasure::gaussian_sample(&[0.0, 0.0], 1.0, 40, 1)?;
    let nu = mu.pushforward(|_, d| d.copy_from_slice(&[0.3, -0.4]))?;
    let (w, method) = wasserstein2_with_method(&mu, &nu)?;
    println!("2d translation by (0.3, -0.4): W2 = {w:.6} via {method:?} (shift length 0.5)");

    let small = EmpiricalMeasure::new(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![0.5, 0.25, 0.25])?;
    let other = EmpiricalMeasure::new(2, vec![1.0, 1.0, -1.0, 0.0], vec![0.6, 0.4])?;
    let (w, method) = wasserstein2_with_method(&small, &other)?;
    println!("2d, general weights: W2 = {w:.6} via {method:?}");
    Ok(())
}
