//! Centered 2D DFT basics: forward/inverse round trip, Parseval's identity,
//! and the agreement between the direct-sum and radix-2 paths.

use lgsp::spectral::{dft2_centered_fast, dft2_centered_naive, idft2_centered};
use lgsp::tensor::{Rng, Tensor};

fn main() -> lgsp::Result<()> {
    let mut rng = Rng::new(7);
    let x = Tensor::randn(&[1, 1, 32, 32], &mut rng);

    let naive = dft2_centered_naive(&x)?;
    let fast = dft2_centered_fast(&x)?;
    let disagreement = naive
        .re()
        .iter()
        .zip(fast.re())
        .chain(naive.im().iter().zip(fast.im()))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("naive vs radix-2 max |diff|: {disagreement:.3e}");

    let (back, residue) = idft2_centered(&fast)?;
    println!("round-trip max |err|:        {:.3e}", x.max_abs_diff(&back)?);
    println!("imaginary residue:           {residue:.3e}");

    let energy: f64 = x.data().iter().map(|v| v * v).sum();
    let spectral: f64 = fast
        .re()
        .iter()
        .zip(fast.im())
        .map(|(r, i)| r * r + i * i)
        .sum::<f64>()
        / 1024.0;
    println!("parseval: pixel energy {energy:.6}, spectrum/(H*W) {spectral:.6}");

    // conjugate symmetry of a real image's centered spectrum
    println!(
        "conjugate symmetry residual: {:.3e}",
        fast.conjugate_symmetry_residual()
    );
    Ok(())
}
