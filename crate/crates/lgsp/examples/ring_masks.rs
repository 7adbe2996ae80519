//! Builds a frequency ring bank, verifies the telescoping identity, and
//! writes every ring mask plus the softmax-blended combination as PGM images
//! under example_out/ring_masks/.

use std::path::Path;

use lgsp::gsp::{FormulaMode, RingBank};
use lgsp::harness::export::write_pgm;
use lgsp::tensor::Rng;

fn main() -> lgsp::Result<()> {
    let mut rng = Rng::new(42);
    let bank = RingBank::new(64, 64, 8, 10.0, 1.0, FormulaMode::Annulus, &mut rng)?;

    println!("radii: {:?}", bank.radii());
    println!("softmax band weights: {:?}", bank.softmax_weights());

    // sum of all ring masks telescopes into a single band expression
    let telescoped = bank.telescoped_mask();
    let mut sum = vec![0.0; 64 * 64];
    for k in 1..=8 {
        for (s, m) in sum.iter_mut().zip(bank.ring_mask(k)?) {
            *s += m;
        }
    }
    let worst = sum
        .iter()
        .zip(&telescoped)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("telescoping residual: {worst:.3e}");

    let out = Path::new("example_out/ring_masks");
    std::fs::create_dir_all(out)?;
    for k in 1..=8 {
        write_pgm(&out.join(format!("ring_{k}.pgm")), 64, 64, bank.ring_mask(k)?)?;
    }
    write_pgm(&out.join("combined.pgm"), 64, 64, &bank.combined_mask())?;
    println!("wrote 9 PGM files to {}", out.display());
    Ok(())
}
