//! Class-token and prompt-token attention heatmaps over the patch grid,
//! written as PGM images under example_out/attention_maps/.

use std::path::Path;

use lgsp::backbone::{PromptMode, TokenPrompts, ToyViT, ViTConfig};
use lgsp::harness::export::write_pgm;
use lgsp::tensor::{Rng, Tensor};

fn main() -> lgsp::Result<()> {
    let mut rng = Rng::new(5);
    let vit = ToyViT::init(ViTConfig::default(), 32, 32, &mut rng)?;
    let prompts = TokenPrompts::vpt(PromptMode::VptDeep, 4, 2, 32, &mut rng)?;

    // an input with a bright block so the attention has structure to find
    let mut x = Tensor::randn(&[1, 1, 32, 32], &mut rng).scale(0.3);
    for y in 8..16 {
        for xx in 20..28 {
            x.data_mut()[y * 32 + xx] += 3.0;
        }
    }

    let out = Path::new("example_out/attention_maps");
    std::fs::create_dir_all(out)?;
    let mut files = 0;
    for layer in 0..2 {
        // token 0 is the class token, 1..=4 are this layer's prompt rows
        for token in 0..=4 {
            let (gh, gw, map) = vit.attention_map(&x, &prompts, layer, token, None)?;
            let name = format!("l{layer}_t{token}.pgm");
            write_pgm(&out.join(&name), gw, gh, &map)?;
            files += 1;
            if token == 0 {
                let peak = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                println!(
                    "layer {layer} class-token attention: grid {gh}x{gw}, peak {peak:.4}, sum {:.4}",
                    map.iter().sum::<f64>()
                );
            }
        }
    }
    println!("wrote {files} heatmaps to {}", out.display());
    Ok(())
}
