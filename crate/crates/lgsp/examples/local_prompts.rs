//! The local prompt pool: query/key selection, temperature-weighted
//! aggregation, and the difference between hard and soft pooling.

use lgsp::lsp::{
    aggregate, generate_prompt, hard_pool_forward, select_topk, selection_weights,
    soft_pool_forward, PoolConfig, PromptPool, SelectionMode,
};
use lgsp::tensor::{Rng, Tensor};

fn main() -> lgsp::Result<()> {
    let mut rng = Rng::new(11);
    let pool = PromptPool::init(
        &PoolConfig {
            pool_size: 8,
            n_select: 3,
            temperature: 0.1,
            selection_mode: SelectionMode::Hard,
            c_in: 1,
            c_hidden: 4,
            d_key: 16,
            dropout_rate: 0.1,
            kernel_set: vec![1, 3, 5, 7],
        },
        &mut rng,
    )?;

    let x = Tensor::randn(&[1, 1, 16, 16], &mut rng);
    let q: Vec<f64> = (0..16).map(|_| rng.next_normal()).collect();

    let sims = pool.similarities(&q)?;
    println!("key similarities: {:?}", sims.iter().map(|s| (s * 1000.0).round() / 1000.0).collect::<Vec<_>>());

    let selected = select_topk(&q, &pool)?;
    let weights = selection_weights(&q, &pool, &selected)?;
    println!("selected entries: {selected:?}");
    println!("selection weights: {weights:?}");

    let prompts: Vec<Tensor> = selected
        .iter()
        .map(|&i| generate_prompt(&pool.entries[i], &x, false, &mut Rng::new(0)))
        .collect::<lgsp::Result<Vec<_>>>()?;
    let local = aggregate(&prompts, &weights)?;
    println!("aggregated prompt norm: {:.4}", local.norm());

    let hard = hard_pool_forward(&q, &pool, &x, false, &mut Rng::new(0))?;
    let soft = soft_pool_forward(&q, &pool, &x, false, &mut Rng::new(0))?;
    println!(
        "hard-pool output norm {:.4}, soft-pool output norm {:.4}, difference {:.4}",
        hard.norm(),
        soft.norm(),
        hard.sub(&soft)?.norm()
    );
    Ok(())
}
