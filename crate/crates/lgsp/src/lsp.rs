//! Local spatial prompting: a pool of two-layer convolutional prompt
//! generators with per-entry keys, query/key cosine matching, top-k (or
//! full-pool softmax) weighting, and weighted aggregation into a single
//! image-shaped prompt.

use crate::learn::{conv2d_forward, Tape, Var};
use crate::tensor::{cosine_similarity, softmax, Rng, Tensor};
use crate::{LgspError, Result};

/// How prompts are pooled: top-k discrete selection or a softmax over the
/// entire pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    Hard,
    Soft,
}

impl std::str::FromStr for SelectionMode {
    type Err = LgspError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(SelectionMode::Hard),
            "soft" => Ok(SelectionMode::Soft),
            other => Err(LgspError::Config(format!(
                "unknown selection mode {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectionMode::Hard => write!(f, "hard"),
            SelectionMode::Soft => write!(f, "soft"),
        }
    }
}

/// One prompt generator: conv -> ReLU -> dropout -> conv, plus its selection
/// key. Kernels are odd so same-padding preserves the spatial dims.
#[derive(Debug, Clone)]
pub struct PromptPoolEntry {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub key: Tensor,
    pub dropout_rate: f64,
}

impl PromptPoolEntry {
    /// Kaiming-style init for the kernels, unit-normalized normal key.
    pub fn init(
        c_in: usize,
        c_hidden: usize,
        k1: usize,
        k2: usize,
        d_key: usize,
        dropout_rate: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if k1 % 2 == 0 || k2 % 2 == 0 {
            return Err(LgspError::InvalidArgument(format!(
                "kernel sizes must be odd, got {k1}, {k2}"
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(LgspError::InvalidArgument(format!(
                "dropout rate must be in [0,1), got {dropout_rate}"
            )));
        }
        let std1 = (2.0 / (c_in * k1 * k1) as f64).sqrt();
        let std2 = (2.0 / (c_hidden * k2 * k2) as f64).sqrt();
        let conv1_w = Tensor::randn(&[c_hidden, c_in, k1, k1], rng).scale(std1);
        let conv2_w = Tensor::randn(&[c_in, c_hidden, k2, k2], rng).scale(std2);
        let mut key = Tensor::randn(&[d_key], rng);
        let norm = key.norm();
        if norm <= 1e-12 {
            return Err(LgspError::ZeroNorm("prompt key at init".into()));
        }
        key = key.scale(1.0 / norm);
        Ok(Self {
            conv1_w,
            conv1_b: Tensor::zeros(&[c_hidden]),
            conv2_w,
            conv2_b: Tensor::zeros(&[c_in]),
            key,
            dropout_rate,
        })
    }
}

/// The pool plus its selection hyperparameters.
#[derive(Debug, Clone)]
pub struct PromptPool {
    pub entries: Vec<PromptPoolEntry>,
    pub n_select: usize,
    pub temperature: f64,
    pub selection_mode: SelectionMode,
}

/// Construction parameters for [`PromptPool::init`].
#[derive(Debug, Clone)]
pub struct PoolConfig {
    pub pool_size: usize,
    pub n_select: usize,
    pub temperature: f64,
    pub selection_mode: SelectionMode,
    pub c_in: usize,
    pub c_hidden: usize,
    pub d_key: usize,
    pub dropout_rate: f64,
    /// Odd kernel sizes; entries cycle through the ordered pairs of this set.
    pub kernel_set: Vec<usize>,
}

impl PromptPool {
    pub fn init(cfg: &PoolConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.pool_size == 0 {
            return Err(LgspError::InvalidArgument("pool must be nonempty".into()));
        }
        if cfg.n_select == 0 || cfg.n_select > cfg.pool_size {
            return Err(LgspError::InvalidArgument(format!(
                "selection size {} outside 1..={}",
                cfg.n_select, cfg.pool_size
            )));
        }
        if !(cfg.temperature > 0.0) {
            return Err(LgspError::InvalidArgument(format!(
                "selection temperature must be positive, got {}",
                cfg.temperature
            )));
        }
        if cfg.kernel_set.is_empty() {
            return Err(LgspError::EmptyInput("kernel set".into()));
        }
        let pairs: Vec<(usize, usize)> = cfg
            .kernel_set
            .iter()
            .flat_map(|&a| cfg.kernel_set.iter().map(move |&b| (a, b)))
            .collect();
        let entries = (0..cfg.pool_size)
            .map(|i| {
                let (k1, k2) = pairs[i % pairs.len()];
                PromptPoolEntry::init(
                    cfg.c_in,
                    cfg.c_hidden,
                    k1,
                    k2,
                    cfg.d_key,
                    cfg.dropout_rate,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            entries,
            n_select: cfg.n_select,
            temperature: cfg.temperature,
            selection_mode: cfg.selection_mode,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Cosine similarity of the query to every key. A degenerate query (norm
    /// below 1e-12) yields all-zero similarities so downstream selection
    /// falls back to the index tie-break.
    pub fn similarities(&self, q: &[f64]) -> Result<Vec<f64>> {
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if qn <= 1e-12 {
            return Ok(vec![0.0; self.entries.len()]);
        }
        self.entries
            .iter()
            .map(|e| cosine_similarity(q, e.key.data()))
            .collect()
    }
}

/// Learnable projection from the class-token feature to the query space.
#[derive(Debug, Clone)]
pub struct QueryProjection {
    pub w: Tensor,
    pub b: Tensor,
}

impl QueryProjection {
    pub fn init(d_model: usize, d_key: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / d_model as f64).sqrt();
        Self {
            w: Tensor::randn(&[d_model, d_key], rng).scale(std),
            b: Tensor::zeros(&[d_key]),
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut w = Tensor::zeros(&[d, d]);
        for i in 0..d {
            w.data_mut()[i * d + i] = 1.0;
        }
        Self {
            w,
            b: Tensor::zeros(&[d]),
        }
    }
}

/// Projects the class token (token 0) of the backbone output into query
/// space: one query row per batch item.
pub fn query_key(proj: &QueryProjection, features: &Tensor) -> Result<Tensor> {
    let shape = features.shape();
    let [b, t, d] = match *shape {
        [b, t, d] => [b, t, d],
        _ => {
            return Err(LgspError::ShapeMismatch {
                expected: vec![0, 0, 0],
                got: shape.to_vec(),
            })
        }
    };
    if t == 0 {
        return Err(LgspError::EmptyInput("token axis".into()));
    }
    let [dm, dk] = match *proj.w.shape() {
        [dm, dk] => [dm, dk],
        _ => {
            return Err(LgspError::ShapeMismatch {
                expected: vec![0, 0],
                got: proj.w.shape().to_vec(),
            })
        }
    };
    if dm != d {
        return Err(LgspError::ShapeMismatch {
            expected: vec![d],
            got: vec![dm],
        });
    }
    let f = features.data();
    let mut out = vec![0.0; b * dk];
    for bi in 0..b {
        let cls = &f[bi * t * d..bi * t * d + d];
        for j in 0..dk {
            let mut acc = proj.b.data()[j];
            for i in 0..d {
                acc += cls[i] * proj.w.data()[i * dk + j];
            }
            out[bi * dk + j] = acc;
        }
    }
    Tensor::new(vec![b, dk], out)
}

/// Runs one prompt generator: conv(k1) -> ReLU -> dropout (training only) ->
/// conv(k2). Output shape equals input shape.
pub fn generate_prompt(
    entry: &PromptPoolEntry,
    x: &Tensor,
    training: bool,
    rng: &mut Rng,
) -> Result<Tensor> {
    let (h1, _) = conv2d_forward(x, &entry.conv1_w, &entry.conv1_b)?;
    let mut h1 = h1.map(|v| v.max(0.0));
    if training && entry.dropout_rate > 0.0 {
        let keep = 1.0 - entry.dropout_rate;
        let hd = h1.data_mut();
        for v in hd.iter_mut() {
            if rng.next_f64() < entry.dropout_rate {
                *v = 0.0;
            } else {
                *v /= keep;
            }
        }
    }
    let (out, _) = conv2d_forward(&h1, &entry.conv2_w, &entry.conv2_b)?;
    Ok(out)
}

/// Indices of the `n_select` keys most similar to the query.
///
/// Because the sum of similarities over a fixed-size subset is maximized by
/// the largest elements, this equals the subset-argmax selection. Ties break
/// toward the lower index; output is ordered by descending similarity then
/// ascending index.
pub fn select_topk(q: &[f64], pool: &PromptPool) -> Result<Vec<usize>> {
    if pool.n_select > pool.len() {
        return Err(LgspError::InvalidArgument(format!(
            "cannot select {} from pool of {}",
            pool.n_select,
            pool.len()
        )));
    }
    let sims = pool.similarities(q)?;
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .expect("similarities are finite")
            .then(a.cmp(&b))
    });
    order.truncate(pool.n_select);
    Ok(order)
}

/// Softmax weights over the selected subset at the pool temperature.
pub fn selection_weights(q: &[f64], pool: &PromptPool, selected: &[usize]) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(LgspError::EmptyInput("selected index set".into()));
    }
    let sims = pool.similarities(q)?;
    let subset: Vec<f64> = selected.iter().map(|&i| sims[i]).collect();
    softmax(&subset, pool.temperature)
}

/// Weighted sum of prompts: each weight is a scalar broadcast over its
/// prompt tensor.
pub fn aggregate(prompts: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if prompts.is_empty() || prompts.len() != weights.len() {
        return Err(LgspError::ShapeMismatch {
            expected: vec![prompts.len()],
            got: vec![weights.len()],
        });
    }
    let mut acc = prompts[0].scale(weights[0]);
    for (p, &w) in prompts[1..].iter().zip(&weights[1..]) {
        acc = acc.add(&p.scale(w))?;
    }
    Ok(acc)
}

/// Hard-pool forward: select, weight, generate, aggregate.
pub fn hard_pool_forward(
    q: &[f64],
    pool: &PromptPool,
    x: &Tensor,
    training: bool,
    rng: &mut Rng,
) -> Result<Tensor> {
    let selected = select_topk(q, pool)?;
    let weights = selection_weights(q, pool, &selected)?;
    let prompts = selected
        .iter()
        .map(|&i| generate_prompt(&pool.entries[i], x, training, rng))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&prompts, &weights)
}

/// Soft-pool forward: softmax over every key similarity, weighted sum of all
/// pool prompts.
pub fn soft_pool_forward(
    q: &[f64],
    pool: &PromptPool,
    x: &Tensor,
    training: bool,
    rng: &mut Rng,
) -> Result<Tensor> {
    let sims = pool.similarities(q)?;
    let weights = softmax(&sims, pool.temperature)?;
    let prompts = pool
        .entries
        .iter()
        .map(|e| generate_prompt(e, x, training, rng))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&prompts, &weights)
}

/// Tape-recorded prompt generator for training; parameter names are prefixed
/// so each entry's kernels stay distinct.
pub fn generate_prompt_on_tape(
    tape: &mut Tape,
    prefix: &str,
    entry: &PromptPoolEntry,
    x: Var,
    training: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let w1 = tape.param(&format!("{prefix}.conv1.w"), &entry.conv1_w);
    let b1 = tape.param(&format!("{prefix}.conv1.b"), &entry.conv1_b);
    let w2 = tape.param(&format!("{prefix}.conv2.w"), &entry.conv2_w);
    let b2 = tape.param(&format!("{prefix}.conv2.b"), &entry.conv2_b);
    let h = tape.conv2d(x, w1, b1)?;
    let h = tape.relu(h);
    let h = if training && entry.dropout_rate > 0.0 {
        tape.dropout(h, entry.dropout_rate, rng)?
    } else {
        h
    };
    tape.conv2d(h, w2, b2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool_cfg(m: usize, n_select: usize) -> PoolConfig {
        PoolConfig {
            pool_size: m,
            n_select,
            temperature: 1.0,
            selection_mode: SelectionMode::Hard,
            c_in: 1,
            c_hidden: 4,
            d_key: 6,
            dropout_rate: 0.0,
            kernel_set: vec![1, 3],
        }
    }

    fn pool(m: usize, n_select: usize, seed: u64) -> PromptPool {
        PromptPool::init(&pool_cfg(m, n_select), &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn zero_kernels_give_zero_prompt() {
        let mut e = PromptPoolEntry::init(1, 4, 3, 3, 6, 0.0, &mut Rng::new(1)).unwrap();
        e.conv1_w = Tensor::zeros(e.conv1_w.shape());
        e.conv2_w = Tensor::zeros(e.conv2_w.shape());
        let x = Tensor::randn(&[1, 1, 4, 4], &mut Rng::new(2));
        let p = generate_prompt(&e, &x, false, &mut Rng::new(3)).unwrap();
        assert_eq!(p.data(), vec![0.0; 16].as_slice());
    }

    #[test]
    fn identity_composition_preserves_nonnegative_input() {
        // 1x1 identity kernels with C_hidden == C_in == 1
        let mut e = PromptPoolEntry::init(1, 1, 1, 1, 4, 0.0, &mut Rng::new(1)).unwrap();
        e.conv1_w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        e.conv2_w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.3, 1.1, 0.0, 2.4]).unwrap();
        let p = generate_prompt(&e, &x, false, &mut Rng::new(3)).unwrap();
        assert_eq!(p, x);
    }

    #[test]
    fn generator_matches_scratch_convolution_oracle() {
        // independent direct convolution with explicit signed indexing
        fn scratch_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
            let (ci, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
            let (co, k) = (w.shape()[0], w.shape()[2]);
            let p = (k - 1) / 2;
            let mut out = vec![0.0; co * h * wd];
            for oc in 0..co {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b.data()[oc];
                        for ic in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let yy = y as isize + ky as isize - p as isize;
                                    let xc = xx as isize + kx as isize - p as isize;
                                    if yy < 0 || xc < 0 || yy >= h as isize || xc >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[(ic * h + yy as usize) * wd + xc as usize]
                                        * w.data()[((oc * ci + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[(oc * h + y) * wd + xx] = acc;
                    }
                }
            }
            Tensor::new(vec![1, co, h, wd], out).unwrap()
        }

        let mut rng = Rng::new(10);
        let e = PromptPoolEntry::init(1, 3, 1, 3, 4, 0.0, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 1, 4, 4], &mut rng);
        let got = generate_prompt(&e, &x, false, &mut Rng::new(0)).unwrap();

        let h1 = scratch_conv(&x, &e.conv1_w, &e.conv1_b).map(|v| v.max(0.0));
        let want = scratch_conv(&h1, &e.conv2_w, &e.conv2_b);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-10);
    }

    #[test]
    fn generator_rejects_channel_mismatch() {
        let e = PromptPoolEntry::init(2, 4, 3, 3, 4, 0.0, &mut Rng::new(1)).unwrap();
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(generate_prompt(&e, &x, false, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn even_kernel_rejected_at_init() {
        assert!(PromptPoolEntry::init(1, 4, 2, 3, 4, 0.0, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn dropout_off_is_deterministic() {
        let mut rng = Rng::new(5);
        let e = PromptPoolEntry::init(1, 4, 3, 3, 4, 0.1, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 1, 6, 6], &mut rng);
        let a = generate_prompt(&e, &x, false, &mut Rng::new(1)).unwrap();
        let b = generate_prompt(&e, &x, false, &mut Rng::new(999)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn query_projection_identity_and_zero() {
        let proj = QueryProjection::identity(3);
        let features = Tensor::new(vec![1, 2, 3], vec![1.0, 0.0, 0.0, 9.0, 9.0, 9.0]).unwrap();
        let q = query_key(&proj, &features).unwrap();
        assert_eq!(q.data(), &[1.0, 0.0, 0.0]);

        let zero = QueryProjection {
            w: Tensor::zeros(&[3, 3]),
            b: Tensor::zeros(&[3]),
        };
        let q = query_key(&zero, &features).unwrap();
        assert_eq!(q.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn query_projection_matches_matvec_oracle() {
        let mut rng = Rng::new(8);
        let proj = QueryProjection::init(4, 3, &mut rng);
        let features = Tensor::randn(&[2, 5, 4], &mut rng);
        let q = query_key(&proj, &features).unwrap();
        for bi in 0..2 {
            let cls = &features.data()[bi * 20..bi * 20 + 4];
            for j in 0..3 {
                let mut want = proj.b.data()[j];
                for i in 0..4 {
                    want += cls[i] * proj.w.data()[i * 3 + j];
                }
                assert!((q.data()[bi * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    /// Exhaustive subset-argmax over all n_select-subsets.
    fn brute_force_selection(sims: &[f64], n_select: usize) -> Vec<usize> {
        let m = sims.len();
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut idx: Vec<usize> = (0..n_select).collect();
        loop {
            let total: f64 = idx.iter().map(|&i| sims[i]).sum();
            let better = match &best {
                None => true,
                Some((bt, _)) => total > bt + 1e-15,
            };
            if better {
                best = Some((total, idx.clone()));
            }
            // next combination
            let mut i = n_select;
            loop {
                if i == 0 {
                    return best.unwrap().1;
                }
                i -= 1;
                if idx[i] != i + m - n_select {
                    idx[i] += 1;
                    for j in i + 1..n_select {
                        idx[j] = idx[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    #[test]
    fn topk_equals_subset_argmax() {
        let mut p = pool(4, 2, 3);
        // force keys so similarities to q=[1,0,...] are [0.9, 0.1, 0.5, 0.7]
        let sims = [0.9, 0.1, 0.5, 0.7];
        for (e, s) in p.entries.iter_mut().zip(sims) {
            let mut k = vec![0.0; 6];
            k[0] = s;
            k[1] = (1.0f64 - s * s).sqrt();
            e.key = Tensor::new(vec![6], k).unwrap();
        }
        let mut q = vec![0.0; 6];
        q[0] = 1.0;
        let got = select_topk(&q, &p).unwrap();
        assert_eq!(got, vec![0, 3]);
        let brute = brute_force_selection(&sims, 2);
        let mut sorted = got.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, brute);
    }

    #[test]
    fn topk_tie_break_and_full_selection() {
        let mut p = pool(4, 2, 3);
        for e in p.entries.iter_mut() {
            let mut k = vec![0.0; 6];
            k[0] = 1.0;
            e.key = Tensor::new(vec![6], k).unwrap();
        }
        let mut q = vec![0.0; 6];
        q[0] = 2.0;
        assert_eq!(select_topk(&q, &p).unwrap(), vec![0, 1]);

        let p_all = pool(3, 3, 4);
        let q = vec![1.0; 6];
        assert_eq!(select_topk(&q, &p_all).unwrap().len(), 3);

        let p_over = PromptPool {
            n_select: 5,
            ..pool(3, 3, 4)
        };
        assert!(select_topk(&q, &p_over).is_err());
    }

    #[test]
    fn selection_weights_direct_and_limits() {
        let mut p = pool(2, 2, 5);
        for (e, s) in p.entries.iter_mut().zip([0.8, 0.4]) {
            let mut k = vec![0.0; 6];
            k[0] = s;
            k[1] = (1.0f64 - s * s).sqrt();
            e.key = Tensor::new(vec![6], k).unwrap();
        }
        let mut q = vec![0.0; 6];
        q[0] = 1.0;
        let w = selection_weights(&q, &p, &[0, 1]).unwrap();
        assert!((w[0] - 0.59869).abs() < 1e-5);
        assert!((w[1] - 0.40131).abs() < 1e-5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let w1 = selection_weights(&q, &p, &[1]).unwrap();
        assert_eq!(w1, vec![1.0]);

        let mut hot = p.clone();
        hot.temperature = 1e6;
        let w = selection_weights(&q, &hot, &[0, 1]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-5);
        assert!((w[1] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn aggregate_examples() {
        let ones = Tensor::full(&[1, 1, 2, 2], 1.0);
        let threes = Tensor::full(&[1, 1, 2, 2], 3.0);
        let out = aggregate(&[ones.clone(), threes], &[0.5, 0.5]).unwrap();
        assert_eq!(out.data(), vec![2.0; 4].as_slice());

        let out = aggregate(&[ones.clone()], &[1.0]).unwrap();
        assert_eq!(out, ones);

        let mut rng = Rng::new(6);
        let ps: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&[1, 1, 3, 3], &mut rng))
            .collect();
        let ws = [0.2, 0.5, 0.3];
        let got = aggregate(&ps, &ws).unwrap();
        for i in 0..9 {
            let want: f64 = ps.iter().zip(ws).map(|(p, w)| p.data()[i] * w).sum();
            assert!((got.data()[i] - want).abs() < 1e-12);
        }

        let bad = Tensor::full(&[1, 1, 3, 3], 1.0);
        assert!(aggregate(&[ones, bad], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn soft_equals_hard_when_everything_selected() {
        let p = pool(3, 3, 9);
        let mut rng_q = Rng::new(10);
        let q: Vec<f64> = (0..6).map(|_| rng_q.next_normal()).collect();
        let x = Tensor::randn(&[1, 1, 4, 4], &mut rng_q);
        let hard = hard_pool_forward(&q, &p, &x, false, &mut Rng::new(0)).unwrap();
        let soft = soft_pool_forward(&q, &p, &x, false, &mut Rng::new(0)).unwrap();
        // same set, same temperature; ordering differs but the weighted sum
        // is permutation invariant
        assert!(hard.max_abs_diff(&soft).unwrap() < 1e-12);
    }

    #[test]
    fn soft_low_temperature_concentrates() {
        let mut p = pool(3, 1, 11);
        p.temperature = 0.01;
        // key 0 colinear with q, the others orthogonal
        let d = 6;
        for (i, e) in p.entries.iter_mut().enumerate() {
            let mut k = vec![0.0; d];
            k[i] = 1.0;
            e.key = Tensor::new(vec![d], k).unwrap();
        }
        let mut q = vec![0.0; d];
        q[0] = 3.0;
        let x = Tensor::randn(&[1, 1, 4, 4], &mut Rng::new(12));
        let soft = soft_pool_forward(&q, &p, &x, false, &mut Rng::new(0)).unwrap();
        let want = generate_prompt(&p.entries[0], &x, false, &mut Rng::new(0)).unwrap();
        let scale = want.norm().max(1e-9);
        assert!(soft.max_abs_diff(&want).unwrap() / scale < 1e-3);
    }

    #[test]
    fn zero_query_falls_back_to_uniform_or_tiebreak() {
        let p = pool(4, 2, 13);
        let q = vec![0.0; 6];
        assert_eq!(select_topk(&q, &p).unwrap(), vec![0, 1]);
        let sims = p.similarities(&q).unwrap();
        let w = softmax(&sims, p.temperature).unwrap();
        for v in w {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_permutation_leaves_local_prompt_invariant() {
        let p = pool(5, 2, 14);
        let mut rng = Rng::new(15);
        let q: Vec<f64> = (0..6).map(|_| rng.next_normal()).collect();
        let x = Tensor::randn(&[1, 1, 4, 4], &mut rng);

        let base_sel = select_topk(&q, &p).unwrap();
        let base_out = hard_pool_forward(&q, &p, &x, false, &mut Rng::new(0)).unwrap();
        let base_soft = soft_pool_forward(&q, &p, &x, false, &mut Rng::new(0)).unwrap();

        // rotate the pool by 2
        let mut rotated = p.clone();
        rotated.entries.rotate_left(2);
        let rot_sel = select_topk(&q, &rotated).unwrap();
        let mapped: Vec<usize> = base_sel.iter().map(|&i| (i + 5 - 2) % 5).collect();
        assert_eq!(rot_sel, mapped);
        let rot_out = hard_pool_forward(&q, &rotated, &x, false, &mut Rng::new(0)).unwrap();
        assert!(base_out.max_abs_diff(&rot_out).unwrap() < 1e-12);
        let rot_soft = soft_pool_forward(&q, &rotated, &x, false, &mut Rng::new(0)).unwrap();
        assert!(base_soft.max_abs_diff(&rot_soft).unwrap() < 1e-12);
    }

    #[test]
    fn query_scaling_leaves_selection_unchanged() {
        let p = pool(6, 3, 16);
        let mut rng = Rng::new(17);
        let q: Vec<f64> = (0..6).map(|_| rng.next_normal()).collect();
        let q_scaled: Vec<f64> = q.iter().map(|v| v * 37.5).collect();
        assert_eq!(
            select_topk(&q, &p).unwrap(),
            select_topk(&q_scaled, &p).unwrap()
        );
        let sel = select_topk(&q, &p).unwrap();
        let w1 = selection_weights(&q, &p, &sel).unwrap();
        let w2 = selection_weights(&q_scaled, &p, &sel).unwrap();
        for (a, b) in w1.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn key_gradients_flow_through_selection_weights() {
        // aggregate -> selection_weights -> keys, with the top-k set frozen;
        // checked against central differences.
        let p = pool(4, 2, 18);
        let mut rng = Rng::new(19);
        let q: Vec<f64> = (0..6).map(|_| rng.next_normal()).collect();
        let x = Tensor::randn(&[1, 1, 3, 3], &mut rng);
        let selected = select_topk(&q, &p).unwrap();
        let prompts: Vec<Tensor> = selected
            .iter()
            .map(|&i| generate_prompt(&p.entries[i], &x, false, &mut Rng::new(0)).unwrap())
            .collect();

        let loss_of = |keys: &[Tensor]| -> f64 {
            let sims: Vec<f64> = selected
                .iter()
                .map(|&i| cosine_similarity(&q, keys[i].data()).unwrap())
                .collect();
            let w = softmax(&sims, p.temperature).unwrap();
            let agg = aggregate(&prompts, &w).unwrap();
            agg.data().iter().map(|v| v * v).sum()
        };

        // analytic via tape
        let mut tape = Tape::new();
        let qv = tape.constant(Tensor::from_vec(q.clone()).unwrap());
        let mut sim_vars = Vec::new();
        for &i in &selected {
            let key = tape.param(&format!("key{i}"), &p.entries[i].key);
            sim_vars.push(tape.cosine_sim(qv, key).unwrap());
        }
        let sims = tape.stack_scalars(&sim_vars).unwrap();
        let scaled = tape.scale_const(sims, 1.0 / p.temperature);
        let w = tape.softmax_last(scaled).unwrap();
        let mut acc = None;
        for j in 0..selected.len() {
            let wj = tape.index_scalar(w, j).unwrap();
            let pv = tape.constant(prompts[j].clone());
            let term = tape.scale_var(pv, wj).unwrap();
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term).unwrap(),
            });
        }
        let agg = acc.unwrap();
        let sq = tape.square(agg);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();

        // numeric per selected key
        let h = 1e-5;
        for &i in &selected {
            let analytic = grads.by_name(&format!("key{i}")).unwrap();
            for d in 0..6 {
                let mut keys: Vec<Tensor> = p.entries.iter().map(|e| e.key.clone()).collect();
                keys[i].data_mut()[d] += h;
                let plus = loss_of(&keys);
                keys[i].data_mut()[d] -= 2.0 * h;
                let minus = loss_of(&keys);
                let numeric = (plus - minus) / (2.0 * h);
                let denom = analytic.data()[d].abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic.data()[d] - numeric).abs() / denom <= 1e-4,
                    "key{i}[{d}]"
                );
            }
        }
    }
}
