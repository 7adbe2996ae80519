//! Toy vision transformer with token prompts.
//!
//! Patch embedding with sinusoidal positional encodings, a learnable class
//! token at index 0, and `n_layers` of multi-head self-attention + MLP with
//! residual connections (no normalization layers at this scale). Prompt
//! tokens are inserted between the class token and the patch tokens:
//! shallow variants insert once at the first layer and let the rows flow,
//! deep variants replace the rows with fresh ones at every layer. The pool
//! variants draw their rows from a keyed entry list selected per input.
//!
//! All forwards run through the gradient tape; frozen use simply never
//! applies updates.

use crate::learn::{Tape, Var};
use crate::tensor::{cosine_similarity, Rng, Tensor};
use crate::{LgspError, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone)]
pub struct ViTConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch_size: usize,
    pub mlp_hidden: usize,
    pub c_in: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            patch_size: 4,
            mlp_hidden: 64,
            c_in: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LayerWeights {
    fn init(d: usize, hidden: usize, rng: &mut Rng) -> Self {
        let s = (1.0 / d as f64).sqrt();
        let sh = (1.0 / hidden as f64).sqrt();
        Self {
            wq: Tensor::randn(&[d, d], rng).scale(s),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::randn(&[d, d], rng).scale(s),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::randn(&[d, d], rng).scale(s),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::randn(&[d, d], rng).scale(s),
            bo: Tensor::zeros(&[d]),
            w1: Tensor::randn(&[d, hidden], rng).scale(s),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden, d], rng).scale(sh),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn zeroed(d: usize, hidden: usize) -> Self {
        Self {
            wq: Tensor::zeros(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::zeros(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::zeros(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::zeros(&[d, d]),
            bo: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[d, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, d]),
            b2: Tensor::zeros(&[d]),
        }
    }
}

/// Where prompt tokens come from and how they are inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    None,
    VptShallow,
    VptDeep,
    PoolShallow,
    PoolDeep,
}

impl std::str::FromStr for PromptMode {
    type Err = LgspError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PromptMode::None),
            "vpt_shallow" => Ok(PromptMode::VptShallow),
            "vpt_deep" => Ok(PromptMode::VptDeep),
            "pool_shallow" => Ok(PromptMode::PoolShallow),
            "pool_deep" => Ok(PromptMode::PoolDeep),
            other => Err(LgspError::Config(format!("unknown prompt mode {other:?}"))),
        }
    }
}

/// One keyed token-pool entry: per-layer prompt rows.
#[derive(Debug, Clone)]
pub struct TokenPoolEntry {
    pub key: Tensor,
    /// one [1, d_model] row per layer
    pub prompts: Vec<Tensor>,
}

/// Token prompt state for a model variant.
#[derive(Debug, Clone)]
pub struct TokenPrompts {
    pub mode: PromptMode,
    /// per-layer [p_len, d_model] matrices for the vpt modes
    pub layer_prompts: Vec<Tensor>,
    pub pool: Vec<TokenPoolEntry>,
    pub pool_select: usize,
}

impl TokenPrompts {
    pub fn none() -> Self {
        Self {
            mode: PromptMode::None,
            layer_prompts: Vec::new(),
            pool: Vec::new(),
            pool_select: 0,
        }
    }

    /// VPT prompts with `p_len` rows per layer, normal init scaled to the
    /// model dimension.
    pub fn vpt(mode: PromptMode, p_len: usize, n_layers: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        match mode {
            PromptMode::VptShallow | PromptMode::VptDeep => {}
            _ => {
                return Err(LgspError::InvalidArgument(
                    "vpt constructor needs a vpt mode".into(),
                ))
            }
        }
        let s = (1.0 / d as f64).sqrt();
        let layer_prompts = if p_len == 0 {
            Vec::new()
        } else {
            (0..n_layers)
                .map(|_| Tensor::randn(&[p_len, d], rng).scale(s))
                .collect()
        };
        Ok(Self {
            mode,
            layer_prompts,
            pool: Vec::new(),
            pool_select: 0,
        })
    }

    /// Keyed pool with one token row per entry per layer.
    pub fn pool(
        mode: PromptMode,
        pool_size: usize,
        pool_select: usize,
        n_layers: usize,
        d: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        match mode {
            PromptMode::PoolShallow | PromptMode::PoolDeep => {}
            _ => {
                return Err(LgspError::InvalidArgument(
                    "pool constructor needs a pool mode".into(),
                ))
            }
        }
        if pool_select > pool_size {
            return Err(LgspError::InvalidArgument(format!(
                "pool selection {pool_select} exceeds pool size {pool_size}"
            )));
        }
        let s = (1.0 / d as f64).sqrt();
        let pool = (0..pool_size)
            .map(|_| {
                let mut key = Tensor::randn(&[d], rng);
                let n = key.norm().max(1e-12);
                key = key.scale(1.0 / n);
                TokenPoolEntry {
                    key,
                    prompts: (0..n_layers)
                        .map(|_| Tensor::randn(&[1, d], rng).scale(s))
                        .collect(),
                }
            })
            .collect();
        Ok(Self {
            mode,
            layer_prompts: Vec::new(),
            pool,
            pool_select,
        })
    }

    pub fn p_len(&self) -> usize {
        match self.mode {
            PromptMode::None => 0,
            PromptMode::VptShallow | PromptMode::VptDeep => self
                .layer_prompts
                .first()
                .map_or(0, |m| m.shape()[0]),
            PromptMode::PoolShallow | PromptMode::PoolDeep => self.pool_select,
        }
    }

    /// Top-k pool entries by key similarity to the query; ascending-index
    /// tie-break, output sorted by descending similarity then index.
    pub fn select_pool(&self, query: &[f64]) -> Result<Vec<usize>> {
        let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
        let sims: Vec<f64> = if qn <= 1e-12 {
            vec![0.0; self.pool.len()]
        } else {
            self.pool
                .iter()
                .map(|e| cosine_similarity(query, e.key.data()))
                .collect::<Result<Vec<_>>>()?
        };
        let mut order: Vec<usize> = (0..sims.len()).collect();
        order.sort_by(|&a, &b| {
            sims[b]
                .partial_cmp(&sims[a])
                .expect("finite similarities")
                .then(a.cmp(&b))
        });
        order.truncate(self.pool_select);
        Ok(order)
    }

    /// Named parameters (prompt rows; pool keys stay fixed buffers).
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match self.mode {
            PromptMode::None => {}
            PromptMode::VptShallow | PromptMode::VptDeep => {
                for (l, m) in self.layer_prompts.iter().enumerate() {
                    out.push((format!("tokprompt.l{l}"), m));
                }
            }
            PromptMode::PoolShallow | PromptMode::PoolDeep => {
                for (i, e) in self.pool.iter().enumerate() {
                    for (l, m) in e.prompts.iter().enumerate() {
                        out.push((format!("tokpool.e{i:03}.l{l}"), m));
                    }
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        match self.mode {
            PromptMode::None => {}
            PromptMode::VptShallow | PromptMode::VptDeep => {
                for (l, m) in self.layer_prompts.iter_mut().enumerate() {
                    out.push((format!("tokprompt.l{l}"), m));
                }
            }
            PromptMode::PoolShallow | PromptMode::PoolDeep => {
                for (i, e) in self.pool.iter_mut().enumerate() {
                    for (l, m) in e.prompts.iter_mut().enumerate() {
                        out.push((format!("tokpool.e{i:03}.l{l}"), m));
                    }
                }
            }
        }
        out
    }
}

/// Rows to insert ahead of the patch tokens, already on the tape.
enum LayerRows {
    None,
    /// insert at layer 0, keep thereafter
    Shallow(Var),
    /// fresh rows at every layer, removed after each layer
    Deep(Vec<Var>),
}

/// Everything a forward pass leaves behind.
pub struct ForwardArtifacts {
    /// [B, T_out, d_model], class token at index 0
    pub tokens: Var,
    /// per-layer attention probabilities [B, heads, T_l, T_l]
    pub attn: Vec<Var>,
    /// prompt rows inserted at each layer's input
    pub inserted: Vec<usize>,
}

/// Plain (non-tape) forward result.
pub struct EvalForward {
    pub tokens: Tensor,
    pub attn: Vec<Tensor>,
    pub inserted: Vec<usize>,
}

/// The transformer.
#[derive(Debug, Clone)]
pub struct ToyViT {
    pub cfg: ViTConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls: Tensor,
    /// sinusoidal table, fixed buffer (settable in tests)
    pub pos: Tensor,
    pub layers: Vec<LayerWeights>,
    pub frozen: bool,
}

/// Standard sinusoidal table for `n` positions and dimension `d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for p in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, d], data).expect("finite table")
}

impl ToyViT {
    /// Random init for images of `img_h` x `img_w`.
    pub fn init(cfg: ViTConfig, img_h: usize, img_w: usize, rng: &mut Rng) -> Result<Self> {
        if img_h % cfg.patch_size != 0 || img_w % cfg.patch_size != 0 {
            return Err(LgspError::InvalidArgument(format!(
                "image {img_h}x{img_w} not divisible by patch {}",
                cfg.patch_size
            )));
        }
        if cfg.d_model % cfg.n_heads != 0 {
            return Err(LgspError::InvalidArgument(format!(
                "d_model {} not divisible by heads {}",
                cfg.d_model, cfg.n_heads
            )));
        }
        let n_patches = (img_h / cfg.patch_size) * (img_w / cfg.patch_size);
        let in_dim = cfg.c_in * cfg.patch_size * cfg.patch_size;
        let s = (1.0 / in_dim as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights::init(cfg.d_model, cfg.mlp_hidden, rng))
            .collect();
        Ok(Self {
            patch_w: Tensor::randn(&[in_dim, cfg.d_model], rng).scale(s),
            patch_b: Tensor::zeros(&[cfg.d_model]),
            cls: Tensor::randn(&[cfg.d_model], rng).scale(0.02),
            pos: sinusoidal_positions(n_patches, cfg.d_model),
            layers,
            cfg,
            frozen: false,
        })
    }

    /// All-zero weights and positional table; degenerate network for tests.
    pub fn zeroed(cfg: ViTConfig, img_h: usize, img_w: usize) -> Result<Self> {
        let mut v = Self::init(cfg, img_h, img_w, &mut Rng::new(0))?;
        let zero_like = |t: &Tensor| Tensor::zeros(t.shape());
        v.patch_w = zero_like(&v.patch_w);
        v.patch_b = zero_like(&v.patch_b);
        v.cls = zero_like(&v.cls);
        v.pos = zero_like(&v.pos);
        for l in v.layers.iter_mut() {
            *l = LayerWeights::zeroed(v.cfg.d_model, v.cfg.mlp_hidden);
        }
        Ok(v)
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("backbone.patch.w".to_string(), &self.patch_w),
            ("backbone.patch.b".to_string(), &self.patch_b),
            ("backbone.cls".to_string(), &self.cls),
        ];
        for (l, lw) in self.layers.iter().enumerate() {
            out.push((format!("backbone.l{l}.wq"), &lw.wq));
            out.push((format!("backbone.l{l}.bq"), &lw.bq));
            out.push((format!("backbone.l{l}.wk"), &lw.wk));
            out.push((format!("backbone.l{l}.bk"), &lw.bk));
            out.push((format!("backbone.l{l}.wv"), &lw.wv));
            out.push((format!("backbone.l{l}.bv"), &lw.bv));
            out.push((format!("backbone.l{l}.wo"), &lw.wo));
            out.push((format!("backbone.l{l}.bo"), &lw.bo));
            out.push((format!("backbone.l{l}.mlp.w1"), &lw.w1));
            out.push((format!("backbone.l{l}.mlp.b1"), &lw.b1));
            out.push((format!("backbone.l{l}.mlp.w2"), &lw.w2));
            out.push((format!("backbone.l{l}.mlp.b2"), &lw.b2));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("backbone.patch.w".to_string(), &mut self.patch_w),
            ("backbone.patch.b".to_string(), &mut self.patch_b),
            ("backbone.cls".to_string(), &mut self.cls),
        ];
        for (l, lw) in self.layers.iter_mut().enumerate() {
            out.push((format!("backbone.l{l}.wq"), &mut lw.wq));
            out.push((format!("backbone.l{l}.bq"), &mut lw.bq));
            out.push((format!("backbone.l{l}.wk"), &mut lw.wk));
            out.push((format!("backbone.l{l}.bk"), &mut lw.bk));
            out.push((format!("backbone.l{l}.wv"), &mut lw.wv));
            out.push((format!("backbone.l{l}.bv"), &mut lw.bv));
            out.push((format!("backbone.l{l}.wo"), &mut lw.wo));
            out.push((format!("backbone.l{l}.bo"), &mut lw.bo));
            out.push((format!("backbone.l{l}.mlp.w1"), &mut lw.w1));
            out.push((format!("backbone.l{l}.mlp.b1"), &mut lw.b1));
            out.push((format!("backbone.l{l}.mlp.w2"), &mut lw.w2));
            out.push((format!("backbone.l{l}.mlp.b2"), &mut lw.b2));
        }
        out
    }

    /// FNV-1a over parameter names and raw bits; detects any drift.
    pub fn param_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        for (name, t) in self.params() {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.to_le_bits_bytes());
            }
        }
        h
    }

    fn rows_for(
        &self,
        tape: &mut Tape,
        prompts: &TokenPrompts,
        query: Option<&[f64]>,
    ) -> Result<LayerRows> {
        match prompts.mode {
            PromptMode::None => Ok(LayerRows::None),
            PromptMode::VptShallow | PromptMode::VptDeep => {
                if prompts.layer_prompts.is_empty() {
                    return Ok(LayerRows::None);
                }
                if prompts.mode == PromptMode::VptShallow {
                    let v = tape.param("tokprompt.l0", &prompts.layer_prompts[0]);
                    Ok(LayerRows::Shallow(v))
                } else {
                    if prompts.layer_prompts.len() != self.cfg.n_layers {
                        return Err(LgspError::InvalidArgument(format!(
                            "deep prompts need {} layer matrices, got {}",
                            self.cfg.n_layers,
                            prompts.layer_prompts.len()
                        )));
                    }
                    let vars = prompts
                        .layer_prompts
                        .iter()
                        .enumerate()
                        .map(|(l, m)| tape.param(&format!("tokprompt.l{l}"), m))
                        .collect();
                    Ok(LayerRows::Deep(vars))
                }
            }
            PromptMode::PoolShallow | PromptMode::PoolDeep => {
                if prompts.pool.is_empty() || prompts.pool_select == 0 {
                    return Ok(LayerRows::None);
                }
                let query = query.ok_or_else(|| {
                    LgspError::InvalidArgument("pool prompt modes need a selection query".into())
                })?;
                let selected = prompts.select_pool(query)?;
                let d = self.cfg.d_model;
                let stack_layer = |tape: &mut Tape, l: usize| -> Result<Var> {
                    let mut rows = Vec::new();
                    for &i in &selected {
                        let p = tape.param(
                            &format!("tokpool.e{i:03}.l{l}"),
                            &prompts.pool[i].prompts[l],
                        );
                        rows.push(tape.reshape(p, vec![1, 1, d])?);
                    }
                    let cat = tape.concat_tokens(&rows)?;
                    tape.reshape(cat, vec![selected.len(), d])
                };
                if prompts.mode == PromptMode::PoolShallow {
                    Ok(LayerRows::Shallow(stack_layer(tape, 0)?))
                } else {
                    let vars = (0..self.cfg.n_layers)
                        .map(|l| stack_layer(tape, l))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(LayerRows::Deep(vars))
                }
            }
        }
    }

    /// Records the full forward on `tape`. Pool prompt modes need `query`
    /// (the prompt-free class-token feature of the same input) for entry
    /// selection. `training` is accepted for interface symmetry; the toy
    /// backbone has no stochastic layers.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        prompts: &TokenPrompts,
        _training: bool,
        query: Option<&[f64]>,
    ) -> Result<ForwardArtifacts> {
        let shape = tape.value(x).shape().to_vec();
        let [b, _, h, w] = match *shape.as_slice() {
            [b, c, h, w] => [b, c, h, w],
            _ => {
                return Err(LgspError::ShapeMismatch {
                    expected: vec![0, 0, 0, 0],
                    got: shape,
                })
            }
        };
        let ps = self.cfg.patch_size;
        if h % ps != 0 || w % ps != 0 {
            return Err(LgspError::InvalidArgument(format!(
                "image {h}x{w} not divisible by patch {ps}"
            )));
        }
        let n_patches = (h / ps) * (w / ps);
        if self.pos.shape()[0] != n_patches {
            return Err(LgspError::ShapeMismatch {
                expected: vec![self.pos.shape()[0], self.cfg.d_model],
                got: vec![n_patches, self.cfg.d_model],
            });
        }
        let d = self.cfg.d_model;

        let rows = self.rows_for(tape, prompts, query)?;

        // patch embedding + positions
        let patches = tape.extract_patches(x, ps)?;
        let pw = tape.param("backbone.patch.w", &self.patch_w);
        let pb = tape.param("backbone.patch.b", &self.patch_b);
        let pt = tape.linear_last(patches, pw, Some(pb))?;
        let pos = tape.constant(self.pos.clone());
        let pos_b = tape.broadcast_rows(pos, b)?;
        let pt = tape.add(pt, pos_b)?;

        // class token
        let cls = tape.param("backbone.cls", &self.cls);
        let cls_row = tape.reshape(cls, vec![1, d])?;
        let cls_b = tape.broadcast_rows(cls_row, b)?;

        let mut current = tape.concat_tokens(&[cls_b, pt])?;
        let mut attn = Vec::with_capacity(self.cfg.n_layers);
        let mut inserted = Vec::with_capacity(self.cfg.n_layers);

        for l in 0..self.cfg.n_layers {
            let (input_tokens, n_rows) = match &rows {
                LayerRows::None => (current, 0),
                LayerRows::Shallow(r) => {
                    if l == 0 {
                        let p = tape.value(*r).shape()[0];
                        (self.insert_rows(tape, current, *r, b)?, p)
                    } else {
                        // rows flowed through layer 0 and are ordinary
                        // tokens now; count them for indexing
                        (current, inserted[0])
                    }
                }
                LayerRows::Deep(rs) => {
                    let p = tape.value(rs[l]).shape()[0];
                    (self.insert_rows(tape, current, rs[l], b)?, p)
                }
            };
            inserted.push(n_rows);

            let (out, probs) = self.layer_forward(tape, l, input_tokens)?;
            attn.push(probs);

            current = match &rows {
                LayerRows::Deep(_) if n_rows > 0 => {
                    // drop the prompt rows: keep cls + everything after them
                    let total = tape.value(out).shape()[1];
                    let cls_part = tape.slice_tokens(out, 0, 1)?;
                    let rest = tape.slice_tokens(out, 1 + n_rows, total - 1 - n_rows)?;
                    tape.concat_tokens(&[cls_part, rest])?
                }
                _ => out,
            };
        }

        Ok(ForwardArtifacts {
            tokens: current,
            attn,
            inserted,
        })
    }

    fn insert_rows(&self, tape: &mut Tape, tokens: Var, rows: Var, batch: usize) -> Result<Var> {
        let total = tape.value(tokens).shape()[1];
        let cls_part = tape.slice_tokens(tokens, 0, 1)?;
        let rest = tape.slice_tokens(tokens, 1, total - 1)?;
        let rows_b = tape.broadcast_rows(rows, batch)?;
        tape.concat_tokens(&[cls_part, rows_b, rest])
    }

    fn layer_forward(&self, tape: &mut Tape, l: usize, x: Var) -> Result<(Var, Var)> {
        let lw = &self.layers[l];
        let heads = self.cfg.n_heads;
        let dh = self.cfg.d_model / heads;

        let wq = tape.param(&format!("backbone.l{l}.wq"), &lw.wq);
        let bq = tape.param(&format!("backbone.l{l}.bq"), &lw.bq);
        let wk = tape.param(&format!("backbone.l{l}.wk"), &lw.wk);
        let bk = tape.param(&format!("backbone.l{l}.bk"), &lw.bk);
        let wv = tape.param(&format!("backbone.l{l}.wv"), &lw.wv);
        let bv = tape.param(&format!("backbone.l{l}.bv"), &lw.bv);
        let wo = tape.param(&format!("backbone.l{l}.wo"), &lw.wo);
        let bo = tape.param(&format!("backbone.l{l}.bo"), &lw.bo);

        let q = tape.linear_last(x, wq, Some(bq))?;
        let k = tape.linear_last(x, wk, Some(bk))?;
        let v = tape.linear_last(x, wv, Some(bv))?;
        let qh = tape.split_heads(q, heads)?;
        let kh = tape.split_heads(k, heads)?;
        let vh = tape.split_heads(v, heads)?;
        let scores = tape.bmm(qh, kh, true)?;
        let scaled = tape.scale_const(scores, 1.0 / (dh as f64).sqrt());
        let probs = tape.softmax_last(scaled)?;
        let ctx = tape.bmm(probs, vh, false)?;
        let merged = tape.merge_heads(ctx)?;
        let proj = tape.linear_last(merged, wo, Some(bo))?;
        let x1 = tape.add(x, proj)?;

        let w1 = tape.param(&format!("backbone.l{l}.mlp.w1"), &lw.w1);
        let b1 = tape.param(&format!("backbone.l{l}.mlp.b1"), &lw.b1);
        let w2 = tape.param(&format!("backbone.l{l}.mlp.w2"), &lw.w2);
        let b2 = tape.param(&format!("backbone.l{l}.mlp.b2"), &lw.b2);
        let hmid = tape.linear_last(x1, w1, Some(b1))?;
        let hact = tape.relu(hmid);
        let m = tape.linear_last(hact, w2, Some(b2))?;
        let x2 = tape.add(x1, m)?;
        Ok((x2, probs))
    }

    /// Convenience eval forward (fresh tape, values extracted).
    pub fn forward(
        &self,
        x: &Tensor,
        prompts: &TokenPrompts,
        training: bool,
        query: Option<&[f64]>,
    ) -> Result<EvalForward> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let art = self.forward_on_tape(&mut tape, xv, prompts, training, query)?;
        Ok(EvalForward {
            tokens: tape.value(art.tokens).clone(),
            attn: art.attn.iter().map(|&a| tape.value(a).clone()).collect(),
            inserted: art.inserted,
        })
    }

    /// Head-averaged attention of `query_token` over the patch positions at
    /// `layer`, renormalized to sum 1 and shaped to the patch grid.
    ///
    /// `query_token` indexes the layer input: 0 is the class token, 1..=p
    /// are that layer's prompt rows.
    pub fn attention_map(
        &self,
        x: &Tensor,
        prompts: &TokenPrompts,
        layer: usize,
        query_token: usize,
        query: Option<&[f64]>,
    ) -> Result<(usize, usize, Vec<f64>)> {
        if layer >= self.cfg.n_layers {
            return Err(LgspError::IndexOutOfRange(format!(
                "layer {layer} of {}",
                self.cfg.n_layers
            )));
        }
        let fwd = self.forward(x, prompts, false, query)?;
        let probs = &fwd.attn[layer];
        let [b, heads, t, _] = match *probs.shape() {
            [b, h, t, t2] if t == t2 => [b, h, t, t2],
            _ => {
                return Err(LgspError::ShapeMismatch {
                    expected: vec![0, 0, 0, 0],
                    got: probs.shape().to_vec(),
                })
            }
        };
        if b != 1 {
            return Err(LgspError::InvalidArgument(
                "attention maps are per single input".into(),
            ));
        }
        let patch_start = 1 + fwd.inserted[layer];
        if query_token >= patch_start {
            return Err(LgspError::IndexOutOfRange(format!(
                "query token {query_token} is not the class token or a prompt row (< {patch_start})"
            )));
        }
        let n_patches = t - patch_start;
        let grid = (n_patches as f64).sqrt() as usize;
        let mut row = vec![0.0; n_patches];
        for h in 0..heads {
            for p in 0..n_patches {
                row[p] += probs.data()[((h * t) + query_token) * t + patch_start + p];
            }
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok((grid, grid, row))
    }
}

trait F64Bits {
    fn to_le_bits_bytes(&self) -> [u8; 8];
}

impl F64Bits for f64 {
    fn to_le_bits_bytes(&self) -> [u8; 8] {
        self.to_bits().to_le_bytes()
    }
}
