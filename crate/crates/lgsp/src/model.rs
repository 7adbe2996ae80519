//! The assembled trainable model: frozen backbone with token prompts, the
//! local prompt pool, the frequency-ring enhancement, residual fusion, and a
//! prototype classifier head, wired for the session loop.
//!
//! Every learnable tensor has a stable dotted name; learning rates resolve
//! per name prefix, which is also how groups freeze (rate zero). The same
//! names address tensors in checkpoints.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::backbone::{PromptMode, TokenPrompts, ToyViT, ViTConfig};
use crate::classifier::{ClassId, PrototypeBank};
use crate::fusion::{ConstraintMode, FusionParams};
use crate::gsp::{FormulaMode, RingBank};
use crate::learn::{cosine_lr, CosineSchedule, SgdMomentum, Tape, Var};
use crate::lsp::{generate_prompt_on_tape, PoolConfig, PromptPool, QueryProjection, SelectionMode};
use crate::protocol::{EpochLog, FscilModel, LeakageGuard, Sample, SessionData};
use crate::tensor::{Rng, Tensor};
use crate::{LgspError, Result};

/// Which branches are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    /// backbone + VPT token prompts only
    VptOnly,
    /// VPT + local spatial prompt pool
    VptLsp,
    /// VPT + frequency-ring enhancement
    VptGsp,
    /// the full model: VPT + LSP + GSP + fusion
    Lgsp,
    /// backbone + token prompt pool (the saturation-study apparatus)
    TokenPool,
}

impl std::str::FromStr for ModelVariant {
    type Err = LgspError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vpt_only" => Ok(ModelVariant::VptOnly),
            "vpt_lsp" => Ok(ModelVariant::VptLsp),
            "vpt_gsp" => Ok(ModelVariant::VptGsp),
            "lgsp" => Ok(ModelVariant::Lgsp),
            "token_pool" => Ok(ModelVariant::TokenPool),
            other => Err(LgspError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelVariant::VptOnly => "vpt_only",
            ModelVariant::VptLsp => "vpt_lsp",
            ModelVariant::VptGsp => "vpt_gsp",
            ModelVariant::Lgsp => "lgsp",
            ModelVariant::TokenPool => "token_pool",
        };
        write!(f, "{s}")
    }
}

/// Which groups receive novel-session gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// classifier + ring weights + pool keys; generators, projection, VPT
    /// rows and fusion stay at their base-session values
    Default,
    /// everything except the frozen backbone
    Wide,
}

impl std::str::FromStr for TrainScope {
    type Err = LgspError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(TrainScope::Default),
            "wide" => Ok(TrainScope::Wide),
            other => Err(LgspError::Config(format!("unknown scope {other:?}"))),
        }
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainHyper {
    pub base_epochs: usize,
    pub base_lr: f64,
    pub novel_epochs: usize,
    pub novel_lr: f64,
    pub lsp_lr: f64,
    pub gsp_lr_base: f64,
    pub gsp_lr_novel: f64,
    pub fusion_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub logit_scale: f64,
    pub scope: TrainScope,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            base_epochs: 16,
            base_lr: 0.02,
            novel_epochs: 5,
            novel_lr: 0.002,
            lsp_lr: 0.001,
            gsp_lr_base: 0.1,
            gsp_lr_novel: 0.005,
            fusion_lr: 0.005,
            momentum: 0.9,
            batch_size: 8,
            logit_scale: 16.0,
            scope: TrainScope::Default,
        }
    }
}

/// Everything needed to build a model.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub vit: ViTConfig,
    pub img_h: usize,
    pub img_w: usize,
    pub vpt_len: usize,
    pub token_pool_size: usize,
    /// 0 means "select the whole pool"
    pub token_pool_select: usize,
    pub lsp_pool_size: usize,
    pub lsp_n_select: usize,
    pub lsp_temperature: f64,
    pub lsp_selection: SelectionMode,
    pub lsp_c_hidden: usize,
    pub lsp_dropout: f64,
    pub lsp_kernel_set: Vec<usize>,
    pub gsp_rings: usize,
    pub gsp_beta: f64,
    pub gsp_tau: f64,
    pub gsp_mode: FormulaMode,
    pub fusion_mode: ConstraintMode,
    pub fusion_init: f64,
    pub train: TrainHyper,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: ModelVariant::Lgsp,
            vit: ViTConfig::default(),
            img_h: 32,
            img_w: 32,
            vpt_len: 5,
            token_pool_size: 8,
            token_pool_select: 0,
            lsp_pool_size: 30,
            lsp_n_select: 5,
            lsp_temperature: 0.1,
            lsp_selection: SelectionMode::Hard,
            lsp_c_hidden: 8,
            lsp_dropout: 0.1,
            lsp_kernel_set: vec![1, 3, 5, 7],
            gsp_rings: 8,
            gsp_beta: 10.0,
            gsp_tau: 1.0,
            gsp_mode: FormulaMode::Annulus,
            fusion_mode: ConstraintMode::Independent,
            fusion_init: 0.5,
            train: TrainHyper::default(),
            seed: 42,
        }
    }
}

/// The model. Construction is a pure function of the config.
pub struct LgspModel {
    pub cfg: ModelConfig,
    pub backbone: ToyViT,
    pub token_prompts: TokenPrompts,
    pub lsp_pool: PromptPool,
    pub query_proj: QueryProjection,
    pub gsp_bank: Arc<RingBank>,
    /// live ring weights (the bank keeps the init snapshot)
    pub gsp_weights: Tensor,
    pub fusion: FusionParams,
    pub bank: PrototypeBank,
    /// fixes the hard-selection index set (gradient checks hold the
    /// discrete choice constant while parameters are perturbed)
    pub selection_override: Option<Vec<usize>>,
    optimizer: SgdMomentum,
    /// class-token features of raw inputs under the frozen prompt-free
    /// backbone, keyed by sample id
    query_cache: RefCell<BTreeMap<usize, Vec<f64>>>,
}

impl LgspModel {
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        let root = Rng::new(cfg.seed);
        let mut rng_backbone = root.derive(1);
        let mut rng_tokens = root.derive(2);
        let mut rng_lsp = root.derive(3);
        let mut rng_gsp = root.derive(4);
        let mut rng_proj = root.derive(5);

        let backbone = ToyViT::init(cfg.vit.clone(), cfg.img_h, cfg.img_w, &mut rng_backbone)?;

        let token_prompts = match cfg.variant {
            ModelVariant::TokenPool => {
                let select = if cfg.token_pool_select == 0 {
                    cfg.token_pool_size
                } else {
                    cfg.token_pool_select
                };
                TokenPrompts::pool(
                    PromptMode::PoolDeep,
                    cfg.token_pool_size,
                    select,
                    cfg.vit.n_layers,
                    cfg.vit.d_model,
                    &mut rng_tokens,
                )?
            }
            _ => TokenPrompts::vpt(
                PromptMode::VptDeep,
                cfg.vpt_len,
                cfg.vit.n_layers,
                cfg.vit.d_model,
                &mut rng_tokens,
            )?,
        };

        let lsp_pool = PromptPool::init(
            &PoolConfig {
                pool_size: cfg.lsp_pool_size,
                n_select: cfg.lsp_n_select,
                temperature: cfg.lsp_temperature,
                selection_mode: cfg.lsp_selection,
                c_in: cfg.vit.c_in,
                c_hidden: cfg.lsp_c_hidden,
                d_key: cfg.vit.d_model,
                dropout_rate: cfg.lsp_dropout,
                kernel_set: cfg.lsp_kernel_set.clone(),
            },
            &mut rng_lsp,
        )?;

        let gsp_bank = Arc::new(RingBank::new(
            cfg.img_h,
            cfg.img_w,
            cfg.gsp_rings,
            cfg.gsp_beta,
            cfg.gsp_tau,
            cfg.gsp_mode,
            &mut rng_gsp,
        )?);
        let gsp_weights = Tensor::new(vec![cfg.gsp_rings], gsp_bank.weights.clone())?;

        let query_proj = QueryProjection::init(cfg.vit.d_model, cfg.vit.d_model, &mut rng_proj);
        let fusion = FusionParams::new(cfg.fusion_init, cfg.fusion_init, cfg.fusion_mode);
        let momentum = cfg.train.momentum;

        Ok(Self {
            cfg,
            backbone,
            token_prompts,
            lsp_pool,
            query_proj,
            gsp_bank,
            gsp_weights,
            fusion,
            bank: PrototypeBank::new(),
            selection_override: None,
            optimizer: SgdMomentum::new(momentum),
            query_cache: RefCell::new(BTreeMap::new()),
        })
    }

    fn uses_lsp(&self) -> bool {
        matches!(self.cfg.variant, ModelVariant::VptLsp | ModelVariant::Lgsp)
    }

    fn uses_gsp(&self) -> bool {
        matches!(self.cfg.variant, ModelVariant::VptGsp | ModelVariant::Lgsp)
    }

    /// Class-token feature of the raw input under the frozen backbone with
    /// no prompts; cached per sample id.
    fn raw_feature(&self, sample: &Sample) -> Result<Vec<f64>> {
        if let Some(f) = self.query_cache.borrow().get(&sample.id) {
            return Ok(f.clone());
        }
        let fwd = self
            .backbone
            .forward(&sample.data, &TokenPrompts::none(), false, None)?;
        let d = self.cfg.vit.d_model;
        let feat = fwd.tokens.data()[..d].to_vec();
        self.query_cache.borrow_mut().insert(sample.id, feat.clone());
        Ok(feat)
    }

    /// Builds the full forward for one sample on the tape, returning the
    /// class-token feature node [1, d_model].
    fn feature_on_tape(
        &self,
        tape: &mut Tape,
        sample: &Sample,
        training: bool,
        dropout_rng: &mut Rng,
    ) -> Result<Var> {
        let d = self.cfg.vit.d_model;
        let x = tape.constant(sample.data.clone());
        let raw_feat = self.raw_feature(sample)?;

        // local branch
        let p_local = if self.uses_lsp() {
            let feat = tape.constant(Tensor::new(vec![1, d], raw_feat.clone())?);
            let gw = tape.param("lsp.g.w", &self.query_proj.w);
            let gb = tape.param("lsp.g.b", &self.query_proj.b);
            let q2 = tape.linear_last(feat, gw, Some(gb))?;
            let q = tape.reshape(q2, vec![d])?;
            let q_now = tape.value(q).data().to_vec();
            let q_norm = q_now.iter().map(|v| v * v).sum::<f64>().sqrt();

            let (indices, weights_var) = if q_norm <= 1e-12 {
                // degenerate query: deterministic tie-break, uniform weights,
                // no gradient into keys
                let idx: Vec<usize> = match self.lsp_pool.selection_mode {
                    SelectionMode::Hard => (0..self.lsp_pool.n_select).collect(),
                    SelectionMode::Soft => (0..self.lsp_pool.len()).collect(),
                };
                let w = tape.constant(Tensor::new(
                    vec![idx.len()],
                    vec![1.0 / idx.len() as f64; idx.len()],
                )?);
                (idx, w)
            } else {
                let idx: Vec<usize> = match (&self.selection_override, self.lsp_pool.selection_mode)
                {
                    (Some(fixed), SelectionMode::Hard) => fixed.clone(),
                    (_, SelectionMode::Hard) => crate::lsp::select_topk(&q_now, &self.lsp_pool)?,
                    (_, SelectionMode::Soft) => (0..self.lsp_pool.len()).collect(),
                };
                let mut sims = Vec::with_capacity(idx.len());
                for &i in &idx {
                    let key = tape.param(
                        &format!("lsp.e{i:03}.key"),
                        &self.lsp_pool.entries[i].key,
                    );
                    sims.push(tape.cosine_sim(q, key)?);
                }
                let stacked = tape.stack_scalars(&sims)?;
                let scaled = tape.scale_const(stacked, 1.0 / self.lsp_pool.temperature);
                let w = tape.softmax_last(scaled)?;
                (idx, w)
            };

            let mut acc: Option<Var> = None;
            for (j, &i) in indices.iter().enumerate() {
                let prompt = generate_prompt_on_tape(
                    tape,
                    &format!("lsp.e{i:03}"),
                    &self.lsp_pool.entries[i],
                    x,
                    training,
                    dropout_rng,
                )?;
                let wj = tape.index_scalar(weights_var, j)?;
                let term = tape.scale_var(prompt, wj)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            acc
        } else {
            None
        };

        // global branch
        let x_global = if self.uses_gsp() {
            let w = tape.param("gsp.w", &self.gsp_weights);
            Some(tape.spectral_enhance(x, w, &self.gsp_bank)?)
        } else {
            None
        };

        // fusion: x + alpha_l * p_local + alpha_g * x_global
        let mut x_final = x;
        if let Some(p) = p_local {
            let al = tape.param("fusion.alpha_l", &self.fusion.alpha_l);
            let term = tape.scale_var(p, al)?;
            x_final = tape.add(x_final, term)?;
        }
        if let Some(g) = x_global {
            let ag = match self.fusion.constraint_mode {
                ConstraintMode::Independent => {
                    tape.param("fusion.alpha_g", self.fusion.alpha_g_param())
                }
                ConstraintMode::FixedSum => {
                    let al = tape.param("fusion.alpha_l", &self.fusion.alpha_l);
                    let one = tape.constant(Tensor::new(vec![1], vec![1.0])?);
                    tape.sub(one, al)?
                }
            };
            let term = tape.scale_var(g, ag)?;
            x_final = tape.add(x_final, term)?;
        }

        // backbone with token prompts
        let query = match self.token_prompts.mode {
            PromptMode::PoolShallow | PromptMode::PoolDeep => Some(raw_feat),
            _ => None,
        };
        let art = self.backbone.forward_on_tape(
            tape,
            x_final,
            &self.token_prompts,
            training,
            query.as_deref(),
        )?;
        let cls3 = tape.slice_tokens(art.tokens, 0, 1)?;
        tape.reshape(cls3, vec![1, d])
    }

    /// Class-token feature of the raw input under the frozen prompt-free
    /// backbone (the selection query source).
    pub fn eval_raw_feature(&self, sample: &Sample) -> Result<Vec<f64>> {
        self.raw_feature(sample)
    }

    /// The LSP selection query: the projected raw class-token feature.
    pub fn eval_query(&self, sample: &Sample) -> Result<Vec<f64>> {
        let feat = self.raw_feature(sample)?;
        let d = self.cfg.vit.d_model;
        let fmat = Tensor::new(vec![1, 1, d], feat)?;
        let q = crate::lsp::query_key(&self.query_proj, &fmat)?;
        Ok(q.data().to_vec())
    }

    /// Full-model class-token feature (evaluation mode).
    pub fn eval_feature(&self, sample: &Sample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut rng = Rng::new(0); // unused: training=false
        let f = self.feature_on_tape(&mut tape, sample, false, &mut rng)?;
        Ok(tape.value(f).data().to_vec())
    }

    /// Records the evaluation forward on an external tape (the gradient
    /// checker differentiates through this path).
    pub fn feature_for_check(
        &self,
        tape: &mut Tape,
        sample: &Sample,
        rng: &mut Rng,
    ) -> Result<Var> {
        self.feature_on_tape(tape, sample, false, rng)
    }

    /// Tape node of the stacked prototype matrix, exposed for the checker.
    pub fn prototypes_for_check(&self, tape: &mut Tape) -> Result<(Vec<ClassId>, Var)> {
        self.prototypes_on_tape(tape)
    }

    /// Stacks per-class prototype parameters into a [C, d] node; returns the
    /// class order alongside.
    fn prototypes_on_tape(&self, tape: &mut Tape) -> Result<(Vec<ClassId>, Var)> {
        let classes = self.bank.classes();
        if classes.is_empty() {
            return Err(LgspError::EmptyInput("prototype bank".into()));
        }
        let d = self.cfg.vit.d_model;
        let mut rows = Vec::with_capacity(classes.len());
        for &c in &classes {
            let p = tape.param(
                &format!("classifier.c{c:06}"),
                self.bank.prototype(c).expect("listed class"),
            );
            rows.push(tape.reshape(p, vec![1, 1, d])?);
        }
        let cat = tape.concat_tokens(&rows)?;
        let m = tape.reshape(cat, vec![classes.len(), d])?;
        Ok((classes, m))
    }

    /// Learning rate for a parameter at `step` of a session.
    fn lr_for(&self, name: &str, session: usize, step: usize, total: usize) -> f64 {
        let t = &self.cfg.train;
        let base = session == 0;
        let main = if base { t.base_lr } else { t.novel_lr };
        let wide = t.scope == TrainScope::Wide;
        let group = if name.starts_with("backbone.") {
            if self.backbone.frozen {
                0.0
            } else {
                main
            }
        } else if name.starts_with("tokpool.") {
            // the token-pool apparatus trains in every session
            main
        } else if name.starts_with("tokprompt.") {
            if base || wide {
                main
            } else {
                0.0
            }
        } else if name.starts_with("classifier.") {
            main
        } else if name.starts_with("gsp.") {
            if base {
                t.gsp_lr_base
            } else {
                t.gsp_lr_novel
            }
        } else if name.starts_with("fusion.") {
            if base {
                t.fusion_lr
            } else if wide {
                t.fusion_lr
            } else {
                0.0
            }
        } else if name.ends_with(".key") {
            t.lsp_lr
        } else if name.starts_with("lsp.") {
            // generators and the query projection
            if base || wide {
                t.lsp_lr
            } else {
                0.0
            }
        } else {
            0.0
        };
        if group == 0.0 {
            return 0.0;
        }
        cosine_lr(
            step,
            CosineSchedule {
                base_lr: group,
                total_steps: total.max(1),
            },
        )
        .unwrap_or(0.0)
    }

    /// Every learnable tensor by name.
    pub fn all_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.backbone.params_mut();
        out.extend(self.token_prompts.params_mut());
        for (i, e) in self.lsp_pool.entries.iter_mut().enumerate() {
            out.push((format!("lsp.e{i:03}.conv1.w"), &mut e.conv1_w));
            out.push((format!("lsp.e{i:03}.conv1.b"), &mut e.conv1_b));
            out.push((format!("lsp.e{i:03}.conv2.w"), &mut e.conv2_w));
            out.push((format!("lsp.e{i:03}.conv2.b"), &mut e.conv2_b));
            out.push((format!("lsp.e{i:03}.key"), &mut e.key));
        }
        out.push(("lsp.g.w".into(), &mut self.query_proj.w));
        out.push(("lsp.g.b".into(), &mut self.query_proj.b));
        out.push(("gsp.w".into(), &mut self.gsp_weights));
        let fixed_sum = self.fusion.constraint_mode == ConstraintMode::FixedSum;
        let (al, ag) = self.fusion.split_mut();
        out.push(("fusion.alpha_l".into(), al));
        if !fixed_sum {
            out.push(("fusion.alpha_g".into(), ag));
        }
        for (c, p) in self.bank.entries_mut() {
            out.push((format!("classifier.c{c:06}"), p));
        }
        out
    }

    pub fn all_params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .backbone
            .params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        out.extend(
            self.token_prompts
                .params()
                .into_iter()
                .map(|(n, t)| (n, t.clone())),
        );
        for (i, e) in self.lsp_pool.entries.iter().enumerate() {
            out.push((format!("lsp.e{i:03}.conv1.w"), e.conv1_w.clone()));
            out.push((format!("lsp.e{i:03}.conv1.b"), e.conv1_b.clone()));
            out.push((format!("lsp.e{i:03}.conv2.w"), e.conv2_w.clone()));
            out.push((format!("lsp.e{i:03}.conv2.b"), e.conv2_b.clone()));
            out.push((format!("lsp.e{i:03}.key"), e.key.clone()));
        }
        out.push(("lsp.g.w".into(), self.query_proj.w.clone()));
        out.push(("lsp.g.b".into(), self.query_proj.b.clone()));
        out.push(("gsp.w".into(), self.gsp_weights.clone()));
        out.push(("fusion.alpha_l".into(), self.fusion.alpha_l.clone()));
        if self.fusion.constraint_mode != ConstraintMode::FixedSum {
            out.push(("fusion.alpha_g".into(), self.fusion.alpha_g_param().clone()));
        }
        for c in self.bank.classes() {
            out.push((
                format!("classifier.c{c:06}"),
                self.bank.prototype(c).unwrap().clone(),
            ));
        }
        out
    }

    /// Loads a named tensor produced by [`Self::all_params`]. Classifier
    /// entries create their class slot on demand.
    pub fn load_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        if let Some(rest) = name.strip_prefix("classifier.c") {
            let class: ClassId = rest.parse().map_err(|_| {
                LgspError::Format(format!("bad classifier param name {name:?}"))
            })?;
            self.bank.set_prototype(class, value);
            return Ok(());
        }
        for (n, t) in self.all_params_mut() {
            if n == name {
                if t.shape() != value.shape() {
                    return Err(LgspError::ShapeMismatch {
                        expected: t.shape().to_vec(),
                        got: value.shape().to_vec(),
                    });
                }
                *t = value;
                return Ok(());
            }
        }
        Err(LgspError::Config(format!("unknown parameter {name:?}")))
    }

    /// One gradient step over a batch; returns the loss value.
    fn train_step(
        &mut self,
        batch: &[&Sample],
        session: usize,
        step: usize,
        total_steps: usize,
        dropout_root: &Rng,
    ) -> Result<f64> {
        let d = self.cfg.vit.d_model;
        let mut tape = Tape::new();
        let mut feats = Vec::with_capacity(batch.len());
        for s in batch {
            let mut drng = dropout_root.derive(s.id as u64);
            let f = self.feature_on_tape(&mut tape, s, true, &mut drng)?;
            feats.push(tape.reshape(f, vec![1, 1, d])?);
        }
        let stacked = tape.concat_tokens(&feats)?;
        let fmat = tape.reshape(stacked, vec![batch.len(), d])?;
        let (classes, protos) = self.prototypes_on_tape(&mut tape)?;
        let cos = tape.cosine_rows(fmat, protos)?;
        let logits = tape.scale_const(cos, self.cfg.train.logit_scale);
        let targets: Vec<usize> = batch
            .iter()
            .map(|s| {
                classes
                    .iter()
                    .position(|&c| c == s.class)
                    .ok_or_else(|| {
                        LgspError::Protocol(format!("sample class {} has no prototype", s.class))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = tape.cross_entropy(logits, &targets)?;
        let loss_value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;

        // resolve learning rates before borrowing params mutably
        let lr_table: BTreeMap<String, f64> = self
            .all_params()
            .into_iter()
            .map(|(n, _)| {
                let lr = self.lr_for(&n, session, step, total_steps);
                (n, lr)
            })
            .collect();
        let mut opt = std::mem::replace(&mut self.optimizer, SgdMomentum::new(0.0));
        let params = self.all_params_mut();
        let result = opt.step(params, &grads, |name| {
            lr_table.get(name).copied().unwrap_or(0.0)
        });
        self.optimizer = opt;
        result?;
        Ok(loss_value)
    }
}

impl FscilModel for LgspModel {
    fn begin_session(&mut self, _session: usize, data: &SessionData) -> Result<()> {
        // initial prototypes for the new classes from the current model
        let mut feats = Vec::with_capacity(data.train.len());
        for s in &data.train {
            feats.push((Tensor::from_vec(self.eval_feature(s)?)?, s.class));
        }
        self.bank.fit_prototypes(&feats)?;
        // fresh momentum per session; parameter set changes between sessions
        self.optimizer = SgdMomentum::new(self.cfg.train.momentum);
        Ok(())
    }

    fn train_session(
        &mut self,
        session: usize,
        data: &SessionData,
        guard: &LeakageGuard,
    ) -> Result<Vec<EpochLog>> {
        let epochs = if session == 0 {
            self.cfg.train.base_epochs
        } else {
            self.cfg.train.novel_epochs
        };
        let batch_size = self.cfg.train.batch_size.max(1);
        let n = data.train.len();
        if n == 0 || epochs == 0 {
            return Ok(Vec::new());
        }
        let batches_per_epoch = n.div_ceil(batch_size);
        let total_steps = epochs * batches_per_epoch;
        let session_rng = Rng::new(self.cfg.seed)
            .derive(0x5e55_0000 + session as u64);

        let mut logs = Vec::with_capacity(epochs);
        let mut step = 0usize;
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..n).collect();
            let mut shuffle_rng = session_rng.derive(epoch as u64);
            shuffle_rng.shuffle(&mut order);
            let dropout_root = session_rng.derive(0xd0_0000 + epoch as u64);

            let mut epoch_loss = 0.0;
            let mut last_lr = 0.0;
            for chunk in order.chunks(batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
                for s in &batch {
                    guard.touch(s.id);
                }
                let loss = self.train_step(&batch, session, step, total_steps, &dropout_root)?;
                epoch_loss += loss * batch.len() as f64;
                last_lr = self.lr_for(
                    "classifier.c000000",
                    session,
                    step,
                    total_steps,
                );
                step += 1;
            }
            logs.push(EpochLog {
                epoch,
                loss: epoch_loss / n as f64,
                lr: last_lr,
                alpha_l: self.fusion.alpha_l(),
                alpha_g: self.fusion.alpha_g(),
            });
        }
        Ok(logs)
    }

    fn finish_session(&mut self, _session: usize, data: &SessionData) -> Result<()> {
        // refit the new classes' prototypes as class means under the trained
        // model; earlier classes keep their (possibly gradient-tuned) values
        let mut sums: BTreeMap<ClassId, (Tensor, usize)> = BTreeMap::new();
        for s in &data.train {
            let f = Tensor::from_vec(self.eval_feature(s)?)?;
            match sums.get_mut(&s.class) {
                Some((acc, count)) => {
                    *acc = acc.add(&f)?;
                    *count += 1;
                }
                None => {
                    sums.insert(s.class, (f, 1));
                }
            }
        }
        for (class, (sum, count)) in sums {
            self.bank
                .set_prototype(class, sum.scale(1.0 / count as f64));
        }
        Ok(())
    }

    fn score(&self, sample: &Sample) -> Result<Vec<(ClassId, f64)>> {
        let feat = self.eval_feature(sample)?;
        self.bank.scores(&feat)
    }

    fn alphas(&self) -> (f64, f64) {
        if self.uses_lsp() || self.uses_gsp() {
            (self.fusion.alpha_l(), self.fusion.alpha_g())
        } else {
            (f64::NAN, f64::NAN)
        }
    }
}

/// Fits the backbone on the pretext split with a throwaway linear head and
/// freezes it, standing in for large-scale pretraining.
pub fn pretext_fit(
    backbone: &mut ToyViT,
    items: &[(Tensor, usize)],
    n_classes: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    if items.is_empty() {
        return Err(LgspError::EmptyInput("pretext split".into()));
    }
    let d = backbone.cfg.d_model;
    let mut rng = Rng::new(seed).derive(0x9e7e);
    let mut head_w = Tensor::randn(&[d, n_classes], &mut rng).scale((1.0 / d as f64).sqrt());
    let mut head_b = Tensor::zeros(&[n_classes]);
    let mut opt = SgdMomentum::new(0.9);
    let n = items.len();
    let batches_per_epoch = n.div_ceil(batch_size);
    let total = epochs * batches_per_epoch;
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = Rng::new(seed).derive(0x51ab + epoch as u64);
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            let mut tape = Tape::new();
            let mut feats = Vec::new();
            let mut targets = Vec::new();
            for &i in chunk {
                let (x, class) = &items[i];
                let xv = tape.constant(x.clone());
                let art =
                    backbone.forward_on_tape(&mut tape, xv, &TokenPrompts::none(), true, None)?;
                let cls = tape.slice_tokens(art.tokens, 0, 1)?;
                feats.push(cls);
                targets.push(*class);
            }
            let stacked = tape.concat_tokens(&feats)?;
            let fmat = tape.reshape(stacked, vec![chunk.len(), d])?;
            let wv = tape.param("pretext.head.w", &head_w);
            let bv = tape.param("pretext.head.b", &head_b);
            let logits = tape.linear_last(fmat, wv, Some(bv))?;
            let loss = tape.cross_entropy(logits, &targets)?;
            let grads = tape.backward(loss)?;

            let lr_now = cosine_lr(
                step,
                CosineSchedule {
                    base_lr: lr,
                    total_steps: total.max(1),
                },
            )?;
            let mut params = backbone.params_mut();
            params.push(("pretext.head.w".into(), &mut head_w));
            params.push(("pretext.head.b".into(), &mut head_b));
            opt.step(params, &grads, |_| lr_now)?;
            step += 1;
        }
    }
    backbone.frozen = true;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(variant: ModelVariant) -> ModelConfig {
        ModelConfig {
            variant,
            vit: ViTConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                patch_size: 4,
                mlp_hidden: 16,
                c_in: 1,
            },
            img_h: 8,
            img_w: 8,
            vpt_len: 2,
            token_pool_size: 3,
            token_pool_select: 0,
            lsp_pool_size: 4,
            lsp_n_select: 2,
            lsp_temperature: 0.1,
            lsp_selection: SelectionMode::Hard,
            lsp_c_hidden: 2,
            lsp_dropout: 0.1,
            lsp_kernel_set: vec![1, 3],
            gsp_rings: 4,
            gsp_beta: 10.0,
            gsp_tau: 1.0,
            gsp_mode: FormulaMode::Annulus,
            fusion_mode: ConstraintMode::Independent,
            fusion_init: 0.5,
            train: TrainHyper {
                base_epochs: 2,
                base_lr: 0.02,
                novel_epochs: 1,
                novel_lr: 0.002,
                lsp_lr: 0.001,
                gsp_lr_base: 0.1,
                gsp_lr_novel: 0.005,
                fusion_lr: 0.005,
                momentum: 0.9,
                batch_size: 4,
                logit_scale: 16.0,
                scope: TrainScope::Default,
            },
            seed: 5,
        }
    }

    fn sample(id: usize, class: usize, seed: u64) -> Sample {
        let mut rng = Rng::new(seed);
        Sample {
            id,
            class,
            data: Tensor::randn(&[1, 1, 8, 8], &mut rng),
        }
    }

    fn session(index: usize, classes: &[usize], per_class: usize, seed0: u64) -> SessionData {
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut id = seed0 as usize * 1000;
        for &c in classes {
            for _ in 0..per_class {
                train.push(sample(id, c, id as u64));
                id += 1;
            }
            test.push(sample(id, c, id as u64));
            id += 1;
        }
        SessionData {
            index,
            classes: classes.to_vec(),
            train,
            test,
        }
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let a = LgspModel::init(tiny_config(ModelVariant::Lgsp)).unwrap();
        let b = LgspModel::init(tiny_config(ModelVariant::Lgsp)).unwrap();
        for ((na, ta), (nb, tb)) in a.all_params().iter().zip(b.all_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "param {na}");
        }
    }

    #[test]
    fn full_session_cycle_runs_and_freezes_backbone() {
        use crate::protocol::{run_session, SessionState};
        let mut model = LgspModel::init(tiny_config(ModelVariant::Lgsp)).unwrap();
        model.backbone.frozen = true;
        let checksum = model.backbone.param_checksum();

        let mut state = SessionState::new();
        let base = session(0, &[0, 1], 4, 1);
        let (m0, logs) = run_session(0, &mut state, &mut model, &base, 5).unwrap();
        assert_eq!(logs.len(), 2);
        assert!(m0.acc >= 0.0 && m0.acc <= 1.0);
        assert!(m0.novel_acc.is_nan());

        let novel = session(1, &[2], 2, 2);
        let (m1, _) = run_session(1, &mut state, &mut model, &novel, 5).unwrap();
        assert!(!m1.novel_acc.is_nan());
        assert_eq!(model.backbone.param_checksum(), checksum);
        assert_eq!(model.bank.len(), 3);
    }

    #[test]
    fn every_variant_trains_a_base_session() {
        use crate::protocol::{run_session, SessionState};
        for variant in [
            ModelVariant::VptOnly,
            ModelVariant::VptLsp,
            ModelVariant::VptGsp,
            ModelVariant::Lgsp,
            ModelVariant::TokenPool,
        ] {
            let mut model = LgspModel::init(tiny_config(variant)).unwrap();
            model.backbone.frozen = true;
            let mut state = SessionState::new();
            let base = session(0, &[0, 1], 2, 3);
            let (m, _) = run_session(0, &mut state, &mut model, &base, 5)
                .unwrap_or_else(|e| panic!("{variant}: {e}"));
            assert!(m.acc.is_finite(), "{variant}");
        }
    }

    #[test]
    fn fixed_sum_mode_preserves_unit_sum_across_steps() {
        use crate::protocol::{run_session, SessionState};
        let mut cfg = tiny_config(ModelVariant::Lgsp);
        cfg.fusion_mode = ConstraintMode::FixedSum;
        cfg.train.base_epochs = 3;
        let mut model = LgspModel::init(cfg).unwrap();
        model.backbone.frozen = true;
        let mut state = SessionState::new();
        let base = session(0, &[0, 1], 4, 4);
        run_session(0, &mut state, &mut model, &base, 5).unwrap();
        let (al, ag) = model.alphas();
        assert!((al + ag - 1.0).abs() < 1e-12);
    }

    #[test]
    fn novel_scope_freezes_generators_but_not_keys() {
        use crate::protocol::{run_session, SessionState};

        let snapshot = |m: &LgspModel| -> (Vec<Tensor>, Vec<Tensor>, Tensor, Tensor, Tensor) {
            (
                m.lsp_pool.entries.iter().map(|e| e.conv1_w.clone()).collect(),
                m.lsp_pool.entries.iter().map(|e| e.key.clone()).collect(),
                m.query_proj.w.clone(),
                m.gsp_weights.clone(),
                m.token_prompts.layer_prompts[0].clone(),
            )
        };

        let run_two_sessions = |scope: TrainScope| -> (LgspModel, _) {
            let mut cfg = tiny_config(ModelVariant::Lgsp);
            cfg.train.scope = scope;
            cfg.train.novel_epochs = 2;
            let mut model = LgspModel::init(cfg).unwrap();
            model.backbone.frozen = true;
            let mut state = SessionState::new();
            run_session(0, &mut state, &mut model, &session(0, &[0, 1], 4, 6), 5).unwrap();
            let before_novel = snapshot(&model);
            run_session(1, &mut state, &mut model, &session(1, &[2, 3], 3, 7), 5).unwrap();
            (model, before_novel)
        };

        // default scope: generators, projection and vpt rows hold still in
        // the novel session; keys and ring weights move
        let (model, before) = run_two_sessions(TrainScope::Default);
        let (convs0, keys0, g0, gsp0, vpt0) = before;
        for (e, c0) in model.lsp_pool.entries.iter().zip(&convs0) {
            assert_eq!(&e.conv1_w, c0, "generator moved in default novel scope");
        }
        assert_eq!(model.query_proj.w, g0);
        assert_eq!(model.token_prompts.layer_prompts[0], vpt0);
        assert_ne!(model.gsp_weights, gsp0, "ring weights should train");
        let keys_moved = model
            .lsp_pool
            .entries
            .iter()
            .zip(&keys0)
            .any(|(e, k0)| &e.key != k0);
        assert!(keys_moved, "selected keys should receive novel gradients");

        // wide scope: generators move too
        let (model, before) = run_two_sessions(TrainScope::Wide);
        let (convs0, _, _, _, _) = before;
        let convs_moved = model
            .lsp_pool
            .entries
            .iter()
            .zip(&convs0)
            .any(|(e, c0)| &e.conv1_w != c0);
        assert!(convs_moved, "wide scope should train generators");
    }

    #[test]
    fn eval_feature_is_deterministic_and_dropout_free() {
        let model = LgspModel::init(tiny_config(ModelVariant::Lgsp)).unwrap();
        let s = sample(9, 0, 77);
        let a = model.eval_feature(&s).unwrap();
        let b = model.eval_feature(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_param_round_trips() {
        let mut model = LgspModel::init(tiny_config(ModelVariant::Lgsp)).unwrap();
        let params = model.all_params();
        let (name, mut tensor) = params[10].clone();
        tensor.data_mut()[0] += 1.5;
        model.load_param(&name, tensor.clone()).unwrap();
        let reread = model
            .all_params()
            .into_iter()
            .find(|(n, _)| *n == name)
            .unwrap()
            .1;
        assert_eq!(reread.data(), tensor.data());
    }

    #[test]
    fn pretext_fit_freezes_and_improves_loss() {
        let cfg = tiny_config(ModelVariant::VptOnly);
        let mut backbone = ToyViT::init(cfg.vit.clone(), 8, 8, &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(10);
        let items: Vec<(Tensor, usize)> = (0..12)
            .map(|i| {
                let class = i % 2;
                let mut x = Tensor::randn(&[1, 1, 8, 8], &mut rng).scale(0.2);
                // separable signal
                x.data_mut()[0] += if class == 0 { 2.0 } else { -2.0 };
                (x, class)
            })
            .collect();
        pretext_fit(&mut backbone, &items, 2, 3, 0.05, 4, 11).unwrap();
        assert!(backbone.frozen);
    }
}
