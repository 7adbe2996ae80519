//! Flat typed key=value experiment configuration.
//!
//! Grammar: one `section.key=value` per line; `#` starts a comment; blank
//! lines are ignored. Unknown keys are errors. The fully resolved config can
//! be echoed back out and re-ingested to reproduce a run exactly.

use crate::backbone::ViTConfig;
use crate::fusion::ConstraintMode;
use crate::gsp::FormulaMode;
use crate::lsp::SelectionMode;
use crate::model::{ModelConfig, ModelVariant, TrainHyper, TrainScope};
use crate::protocol::FscilSpec;
use crate::{LgspError, Result};

/// Synthetic dataset layout knobs.
#[derive(Debug, Clone)]
pub struct DataConfig {
    pub dir: String,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub pretext_classes: usize,
    pub pretext_per_class: usize,
    pub img: usize,
    pub channels: usize,
    pub noise: f64,
    /// fraction of the noise energy confined to high frequencies
    pub noise_highpass: f64,
    pub motif: usize,
    pub motif_amp: f64,
    pub freq_amp: f64,
    pub template_amp: f64,
}

/// The whole experiment, with defaults for every field.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub threads: usize,
    pub data: DataConfig,
    pub fscil_base_classes: usize,
    pub fscil_base_shots: usize,
    pub fscil_sessions: usize,
    pub fscil_n_way: usize,
    pub fscil_k_shot: usize,
    pub fscil_test_per_class: usize,
    pub variant: ModelVariant,
    pub backbone_d_model: usize,
    pub backbone_layers: usize,
    pub backbone_heads: usize,
    pub backbone_patch: usize,
    pub backbone_mlp_hidden: usize,
    pub pretext_epochs: usize,
    pub pretext_lr: f64,
    pub pretext_batch: usize,
    pub vpt_len: usize,
    pub tokenpool_size: usize,
    pub tokenpool_select: usize,
    pub lsp_pool_size: usize,
    pub lsp_n_select: usize,
    pub lsp_temperature: f64,
    pub lsp_selection: SelectionMode,
    pub lsp_c_hidden: usize,
    pub lsp_dropout: f64,
    pub lsp_kernels: Vec<usize>,
    pub gsp_rings: usize,
    pub gsp_beta: f64,
    pub gsp_tau: f64,
    pub gsp_formula: FormulaMode,
    pub fusion_mode: ConstraintMode,
    pub fusion_init: f64,
    pub train: TrainHyper,
    pub sweep_pool_sizes: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            threads: 1,
            data: DataConfig {
                dir: "data".into(),
                classes: 12,
                train_per_class: 16,
                test_per_class: 6,
                pretext_classes: 6,
                pretext_per_class: 24,
                img: 32,
                channels: 1,
                noise: 0.35,
                noise_highpass: 0.7,
                motif: 7,
                motif_amp: 1.5,
                freq_amp: 0.9,
                template_amp: 0.3,
            },
            fscil_base_classes: 4,
            fscil_base_shots: 12,
            fscil_sessions: 2,
            fscil_n_way: 2,
            fscil_k_shot: 2,
            fscil_test_per_class: 6,
            variant: ModelVariant::Lgsp,
            backbone_d_model: 32,
            backbone_layers: 2,
            backbone_heads: 2,
            backbone_patch: 4,
            backbone_mlp_hidden: 64,
            pretext_epochs: 10,
            pretext_lr: 0.01,
            pretext_batch: 16,
            vpt_len: 5,
            tokenpool_size: 8,
            tokenpool_select: 0,
            lsp_pool_size: 30,
            lsp_n_select: 5,
            lsp_temperature: 0.1,
            lsp_selection: SelectionMode::Hard,
            lsp_c_hidden: 8,
            lsp_dropout: 0.1,
            lsp_kernels: vec![1, 3, 5, 7],
            gsp_rings: 8,
            gsp_beta: 10.0,
            gsp_tau: 1.0,
            gsp_formula: FormulaMode::Annulus,
            fusion_mode: ConstraintMode::Independent,
            fusion_init: 0.5,
            train: TrainHyper::default(),
            sweep_pool_sizes: vec![4, 64],
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| LgspError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse_num::<usize>(key, v))
        .collect()
}

impl ExperimentConfig {
    /// Applies one key=value assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "threads" => self.threads = parse_num(key, value)?,
            "data.dir" => self.data.dir = value.trim().to_string(),
            "data.classes" => self.data.classes = parse_num(key, value)?,
            "data.train_per_class" => self.data.train_per_class = parse_num(key, value)?,
            "data.test_per_class" => self.data.test_per_class = parse_num(key, value)?,
            "data.pretext_classes" => self.data.pretext_classes = parse_num(key, value)?,
            "data.pretext_per_class" => self.data.pretext_per_class = parse_num(key, value)?,
            "data.img" => self.data.img = parse_num(key, value)?,
            "data.channels" => self.data.channels = parse_num(key, value)?,
            "data.noise" => self.data.noise = parse_num(key, value)?,
            "data.noise_highpass" => self.data.noise_highpass = parse_num(key, value)?,
            "data.motif" => self.data.motif = parse_num(key, value)?,
            "data.motif_amp" => self.data.motif_amp = parse_num(key, value)?,
            "data.freq_amp" => self.data.freq_amp = parse_num(key, value)?,
            "data.template_amp" => self.data.template_amp = parse_num(key, value)?,
            "fscil.base_classes" => self.fscil_base_classes = parse_num(key, value)?,
            "fscil.base_shots" => self.fscil_base_shots = parse_num(key, value)?,
            "fscil.sessions" => self.fscil_sessions = parse_num(key, value)?,
            "fscil.n_way" => self.fscil_n_way = parse_num(key, value)?,
            "fscil.k_shot" => self.fscil_k_shot = parse_num(key, value)?,
            "fscil.test_per_class" => self.fscil_test_per_class = parse_num(key, value)?,
            "model.variant" => self.variant = value.trim().parse()?,
            "backbone.d_model" => self.backbone_d_model = parse_num(key, value)?,
            "backbone.layers" => self.backbone_layers = parse_num(key, value)?,
            "backbone.heads" => self.backbone_heads = parse_num(key, value)?,
            "backbone.patch" => self.backbone_patch = parse_num(key, value)?,
            "backbone.mlp_hidden" => self.backbone_mlp_hidden = parse_num(key, value)?,
            "backbone.pretext_epochs" => self.pretext_epochs = parse_num(key, value)?,
            "backbone.pretext_lr" => self.pretext_lr = parse_num(key, value)?,
            "backbone.pretext_batch" => self.pretext_batch = parse_num(key, value)?,
            "vpt.len" => self.vpt_len = parse_num(key, value)?,
            "tokenpool.size" => self.tokenpool_size = parse_num(key, value)?,
            "tokenpool.select" => self.tokenpool_select = parse_num(key, value)?,
            "lsp.pool_size" => self.lsp_pool_size = parse_num(key, value)?,
            "lsp.n_select" => self.lsp_n_select = parse_num(key, value)?,
            "lsp.temperature" => self.lsp_temperature = parse_num(key, value)?,
            "lsp.selection" => self.lsp_selection = value.trim().parse()?,
            "lsp.c_hidden" => self.lsp_c_hidden = parse_num(key, value)?,
            "lsp.dropout" => self.lsp_dropout = parse_num(key, value)?,
            "lsp.kernels" => self.lsp_kernels = parse_list(key, value)?,
            "gsp.rings" => self.gsp_rings = parse_num(key, value)?,
            "gsp.beta" => self.gsp_beta = parse_num(key, value)?,
            "gsp.tau" => self.gsp_tau = parse_num(key, value)?,
            "gsp.formula" => self.gsp_formula = value.trim().parse()?,
            "fusion.mode" => self.fusion_mode = value.trim().parse()?,
            "fusion.init" => self.fusion_init = parse_num(key, value)?,
            "train.base_epochs" => self.train.base_epochs = parse_num(key, value)?,
            "train.base_lr" => self.train.base_lr = parse_num(key, value)?,
            "train.novel_epochs" => self.train.novel_epochs = parse_num(key, value)?,
            "train.novel_lr" => self.train.novel_lr = parse_num(key, value)?,
            "train.lsp_lr" => self.train.lsp_lr = parse_num(key, value)?,
            "train.gsp_lr_base" => self.train.gsp_lr_base = parse_num(key, value)?,
            "train.gsp_lr_novel" => self.train.gsp_lr_novel = parse_num(key, value)?,
            "train.fusion_lr" => self.train.fusion_lr = parse_num(key, value)?,
            "train.momentum" => self.train.momentum = parse_num(key, value)?,
            "train.batch" => self.train.batch_size = parse_num(key, value)?,
            "train.logit_scale" => self.train.logit_scale = parse_num(key, value)?,
            "train.scope" => self.train.scope = value.trim().parse()?,
            "sweep.pool_sizes" => self.sweep_pool_sizes = parse_list(key, value)?,
            other => {
                return Err(LgspError::Config(format!("unknown config key {other:?}")))
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(LgspError::Config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.img < 2 || self.data.img % 2 != 0 {
            return Err(LgspError::Config(format!(
                "data.img must be even and >= 2, got {}",
                self.data.img
            )));
        }
        if self.data.img % self.backbone_patch != 0 {
            return Err(LgspError::Config(format!(
                "data.img {} not divisible by backbone.patch {}",
                self.data.img, self.backbone_patch
            )));
        }
        if self.gsp_rings == 0 || self.gsp_rings > 128 {
            return Err(LgspError::Config(format!(
                "gsp.rings must be in 1..=128, got {}",
                self.gsp_rings
            )));
        }
        if self.backbone_d_model % self.backbone_heads != 0 {
            return Err(LgspError::Config(
                "backbone.d_model must be divisible by backbone.heads".into(),
            ));
        }
        if self.data.motif >= self.data.img {
            return Err(LgspError::Config("data.motif must be below data.img".into()));
        }
        Ok(())
    }

    /// Canonical echo: every resolved key, sorted, one per line.
    pub fn echo(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut rows = vec![
            format!("backbone.d_model={}", self.backbone_d_model),
            format!("backbone.heads={}", self.backbone_heads),
            format!("backbone.layers={}", self.backbone_layers),
            format!("backbone.mlp_hidden={}", self.backbone_mlp_hidden),
            format!("backbone.patch={}", self.backbone_patch),
            format!("backbone.pretext_batch={}", self.pretext_batch),
            format!("backbone.pretext_epochs={}", self.pretext_epochs),
            format!("backbone.pretext_lr={}", self.pretext_lr),
            format!("data.channels={}", self.data.channels),
            format!("data.classes={}", self.data.classes),
            format!("data.dir={}", self.data.dir),
            format!("data.freq_amp={}", self.data.freq_amp),
            format!("data.img={}", self.data.img),
            format!("data.motif={}", self.data.motif),
            format!("data.motif_amp={}", self.data.motif_amp),
            format!("data.noise={}", self.data.noise),
            format!("data.noise_highpass={}", self.data.noise_highpass),
            format!("data.pretext_classes={}", self.data.pretext_classes),
            format!("data.pretext_per_class={}", self.data.pretext_per_class),
            format!("data.template_amp={}", self.data.template_amp),
            format!("data.test_per_class={}", self.data.test_per_class),
            format!("data.train_per_class={}", self.data.train_per_class),
            format!("fscil.base_classes={}", self.fscil_base_classes),
            format!("fscil.base_shots={}", self.fscil_base_shots),
            format!("fscil.k_shot={}", self.fscil_k_shot),
            format!("fscil.n_way={}", self.fscil_n_way),
            format!("fscil.sessions={}", self.fscil_sessions),
            format!("fscil.test_per_class={}", self.fscil_test_per_class),
            format!("fusion.init={}", self.fusion_init),
            format!("fusion.mode={}", self.fusion_mode),
            format!("gsp.beta={}", self.gsp_beta),
            format!("gsp.formula={}", self.gsp_formula),
            format!("gsp.rings={}", self.gsp_rings),
            format!("gsp.tau={}", self.gsp_tau),
            format!("lsp.c_hidden={}", self.lsp_c_hidden),
            format!("lsp.dropout={}", self.lsp_dropout),
            format!("lsp.kernels={}", list(&self.lsp_kernels)),
            format!("lsp.n_select={}", self.lsp_n_select),
            format!("lsp.pool_size={}", self.lsp_pool_size),
            format!("lsp.selection={}", self.lsp_selection),
            format!("lsp.temperature={}", self.lsp_temperature),
            format!("model.variant={}", self.variant),
            format!("seed={}", self.seed),
            format!("sweep.pool_sizes={}", list(&self.sweep_pool_sizes)),
            format!("threads={}", self.threads),
            format!("tokenpool.select={}", self.tokenpool_select),
            format!("tokenpool.size={}", self.tokenpool_size),
            format!("train.base_epochs={}", self.train.base_epochs),
            format!("train.base_lr={}", self.train.base_lr),
            format!("train.batch={}", self.train.batch_size),
            format!("train.fusion_lr={}", self.train.fusion_lr),
            format!("train.gsp_lr_base={}", self.train.gsp_lr_base),
            format!("train.gsp_lr_novel={}", self.train.gsp_lr_novel),
            format!("train.logit_scale={}", self.train.logit_scale),
            format!("train.lsp_lr={}", self.train.lsp_lr),
            format!("train.momentum={}", self.train.momentum),
            format!("train.novel_epochs={}", self.train.novel_epochs),
            format!("train.novel_lr={}", self.train.novel_lr),
            format!(
                "train.scope={}",
                match self.train.scope {
                    TrainScope::Default => "default",
                    TrainScope::Wide => "wide",
                }
            ),
        ];
        rows.sort();
        rows.join("\n") + "\n"
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            vit: ViTConfig {
                d_model: self.backbone_d_model,
                n_layers: self.backbone_layers,
                n_heads: self.backbone_heads,
                patch_size: self.backbone_patch,
                mlp_hidden: self.backbone_mlp_hidden,
                c_in: self.data.channels,
            },
            img_h: self.data.img,
            img_w: self.data.img,
            vpt_len: self.vpt_len,
            token_pool_size: self.tokenpool_size,
            token_pool_select: self.tokenpool_select,
            lsp_pool_size: self.lsp_pool_size,
            lsp_n_select: self.lsp_n_select,
            lsp_temperature: self.lsp_temperature,
            lsp_selection: self.lsp_selection,
            lsp_c_hidden: self.lsp_c_hidden,
            lsp_dropout: self.lsp_dropout,
            lsp_kernel_set: self.lsp_kernels.clone(),
            gsp_rings: self.gsp_rings,
            gsp_beta: self.gsp_beta,
            gsp_tau: self.gsp_tau,
            gsp_mode: self.gsp_formula,
            fusion_mode: self.fusion_mode,
            fusion_init: self.fusion_init,
            train: self.train.clone(),
            seed: self.seed,
        }
    }

    pub fn fscil_spec(&self) -> FscilSpec {
        FscilSpec {
            base_classes: self.fscil_base_classes,
            base_shots: self.fscil_base_shots,
            sessions: self.fscil_sessions,
            n_way: self.fscil_n_way,
            k_shot: self.fscil_k_shot,
            test_per_class: self.fscil_test_per_class,
            seed: self.seed,
        }
    }
}
