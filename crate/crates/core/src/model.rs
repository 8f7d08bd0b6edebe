//! The assembled vision-language model: a toy vision tower, a two-layer
//! projector, and a causal decoder tower over the `[visual; registers;
//! text]` token layout, with the visual span dropped at a configurable
//! layer.
//!
//! Surviving tokens keep their original position ids after the drop:
//! earlier layers encoded those positions, and renumbering would shift
//! text positions mid-network.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategy::{
    apply_strategy, draw_register_bank, fastv_keep_indices, fastv_select, resample,
    subselect_indices, tail_keep_indices, victor_keep_indices, DropKind, RegisterInit,
    ResamplerBlockVars, ResamplerVars, StrategyConfig, StrategyTag,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{decoder_layer, AttentionRecord, LayerKV, LayerVars};

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionImpl {
    /// Materializes score matrices on request; capture available.
    Standard,
    /// Streaming attention; score capture unavailable.
    Fused,
}

fn default_attention_impl() -> AttentionImpl {
    AttentionImpl::Standard
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Image side length in patches; the visual token count is `grid^2`.
    pub grid: usize,
    pub patch_dim: usize,
    pub d_vision: usize,
    pub seed: u64,
    #[serde(default = "default_attention_impl")]
    pub attention_impl: AttentionImpl,
    pub strategy: StrategyConfig,
}

impl ModelConfig {
    /// Default toy dims: 8 layers, d_model 128, 4 heads, d_ff 512, an
    /// 8x8 patch grid.
    pub fn toy(strategy: StrategyConfig) -> Self {
        ModelConfig {
            n_layers: 8,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: 32,
            grid: 8,
            patch_dim: 16,
            d_vision: 32,
            seed: 0,
            attention_impl: AttentionImpl::Standard,
            strategy,
        }
    }

    /// Minimal dims for exhaustive numeric checks.
    pub fn tiny(strategy: StrategyConfig) -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 16,
            grid: 2,
            patch_dim: 4,
            d_vision: 8,
            seed: 0,
            attention_impl: AttentionImpl::Standard,
            strategy,
        }
    }

    pub fn n_visual(&self) -> usize {
        self.grid * self.grid
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn capture_capable(&self) -> bool {
        self.attention_impl == AttentionImpl::Standard
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("n_layers must be >= 1".to_string()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config(format!(
                "head dim {} must be even for rotary embedding",
                self.head_dim()
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be >= 2".to_string()));
        }
        if self.grid == 0 || self.patch_dim == 0 || self.d_vision == 0 || self.d_ff == 0 {
            return Err(Error::config(
                "grid, patch_dim, d_vision and d_ff must be positive".to_string(),
            ));
        }
        if self.strategy.word_token_id >= self.vocab_size {
            return Err(Error::config(format!(
                "word_token_id {} out of vocab {}",
                self.strategy.word_token_id, self.vocab_size
            )));
        }
        // Strategy coherence (k bounds, capture capability, ...).
        apply_strategy(self)?;
        Ok(())
    }
}

// ── Token layout ────────────────────────────────────────────────────────

/// Span bookkeeping for the `[visual; registers; text]` input, before and
/// after the drop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub n_visual: usize,
    pub n_registers: usize,
    pub n_text: usize,
    pub dropped: bool,
}

impl TokenLayout {
    pub fn new(n_visual: usize, n_registers: usize, n_text: usize) -> Self {
        TokenLayout {
            n_visual,
            n_registers,
            n_text,
            dropped: false,
        }
    }

    pub fn total(&self) -> usize {
        self.n_visual + self.n_registers + self.n_text
    }

    pub fn visual_span(&self) -> std::ops::Range<usize> {
        0..self.n_visual
    }

    pub fn register_span(&self) -> std::ops::Range<usize> {
        self.n_visual..self.n_visual + self.n_registers
    }

    pub fn text_span(&self) -> std::ops::Range<usize> {
        self.n_visual + self.n_registers..self.total()
    }
}

// ── Domain values ───────────────────────────────────────────────────────

/// Learnable (or derived) register embeddings appended after the visual
/// tokens.
#[derive(Clone, Debug)]
pub struct RegisterBank {
    /// `[m, d_model]`
    pub vectors: Tensor,
    pub init: RegisterInit,
}

impl RegisterBank {
    pub fn len(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A grid of patch feature vectors plus ground-truth cell labels.
#[derive(Clone, Debug)]
pub struct SyntheticImage {
    pub grid: usize,
    /// `[grid^2, patch_dim]`, row-major patch order.
    pub patches: Tensor,
    pub labels: Vec<u8>,
}

impl SyntheticImage {
    pub fn n_patches(&self) -> usize {
        self.grid * self.grid
    }
}

/// One prompt: an image plus text token ids.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub image: SyntheticImage,
    pub text_ids: Vec<usize>,
}

// ── Parameters ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Vision,
    Projector,
    Registers,
    Tower,
    Resampler,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Named parameter tensors in a fixed construction order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    items: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    fn push(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) {
        let name = name.into();
        self.index.insert(name.clone(), self.items.len());
        self.items.push(Param {
            name,
            group,
            tensor,
        });
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.items.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.items[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.items[i])
    }

    pub fn at(&self, idx: usize) -> &Param {
        &self.items[idx]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.items[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> u64 {
        self.items.iter().map(|p| p.tensor.numel() as u64).sum()
    }

    /// Mutable references to the tensors at `indices` (sorted, unique),
    /// in that order.
    pub fn select_mut(&mut self, indices: &[usize]) -> Vec<&mut Tensor> {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        let mut out = Vec::with_capacity(indices.len());
        let mut want = indices.iter().peekable();
        for (i, p) in self.items.iter_mut().enumerate() {
            if want.peek() == Some(&&i) {
                out.push(&mut p.tensor);
                want.next();
            }
        }
        out
    }
}

// ── Bound variables ─────────────────────────────────────────────────────

/// Tape handles for every model parameter, in parameter-store order.
pub struct ModelVars {
    pub patch_embed: Var,
    pub proj_w1: Var,
    pub proj_b1: Var,
    pub proj_w2: Var,
    pub proj_b2: Var,
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub unembed: Var,
    pub registers: Option<Var>,
    pub resampler: Option<ResamplerVars>,
    /// `by_param[i]` is the tape handle of parameter `i`.
    pub by_param: Vec<Var>,
}

// ── Forward API ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub enum LogitsSelection {
    /// Logits for every surviving position.
    All,
    /// Only the final position.
    LastOnly,
    /// The position `offset` rows before the end (0 = last).
    FromEnd(usize),
    /// Specific rows of the final surviving sequence.
    Rows(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    /// Capture attention records at every layer.
    pub capture: bool,
    pub logits: LogitsSelection,
    /// Query rows participating in attention-score token selection;
    /// defaults to the whole current sequence. Generation paths pin this
    /// to the prompt extent so cached and uncached runs select alike.
    pub fastv_query_span: Option<usize>,
    /// Capture the hidden state exiting this layer.
    pub hidden_probe: Option<usize>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            capture: false,
            logits: LogitsSelection::All,
            fastv_query_span: None,
            hidden_probe: None,
        }
    }
}

/// Forward pass artifacts; `logits` stays on the tape so training can
/// keep building toward a loss.
pub struct ForwardResult {
    pub logits: Var,
    pub records: Vec<AttentionRecord>,
    /// Hidden length entering each layer.
    pub seq_lens: Vec<usize>,
    pub layout: TokenLayout,
    /// Original position ids of the surviving rows.
    pub positions: Vec<usize>,
    /// Hidden state exiting the probed layer, when requested.
    pub probed_hidden: Option<Tensor>,
}

/// Owned forward pass artifacts for callers that do not need the tape.
pub struct OwnedForward {
    pub logits: Tensor,
    pub records: Vec<AttentionRecord>,
    pub seq_lens: Vec<usize>,
    pub layout: TokenLayout,
    pub positions: Vec<usize>,
    pub probed_hidden: Option<Tensor>,
}

// ── Model ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct VlmModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl VlmModel {
    /// Construct with seeded Gaussian init (std 0.02 for weights, unit
    /// norm gains, zero biases). Parameters are drawn in a fixed order so
    /// equal seeds give bitwise-equal shared weights across strategies.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let (d, d_ff, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut params = ParamSet::default();
        let std = 0.02;

        params.push(
            "vision.patch_embed",
            ParamGroup::Vision,
            Tensor::randn(vec![config.patch_dim, config.d_vision], std, &mut rng),
        );
        params.push(
            "projector.w1",
            ParamGroup::Projector,
            Tensor::randn(vec![config.d_vision, d], std, &mut rng),
        );
        params.push("projector.b1", ParamGroup::Projector, Tensor::zeros(vec![d]));
        params.push(
            "projector.w2",
            ParamGroup::Projector,
            Tensor::randn(vec![d, d], std, &mut rng),
        );
        params.push("projector.b2", ParamGroup::Projector, Tensor::zeros(vec![d]));
        params.push(
            "tower.embed",
            ParamGroup::Tower,
            Tensor::randn(vec![v, d], std, &mut rng),
        );
        for i in 0..config.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                params.push(
                    format!("tower.layer{i}.{w}"),
                    ParamGroup::Tower,
                    Tensor::randn(vec![d, d], std, &mut rng),
                );
            }
            params.push(
                format!("tower.layer{i}.w_gate"),
                ParamGroup::Tower,
                Tensor::randn(vec![d, d_ff], std, &mut rng),
            );
            params.push(
                format!("tower.layer{i}.w_up"),
                ParamGroup::Tower,
                Tensor::randn(vec![d, d_ff], std, &mut rng),
            );
            params.push(
                format!("tower.layer{i}.w_down"),
                ParamGroup::Tower,
                Tensor::randn(vec![d_ff, d], std, &mut rng),
            );
            params.push(
                format!("tower.layer{i}.norm_attn"),
                ParamGroup::Tower,
                Tensor::full(vec![d], 1.0),
            );
            params.push(
                format!("tower.layer{i}.norm_ffn"),
                ParamGroup::Tower,
                Tensor::full(vec![d], 1.0),
            );
        }
        params.push("tower.final_norm", ParamGroup::Tower, Tensor::full(vec![d], 1.0));
        params.push(
            "tower.unembed",
            ParamGroup::Tower,
            Tensor::randn(vec![d, v], std, &mut rng),
        );

        if config.strategy.has_register_bank() {
            let word_vec = params
                .get("tower.embed")
                .map(|p| p.tensor.row(config.strategy.word_token_id).to_vec());
            let bank =
                draw_register_bank(&config.strategy, d, &mut rng, word_vec.as_deref())?;
            params.push("registers.bank", ParamGroup::Registers, bank.vectors);
        }

        if config.strategy.tag == StrategyTag::Resampler {
            params.push(
                "resampler.queries",
                ParamGroup::Resampler,
                Tensor::randn(vec![config.strategy.m, d], std, &mut rng),
            );
            let dff_r = resampler_d_ff(&config);
            for b in 0..config.strategy.resampler_blocks {
                for w in ["wq", "wk", "wv", "wo"] {
                    params.push(
                        format!("resampler.block{b}.{w}"),
                        ParamGroup::Resampler,
                        Tensor::randn(vec![d, d], std, &mut rng),
                    );
                }
                params.push(
                    format!("resampler.block{b}.w1"),
                    ParamGroup::Resampler,
                    Tensor::randn(vec![d, dff_r], std, &mut rng),
                );
                params.push(
                    format!("resampler.block{b}.w2"),
                    ParamGroup::Resampler,
                    Tensor::randn(vec![dff_r, d], std, &mut rng),
                );
                for w in ["norm_q", "norm_kv", "norm_ffn"] {
                    params.push(
                        format!("resampler.block{b}.{w}"),
                        ParamGroup::Resampler,
                        Tensor::full(vec![d], 1.0),
                    );
                }
            }
        }

        Ok(VlmModel { config, params })
    }

    /// Insert every parameter into the tape; `trainable` decides which
    /// leaves require gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&Param) -> bool) -> ModelVars {
        let mut by_param = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            by_param.push(tape.leaf(p.tensor.clone(), trainable(p)));
        }
        let v = |name: &str| by_param[self.params.index_of(name).expect("known param")];

        let layers = (0..self.config.n_layers)
            .map(|i| LayerVars {
                wq: v(&format!("tower.layer{i}.wq")),
                wk: v(&format!("tower.layer{i}.wk")),
                wv: v(&format!("tower.layer{i}.wv")),
                wo: v(&format!("tower.layer{i}.wo")),
                w_gate: v(&format!("tower.layer{i}.w_gate")),
                w_up: v(&format!("tower.layer{i}.w_up")),
                w_down: v(&format!("tower.layer{i}.w_down")),
                norm_attn: v(&format!("tower.layer{i}.norm_attn")),
                norm_ffn: v(&format!("tower.layer{i}.norm_ffn")),
            })
            .collect();

        let resampler = if self.config.strategy.tag == StrategyTag::Resampler {
            Some(ResamplerVars {
                queries: v("resampler.queries"),
                blocks: (0..self.config.strategy.resampler_blocks)
                    .map(|b| ResamplerBlockVars {
                        wq: v(&format!("resampler.block{b}.wq")),
                        wk: v(&format!("resampler.block{b}.wk")),
                        wv: v(&format!("resampler.block{b}.wv")),
                        wo: v(&format!("resampler.block{b}.wo")),
                        w1: v(&format!("resampler.block{b}.w1")),
                        w2: v(&format!("resampler.block{b}.w2")),
                        norm_q: v(&format!("resampler.block{b}.norm_q")),
                        norm_kv: v(&format!("resampler.block{b}.norm_kv")),
                        norm_ffn: v(&format!("resampler.block{b}.norm_ffn")),
                    })
                    .collect(),
            })
        } else {
            None
        };

        ModelVars {
            patch_embed: v("vision.patch_embed"),
            proj_w1: v("projector.w1"),
            proj_b1: v("projector.b1"),
            proj_w2: v("projector.w2"),
            proj_b2: v("projector.b2"),
            embed: v("tower.embed"),
            layers,
            final_norm: v("tower.final_norm"),
            unembed: v("tower.unembed"),
            registers: self
                .params
                .index_of("registers.bank")
                .map(|i| by_param[i]),
            resampler,
            by_param,
        }
    }

    /// One visual token per patch via the learned linear patch embedding,
    /// row-major patch order.
    pub fn embed_image(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        image: &SyntheticImage,
    ) -> Result<Var> {
        if image.grid != self.config.grid {
            return Err(Error::shape(format!(
                "image grid {} does not match config grid {}",
                image.grid, self.config.grid
            )));
        }
        let (n, pd) = image.patches.dims2()?;
        if n != self.config.n_visual() || pd != self.config.patch_dim {
            return Err(Error::shape(format!(
                "image patches {:?} do not match config [{}, {}]",
                image.patches.shape(),
                self.config.n_visual(),
                self.config.patch_dim
            )));
        }
        let patches = tape.constant(image.patches.clone());
        tape.matmul(patches, vars.patch_embed)
    }

    /// Two-layer MLP with a GELU between, mapping vision features into the
    /// language embedding space.
    pub fn project(&self, tape: &mut Tape, vars: &ModelVars, features: Var) -> Result<Var> {
        let h = tape.matmul(features, vars.proj_w1)?;
        let h = tape.add_row_vec(h, vars.proj_b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, vars.proj_w2)?;
        tape.add_row_vec(h, vars.proj_b2)
    }

    /// Concatenate `[visual; registers; text]` and record the span layout.
    pub fn assemble_input(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        x_v: Var,
        registers: Option<Var>,
        text_ids: &[usize],
    ) -> Result<(Var, TokenLayout)> {
        if text_ids.is_empty() {
            return Err(Error::contract("text span must be nonempty".to_string()));
        }
        let text = tape.embedding(vars.embed, text_ids)?;
        let (n_visual, _) = tape.value(x_v).dims2()?;
        let (embeds, n_regs) = match registers {
            Some(r) => {
                let (m, _) = tape.value(r).dims2()?;
                (tape.concat_rows(&[x_v, r, text])?, m)
            }
            None => (tape.concat_rows(&[x_v, text])?, 0),
        };
        Ok((embeds, TokenLayout::new(n_visual, n_regs, text_ids.len())))
    }

    /// Register rows for this forward pass: the learned bank, or pooled
    /// visual features, optionally narrowed to a head/tail subset.
    fn register_rows(&self, tape: &mut Tape, vars: &ModelVars, x_v: Var) -> Result<Option<Var>> {
        let s = &self.config.strategy;
        if !s.uses_registers() || s.m == 0 {
            return Ok(None);
        }
        let full = match s.register_init {
            RegisterInit::PooledFeature => tape.chunk_mean_rows(x_v, s.m)?,
            _ => vars
                .registers
                .ok_or_else(|| Error::config("register bank missing".to_string()))?,
        };
        let selected = match s.subselect {
            None => full,
            Some(sub) => {
                let idx = subselect_indices(s.m, sub.m_prime, sub.mode)?;
                tape.select_rows(full, idx)?
            }
        };
        Ok(Some(selected))
    }

    /// The drop-layer forward walk. Layers before `k` see the full
    /// `[visual; registers; text]` sequence; at `k` the plan's drop is
    /// applied to hidden state, position ids, and layout; later layers run
    /// on the shortened sequence. With `cache`, per-layer keys/values for
    /// surviving positions are appended (visual keys/values at layers at
    /// or past the drop are never materialized).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        input: &ModelInput,
        opts: &ForwardOptions,
        mut cache: Option<&mut [LayerKV]>,
    ) -> Result<ForwardResult> {
        let plan = apply_strategy(&self.config)?;
        if opts.capture && !self.config.capture_capable() {
            return Err(Error::strategy(
                "attention implementation is capture-free; score capture unavailable".to_string(),
            ));
        }
        if let Some(c) = &cache {
            if c.len() != self.config.n_layers {
                return Err(Error::cache(format!(
                    "cache has {} layers, model has {}",
                    c.len(),
                    self.config.n_layers
                )));
            }
        }
        let needs_selection = matches!(plan.drop_kind, DropKind::FastvSelect { .. });

        let features = self.embed_image(tape, vars, &input.image)?;
        let mut x_v = self.project(tape, vars, features)?;
        if plan.resample {
            let rs = vars
                .resampler
                .as_ref()
                .ok_or_else(|| Error::config("resampler weights missing".to_string()))?;
            x_v = resample(tape, x_v, rs, self.config.n_heads)?;
        }
        let registers = if plan.resample {
            None
        } else {
            self.register_rows(tape, vars, x_v)?
        };
        let (mut hidden, mut layout) =
            self.assemble_input(tape, vars, x_v, registers, &input.text_ids)?;
        let mut positions: Vec<usize> = (0..layout.total()).collect();

        let mut records: Vec<AttentionRecord> = Vec::new();
        let mut seq_lens = Vec::with_capacity(self.config.n_layers);
        let mut probed_hidden: Option<Tensor> = None;
        for i in 0..self.config.n_layers {
            if plan.drop_layer == Some(i) && !layout.dropped {
                let (indices, after) = match plan.drop_kind {
                    DropKind::AllVisual => victor_keep_indices(&layout)?,
                    DropKind::KeepVisualTail(m) => tail_keep_indices(&layout, m)?,
                    DropKind::FastvSelect { keep } => {
                        let record = records
                            .iter()
                            .find(|r| r.layer + 1 == i)
                            .ok_or_else(|| {
                                Error::strategy(format!(
                                    "selection needs the layer {} attention record",
                                    i - 1
                                ))
                            })?;
                        let span = opts.fastv_query_span.unwrap_or(layout.total());
                        let kept = fastv_select(record, &layout, keep, span)?;
                        fastv_keep_indices(&layout, &kept)?
                    }
                    DropKind::None => unreachable!("drop layer set without a drop kind"),
                };
                hidden = tape.select_rows(hidden, indices.clone())?;
                positions = indices.into_iter().map(|j| positions[j]).collect();
                layout = after;
            }
            seq_lens.push(positions.len());
            let capture_this = opts.capture
                || (needs_selection && plan.drop_layer == Some(i + 1) && !layout.dropped);
            let layer_cache = cache.as_mut().map(|c| &mut c[i]);
            let (next, probs) = decoder_layer(
                tape,
                hidden,
                &vars.layers[i],
                self.config.n_heads,
                &positions,
                layer_cache,
                capture_this,
            )?;
            hidden = next;
            if let Some(p) = probs {
                records.push(AttentionRecord { layer: i, probs: p });
            }
            if opts.hidden_probe == Some(i) {
                probed_hidden = Some(tape.value(hidden).clone());
            }
        }

        let normed = tape.rms_norm(hidden, vars.final_norm)?;
        let picked = match &opts.logits {
            LogitsSelection::All => normed,
            LogitsSelection::LastOnly => {
                let last = layout.total() - 1;
                tape.select_rows(normed, vec![last])?
            }
            LogitsSelection::FromEnd(offset) => {
                if *offset >= layout.total() {
                    return Err(Error::contract(format!(
                        "logit offset {offset} exceeds sequence length {}",
                        layout.total()
                    )));
                }
                let row = layout.total() - 1 - offset;
                tape.select_rows(normed, vec![row])?
            }
            LogitsSelection::Rows(rows) => tape.select_rows(normed, rows.clone())?,
        };
        let logits = tape.matmul(picked, vars.unembed)?;
        Ok(ForwardResult {
            logits,
            records,
            seq_lens,
            layout,
            positions,
            probed_hidden,
        })
    }

    /// Uncached forward on a fresh no-grad tape.
    pub fn forward(&self, input: &ModelInput, opts: &ForwardOptions) -> Result<OwnedForward> {
        let mut tape = Tape::no_grad();
        let vars = self.bind(&mut tape, &|_| false);
        let out = self.forward_on_tape(&mut tape, &vars, input, opts, None)?;
        Ok(OwnedForward {
            logits: tape.value(out.logits).clone(),
            records: out.records,
            seq_lens: out.seq_lens,
            layout: out.layout,
            positions: out.positions,
            probed_hidden: out.probed_hidden,
        })
    }
}

// ── Parameter accounting ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ExtraParams {
    /// Parameters added by the reduction strategy.
    pub extra: u64,
    /// Full model parameter count including the extras.
    pub total: u64,
    pub fraction: f64,
}

pub(crate) fn resampler_d_ff(config: &ModelConfig) -> usize {
    if config.strategy.resampler_d_ff == 0 {
        4 * config.d_model
    } else {
        config.strategy.resampler_d_ff
    }
}

/// Strategy-added parameter count and its share of the model total.
pub fn count_extra_params(config: &ModelConfig) -> ExtraParams {
    let (d, d_ff, v) = (
        config.d_model as u64,
        config.d_ff as u64,
        config.vocab_size as u64,
    );
    let layer = 4 * d * d + 3 * d * d_ff + 2 * d;
    let base = (config.patch_dim as u64) * (config.d_vision as u64)
        + (config.d_vision as u64) * d
        + d
        + d * d
        + d
        + v * d
        + (config.n_layers as u64) * layer
        + d
        + d * v;
    let m = config.strategy.m as u64;
    let extra = match config.strategy.tag {
        StrategyTag::Victor | StrategyTag::RegistersNoDrop => {
            if config.strategy.has_register_bank() {
                m * d
            } else {
                0
            }
        }
        StrategyTag::Resampler => {
            let dff_r = resampler_d_ff(config) as u64;
            m * d + (config.strategy.resampler_blocks as u64) * (4 * d * d + 2 * d * dff_r + 3 * d)
        }
        StrategyTag::Baseline | StrategyTag::Fastv | StrategyTag::TailRetention => 0,
    };
    let total = base + extra;
    ExtraParams {
        extra,
        total,
        fraction: extra as f64 / total as f64,
    }
}

/// Deterministic image with every patch equal to its flat index — handy
/// for layout checks.
pub fn index_image(grid: usize, patch_dim: usize) -> SyntheticImage {
    let n = grid * grid;
    let mut data = Vec::with_capacity(n * patch_dim);
    for i in 0..n {
        for j in 0..patch_dim {
            data.push(i as f64 + 0.01 * j as f64);
        }
    }
    SyntheticImage {
        grid,
        patches: Tensor::new(vec![n, patch_dim], data).expect("consistent dims"),
        labels: vec![0; n],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::{SubselectConfig, SubselectMode};
    use rand::Rng;

    fn random_image(config: &ModelConfig, seed: u64) -> SyntheticImage {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        SyntheticImage {
            grid: config.grid,
            patches: Tensor::randn(vec![config.n_visual(), config.patch_dim], 1.0, &mut rng),
            labels: vec![0; config.n_visual()],
        }
    }

    fn random_input(config: &ModelConfig, seed: u64, n_text: usize) -> ModelInput {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
        ModelInput {
            image: random_image(config, seed),
            text_ids: (0..n_text)
                .map(|_| rng.gen_range(0..config.vocab_size))
                .collect(),
        }
    }

    #[test]
    fn zero_image_with_zero_weights_gives_zero_tokens() {
        let config = ModelConfig::tiny(StrategyConfig::new(StrategyTag::Baseline));
        let mut model = VlmModel::new(config.clone()).unwrap();
        let pe = model.params.get_mut("vision.patch_embed").unwrap();
        pe.tensor = Tensor::zeros(pe.tensor.shape().to_vec());
        let image = SyntheticImage {
            grid: config.grid,
            patches: Tensor::zeros(vec![config.n_visual(), config.patch_dim]),
            labels: vec![0; config.n_visual()],
        };
        let mut tape = Tape::no_grad();
        let vars = model.bind(&mut tape, &|_| false);
        let v = model.embed_image(&mut tape, &vars, &image).unwrap();
        assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn grid_24_yields_576_visual_tokens() {
        let mut config = ModelConfig::tiny(StrategyConfig::new(StrategyTag::Baseline));
        config.grid = 24;
        let model = VlmModel::new(config.clone()).unwrap();
        let image = random_image(&config, 3);
        let mut tape = Tape::no_grad();
        let vars = model.bind(&mut tape, &|_| false);
        let v = model.embed_image(&mut tape, &vars, &image).unwrap();
        assert_eq!(tape.value(v).shape(), &[576, config.d_vision]);
    }

    #[test]
    fn permuting_two_patches_permutes_those_output_rows() {
        let config = ModelConfig::tiny(StrategyConfig::new(StrategyTag::Baseline));
        let model = VlmModel::new(config.clone()).unwrap();
        let image = random_image(&config, 5);
        let mut swapped = image.clone();
        {
            let (r, c) = swapped.patches.dims2().unwrap();
            assert!(r >= 3);
            let data = swapped.patches.data_mut();
            for j in 0..c {
                data.swap(j, 2 * c + j);
            }
        }
        let mut tape = Tape::no_grad();
        let vars = model.bind(&mut tape, &|_| false);
        let a = model.embed_image(&mut tape, &vars, &image).unwrap();
        let b = model.embed_image(&mut tape, &vars, &swapped).unwrap();
        let (ta, tb) = (tape.value(a), tape.value(b));
        assert_eq!(ta.row(0), tb.row(2));
        assert_eq!(ta.row(2), tb.row(0));
        for i in [1, 3] {
            assert_eq!(ta.row(i), tb.row(i));
        }
    }

    #[test]
    fn embed_image_rejects_grid_mismatch() {
        let config = ModelConfig::tiny(StrategyConfig::new(StrategyTag::Baseline));
        let model = VlmModel::new(config.clone()).unwrap();
        let mut bad = ModelConfig::tiny(StrategyConfig::new(StrategyTag::Baseline));
        bad.grid = 3;
        let image = random_image(&bad, 0);
        let mut tape = Tape::no_grad();
        let vars = model.bind(&mut tape, &|_| false);
        assert!(matches!(
            model.embed_image(&mut tape, &vars, &image),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn projector_preserves_token_count_and_zero_w2_gives_bias_rows() {
        let config = ModelConfig::tiny(StrategyConfig::new(StrategyTag::Baseline));
        let mut model = VlmModel::new(config.clone()).unwrap();
        let w2 = model.params.get_mut("projector.w2").unwrap();
        w2.tensor = Tensor::zeros(w2.tensor.shape().to_vec());
        let b2 = model.params.get_mut("projector.b2").unwrap();
        b2.tensor = Tensor::full(b2.tensor.shape().to_vec(), 0.25);

        let image = random_image(&config, 7);
        let mut tape = Tape::no_grad();
        let vars = model.bind(&mut tape, &|_| false);
        let f = model.embed_image(&mut tape, &vars, &image).unwrap();
        let p = model.project(&mut tape, &vars, f).unwrap();
        assert_eq!(tape.value(p).shape(), &[config.n_visual(), config.d_model]);
        assert!(tape.value(p).data().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn assemble_records_register_span() {
        let mut strategy = StrategyConfig::new(StrategyTag::Victor);
        strategy.m = 8;
        strategy.k = 3;
        let mut config = ModelConfig::toy(strategy);
        config.grid = 24; // N = 576
        config.vocab_size = 70;
        let model = VlmModel::new(config.clone()).unwrap();
        let input = random_input(&config, 1, 64);
        let out = model.forward(&input, &ForwardOptions::default()).unwrap();
        assert_eq!(out.seq_lens[0], 648);
        // Spans recorded pre-drop.
        let mut tape = Tape::no_grad();
        let vars = model.bind(&mut tape, &|_| false);
        let f = model.embed_image(&mut tape, &vars, &input.image).unwrap();
        let xv = model.project(&mut tape, &vars, f).unwrap();
        let regs = vars.registers.unwrap();
        let (embeds, layout) = model
            .assemble_input(&mut tape, &vars, xv, Some(regs), &input.text_ids)
            .unwrap();
        assert_eq!(layout.total(), 648);
        assert_eq!(layout.register_span(), 576..584);
        // Concatenation round-trip: spans reconstruct the embedding matrix.
        let visual = tape.value(embeds).row(0).to_vec();
        assert_eq!(visual, tape.value(xv).row(0));
        let reg_row = tape.value(embeds).row(576).to_vec();
        assert_eq!(reg_row, tape.value(regs).row(0));
    }

    #[test]
    fn assemble_with_no_registers_matches_plain_layout() {
        let config = ModelConfig::tiny(StrategyConfig::new(StrategyTag::Baseline));
        let model = VlmModel::new(config.clone()).unwrap();
        let input = random_input(&config, 2, 3);
        let mut tape = Tape::no_grad();
        let vars = model.bind(&mut tape, &|_| false);
        let f = model.embed_image(&mut tape, &vars, &input.image).unwrap();
        let xv = model.project(&mut tape, &vars, f).unwrap();
        let (_, layout) = model
            .assemble_input(&mut tape, &vars, xv, None, &input.text_ids)
            .unwrap();
        assert_eq!(layout.n_registers, 0);
        assert_eq!(layout.total(), config.n_visual() + 3);
        assert!(matches!(
            model.assemble_input(&mut tape, &vars, xv, None, &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn degenerate_victor_equals_baseline_bitwise() {
        // (M=0, k=n) with equal seeds: same parameters, same logits.
        let mut vs = StrategyConfig::new(StrategyTag::Victor);
        vs.m = 0;
        let mut victor_cfg = ModelConfig::tiny(vs);
        victor_cfg.strategy.k = victor_cfg.n_layers;
        let base_cfg = ModelConfig::tiny(StrategyConfig::new(StrategyTag::Baseline));
        let victor = VlmModel::new(victor_cfg.clone()).unwrap();
        let baseline = VlmModel::new(base_cfg.clone()).unwrap();
        let input = random_input(&base_cfg, 9, 4);
        let a = victor.forward(&input, &ForwardOptions::default()).unwrap();
        let b = baseline.forward(&input, &ForwardOptions::default()).unwrap();
        assert!(a.logits.bit_eq(&b.logits));
    }

    #[test]
    fn hidden_length_schedule_follows_drop_layer() {
        let mut s = StrategyConfig::new(StrategyTag::Victor);
        s.m = 3;
        s.k = 3;
        let mut config = ModelConfig::tiny(s);
        config.n_layers = 5;
        let model = VlmModel::new(config.clone()).unwrap();
        let input = random_input(&config, 4, 6);
        let out = model.forward(&input, &ForwardOptions::default()).unwrap();
        let n = config.n_visual();
        for (i, &len) in out.seq_lens.iter().enumerate() {
            let expect = if i < 3 { n + 3 + 6 } else { 3 + 6 };
            assert_eq!(len, expect, "layer {i}");
        }
        assert!(out.layout.dropped);
        assert_eq!(out.layout.n_visual, 0);
        // Surviving positions keep their original ids.
        let expected: Vec<usize> = (n..n + 9).collect();
        assert_eq!(out.positions, expected);
    }

    #[test]
    fn text_logits_are_causal() {
        let config = ModelConfig::tiny(StrategyConfig::new(StrategyTag::Baseline));
        let model = VlmModel::new(config.clone()).unwrap();
        let mut input = random_input(&config, 11, 5);
        let out1 = model.forward(&input, &ForwardOptions::default()).unwrap();
        // Change the final text token; logits at earlier positions stay put.
        input.text_ids[4] = (input.text_ids[4] + 1) % config.vocab_size;
        let out2 = model.forward(&input, &ForwardOptions::default()).unwrap();
        let last = out1.layout.total() - 1;
        for row in 0..last {
            assert_eq!(out1.logits.row(row), out2.logits.row(row), "row {row}");
        }
        assert_ne!(out1.logits.row(last), out2.logits.row(last));
    }

    #[test]
    fn register_bank_receives_gradient() {
        let mut s = StrategyConfig::new(StrategyTag::Victor);
        s.m = 2;
        s.k = 1;
        let config = ModelConfig::tiny(s);
        let model = VlmModel::new(config.clone()).unwrap();
        let input = random_input(&config, 13, 4);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, &|p| p.group == ParamGroup::Registers);
        let opts = ForwardOptions {
            logits: LogitsSelection::LastOnly,
            ..ForwardOptions::default()
        };
        let out = model
            .forward_on_tape(&mut tape, &vars, &input, &opts, None)
            .unwrap();
        let loss = tape.cross_entropy_mean(out.logits, &[1]).unwrap();
        tape.backward(loss).unwrap();
        let reg_var = vars.registers.unwrap();
        let grad = tape.grad(reg_var).unwrap();
        assert!(grad.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn count_extra_params_by_strategy() {
        let fastv = ModelConfig::toy(StrategyConfig::new(StrategyTag::Fastv));
        let e = count_extra_params(&fastv);
        assert_eq!(e.extra, 0);
        assert_eq!(e.fraction, 0.0);

        let mut vs = StrategyConfig::new(StrategyTag::Victor);
        vs.m = 8;
        let victor = ModelConfig::toy(vs);
        let e = count_extra_params(&victor);
        assert_eq!(e.extra, 8 * 128);

        let mut v0 = StrategyConfig::new(StrategyTag::Victor);
        v0.m = 0;
        let e = count_extra_params(&ModelConfig::toy(v0));
        assert_eq!(e.extra, 0);
    }

    #[test]
    fn analytic_param_count_matches_constructed_model() {
        for tag in [
            StrategyTag::Baseline,
            StrategyTag::Victor,
            StrategyTag::Resampler,
        ] {
            let mut s = StrategyConfig::new(tag);
            s.m = 4;
            s.k = 1;
            let config = ModelConfig::tiny(s);
            let model = VlmModel::new(config.clone()).unwrap();
            let counted = count_extra_params(&config);
            assert_eq!(
                counted.total,
                model.params.total_params(),
                "strategy {tag:?}"
            );
        }
    }

    #[test]
    fn capture_forward_is_rejected_on_fused_attention() {
        let mut config = ModelConfig::tiny(StrategyConfig::new(StrategyTag::Baseline));
        config.attention_impl = AttentionImpl::Fused;
        let model = VlmModel::new(config.clone()).unwrap();
        let input = random_input(&config, 17, 3);
        let opts = ForwardOptions {
            capture: true,
            ..ForwardOptions::default()
        };
        assert!(matches!(
            model.forward(&input, &opts),
            Err(Error::Strategy(_))
        ));
    }

    #[test]
    fn subselected_registers_shrink_the_span() {
        let mut s = StrategyConfig::new(StrategyTag::Victor);
        s.m = 4;
        s.k = 1;
        s.subselect = Some(SubselectConfig {
            mode: SubselectMode::Head,
            m_prime: 2,
        });
        let config = ModelConfig::tiny(s);
        let model = VlmModel::new(config.clone()).unwrap();
        let input = random_input(&config, 19, 3);
        let out = model.forward(&input, &ForwardOptions::default()).unwrap();
        assert_eq!(out.seq_lens[0], config.n_visual() + 2 + 3);
        assert_eq!(out.seq_lens[1], 2 + 3);
    }
}
