//! The closed set of token-reduction strategies behind one interface:
//! register summarization with a drop layer, attention-score dropping,
//! resampler-style query pooling, plus the ablation variants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, RegisterBank, TokenLayout};
use crate::tape::{chunk_bounds, Mask, Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::AttentionRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyTag {
    Baseline,
    Victor,
    Fastv,
    Resampler,
    RegistersNoDrop,
    TailRetention,
}

impl StrategyTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyTag::Baseline => "baseline",
            StrategyTag::Victor => "victor",
            StrategyTag::Fastv => "fastv",
            StrategyTag::Resampler => "resampler",
            StrategyTag::RegistersNoDrop => "registers_no_drop",
            StrategyTag::TailRetention => "tail_retention",
        }
    }

    pub fn all() -> [StrategyTag; 6] {
        [
            StrategyTag::Baseline,
            StrategyTag::Victor,
            StrategyTag::Fastv,
            StrategyTag::Resampler,
            StrategyTag::RegistersNoDrop,
            StrategyTag::TailRetention,
        ]
    }
}

impl std::str::FromStr for StrategyTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StrategyTag::all()
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy tag '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegisterInit {
    Learnable,
    PooledFeature,
    Zeros,
    WordEmbedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubselectMode {
    Head,
    Tail,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubselectConfig {
    pub mode: SubselectMode,
    pub m_prime: usize,
}

fn default_m() -> usize {
    8
}
fn default_k() -> usize {
    3
}
fn default_register_init() -> RegisterInit {
    RegisterInit::Learnable
}
fn default_resampler_blocks() -> usize {
    2
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub tag: StrategyTag,
    /// Register count for register strategies; retained tail size for
    /// tail retention.
    #[serde(default = "default_m")]
    pub m: usize,
    /// Drop layer index.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Visual tokens kept by attention-score selection.
    #[serde(default = "default_m")]
    pub fastv_keep: usize,
    #[serde(default = "default_register_init")]
    pub register_init: RegisterInit,
    #[serde(default)]
    pub subselect: Option<SubselectConfig>,
    #[serde(default = "default_resampler_blocks")]
    pub resampler_blocks: usize,
    /// Resampler FFN width; 0 means 4 * d_model.
    #[serde(default)]
    pub resampler_d_ff: usize,
    /// Vocabulary id whose embedding seeds `word_embedding` register init.
    #[serde(default)]
    pub word_token_id: usize,
    /// Whether registers stay trainable in the fine-tuning stage.
    #[serde(default = "default_true")]
    pub train_registers_stage2: bool,
}

impl StrategyConfig {
    pub fn new(tag: StrategyTag) -> Self {
        StrategyConfig {
            tag,
            m: default_m(),
            k: default_k(),
            fastv_keep: default_m(),
            register_init: default_register_init(),
            subselect: None,
            resampler_blocks: default_resampler_blocks(),
            resampler_d_ff: 0,
            word_token_id: 0,
            train_registers_stage2: true,
        }
    }

    /// Whether this strategy appends a register span to the input.
    pub fn uses_registers(&self) -> bool {
        matches!(self.tag, StrategyTag::Victor | StrategyTag::RegistersNoDrop)
    }

    /// Whether a learned register bank parameter exists (the pooled
    /// variant derives registers from the visual tokens instead).
    pub fn has_register_bank(&self) -> bool {
        self.uses_registers() && self.m > 0 && self.register_init != RegisterInit::PooledFeature
    }
}

/// How the forward pass realizes a strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardPlan {
    /// Registers appended after the visual span (post-subselection).
    pub registers: usize,
    pub subselect: Option<SubselectConfig>,
    /// Pool visual tokens into a query set before the tower.
    pub resample: bool,
    pub drop_layer: Option<usize>,
    pub drop_kind: DropKind,
    /// Attention score capture is mandatory for this strategy.
    pub force_capture: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DropKind {
    None,
    AllVisual,
    KeepVisualTail(usize),
    FastvSelect { keep: usize },
}

impl ForwardPlan {
    /// Hidden length entering each layer, per the closed-form table.
    pub fn token_schedule(&self, n_visual: usize, n_text: usize, n_layers: usize) -> Vec<usize> {
        let full = if self.resample {
            self.registers + n_text
        } else {
            n_visual + self.registers + n_text
        };
        (0..n_layers)
            .map(|i| match (self.drop_layer, self.drop_kind) {
                (Some(k), DropKind::AllVisual) if i >= k => self.registers + n_text,
                (Some(k), DropKind::KeepVisualTail(m)) if i >= k => m + n_text,
                (Some(k), DropKind::FastvSelect { keep }) if i >= k => keep + n_text,
                _ => full,
            })
            .collect()
    }
}

/// Validate a strategy against the model architecture and lay out the
/// forward plan: where registers enter, which layer drops what, and
/// whether score capture is mandatory.
pub fn apply_strategy(config: &ModelConfig) -> Result<ForwardPlan> {
    let s = &config.strategy;
    let n = config.n_layers;
    let n_visual = config.n_visual();
    let check_k = |k: usize| -> Result<()> {
        if k > n {
            return Err(Error::config(format!("drop layer k={k} exceeds n_layers={n}")));
        }
        Ok(())
    };
    let subselect_registers = |m: usize| -> Result<usize> {
        match s.subselect {
            None => Ok(m),
            Some(sub) => {
                if sub.m_prime > m {
                    return Err(Error::contract(format!(
                        "subselect m'={} exceeds register count m={m}",
                        sub.m_prime
                    )));
                }
                Ok(sub.m_prime)
            }
        }
    };
    if s.subselect.is_some() && !s.uses_registers() {
        return Err(Error::config(format!(
            "subselect is only meaningful for register strategies, not {}",
            s.tag.as_str()
        )));
    }

    let plan = match s.tag {
        StrategyTag::Baseline => ForwardPlan {
            registers: 0,
            subselect: None,
            resample: false,
            drop_layer: None,
            drop_kind: DropKind::None,
            force_capture: false,
        },
        StrategyTag::Victor => {
            check_k(s.k)?;
            ForwardPlan {
                registers: subselect_registers(s.m)?,
                subselect: s.subselect,
                resample: false,
                drop_layer: Some(s.k),
                drop_kind: DropKind::AllVisual,
                force_capture: false,
            }
        }
        StrategyTag::RegistersNoDrop => ForwardPlan {
            registers: subselect_registers(s.m)?,
            subselect: s.subselect,
            resample: false,
            drop_layer: None,
            drop_kind: DropKind::None,
            force_capture: false,
        },
        StrategyTag::Fastv => {
            check_k(s.k)?;
            if s.k == 0 {
                return Err(Error::config(
                    "fastv needs k >= 1: selection reads scores from the previous layer".to_string(),
                ));
            }
            if s.fastv_keep > n_visual {
                return Err(Error::config(format!(
                    "fastv keep={} exceeds visual token count {n_visual}",
                    s.fastv_keep
                )));
            }
            if !config.capture_capable() {
                return Err(Error::strategy(
                    "fastv requires attention score capture; the fused attention \
                     implementation cannot provide it"
                        .to_string(),
                ));
            }
            ForwardPlan {
                registers: 0,
                subselect: None,
                resample: false,
                drop_layer: Some(s.k),
                drop_kind: DropKind::FastvSelect { keep: s.fastv_keep },
                force_capture: true,
            }
        }
        StrategyTag::Resampler => {
            if s.m == 0 {
                return Err(Error::config("resampler needs m >= 1 queries".to_string()));
            }
            if s.resampler_blocks == 0 {
                return Err(Error::config("resampler needs at least one block".to_string()));
            }
            ForwardPlan {
                registers: s.m,
                subselect: None,
                resample: true,
                drop_layer: None,
                drop_kind: DropKind::None,
                force_capture: false,
            }
        }
        StrategyTag::TailRetention => {
            check_k(s.k)?;
            if s.m > n_visual {
                return Err(Error::contract(format!(
                    "tail retention m={} exceeds visual token count {n_visual}",
                    s.m
                )));
            }
            ForwardPlan {
                registers: 0,
                subselect: None,
                resample: false,
                drop_layer: Some(s.k),
                drop_kind: DropKind::KeepVisualTail(s.m),
                force_capture: false,
            }
        }
    };
    Ok(plan)
}

// ── Drops ───────────────────────────────────────────────────────────────

/// Row indices that survive dropping the whole visual span, plus the
/// layout after the drop.
pub fn victor_keep_indices(layout: &TokenLayout) -> Result<(Vec<usize>, TokenLayout)> {
    if layout.dropped {
        return Err(Error::contract("visual span already dropped".to_string()));
    }
    let indices: Vec<usize> = (layout.n_visual..layout.total()).collect();
    let mut after = *layout;
    after.n_visual = 0;
    after.dropped = true;
    Ok((indices, after))
}

/// Drop the visual span; registers and text survive in order.
pub fn victor_drop(hidden: &Tensor, layout: &TokenLayout) -> Result<(Tensor, TokenLayout)> {
    let (rows, _) = hidden.dims2()?;
    if rows != layout.total() {
        return Err(Error::shape(format!(
            "hidden has {rows} rows, layout expects {}",
            layout.total()
        )));
    }
    let (indices, after) = victor_keep_indices(layout)?;
    Ok((select_tensor_rows(hidden, &indices), after))
}

/// Row indices that survive keeping only the last `m` visual tokens.
pub fn tail_keep_indices(layout: &TokenLayout, m: usize) -> Result<(Vec<usize>, TokenLayout)> {
    if layout.dropped {
        return Err(Error::contract("visual span already dropped".to_string()));
    }
    if m > layout.n_visual {
        return Err(Error::contract(format!(
            "tail retention m={m} exceeds visual span {}",
            layout.n_visual
        )));
    }
    let mut indices: Vec<usize> = ((layout.n_visual - m)..layout.n_visual).collect();
    indices.extend(layout.n_visual..layout.total());
    let mut after = *layout;
    after.n_visual = m;
    after.dropped = true;
    Ok((indices, after))
}

/// Keep the last `m` visual tokens plus everything after the visual span.
pub fn tail_retention_drop(
    hidden: &Tensor,
    layout: &TokenLayout,
    m: usize,
) -> Result<(Tensor, TokenLayout)> {
    let (indices, after) = tail_keep_indices(layout, m)?;
    Ok((select_tensor_rows(hidden, &indices), after))
}

/// Row indices surviving a FastV drop given the kept visual indices.
pub fn fastv_keep_indices(
    layout: &TokenLayout,
    kept_visual: &[usize],
) -> Result<(Vec<usize>, TokenLayout)> {
    if layout.dropped {
        return Err(Error::contract("visual span already dropped".to_string()));
    }
    let mut indices = kept_visual.to_vec();
    indices.extend(layout.n_visual..layout.total());
    let mut after = *layout;
    after.n_visual = kept_visual.len();
    after.dropped = true;
    Ok((indices, after))
}

fn select_tensor_rows(t: &Tensor, indices: &[usize]) -> Tensor {
    let (_, c) = t.dims2().expect("rank-2");
    let mut data = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![indices.len(), c], data).expect("consistent rows")
}

// ── FastV selection ─────────────────────────────────────────────────────

/// Rank visual tokens by received attention and keep the top `keep`.
///
/// The score of visual token `j` is the mean, over heads and over query
/// rows in `0..query_span` strictly after `j`, of post-softmax attention
/// to `j`. Kept indices preserve original order; score ties break toward
/// the lower index.
pub fn fastv_select(
    record: &AttentionRecord,
    layout: &TokenLayout,
    keep: usize,
    query_span: usize,
) -> Result<Vec<usize>> {
    if layout.dropped {
        return Err(Error::contract(
            "fastv selection on an already-dropped layout".to_string(),
        ));
    }
    let n = layout.n_visual;
    if keep > n {
        return Err(Error::contract(format!(
            "fastv keep={keep} exceeds visual span {n}"
        )));
    }
    if record.q_len() != layout.total() || record.kv_len() != layout.total() {
        return Err(Error::contract(format!(
            "record is {}x{}, layout expects {}",
            record.q_len(),
            record.kv_len(),
            layout.total()
        )));
    }
    if query_span > record.q_len() {
        return Err(Error::contract(format!(
            "query span {query_span} exceeds record queries {}",
            record.q_len()
        )));
    }

    let heads = record.n_heads();
    let mut scores = vec![0.0; n];
    for (j, score) in scores.iter_mut().enumerate() {
        let first_q = j + 1;
        if first_q >= query_span {
            continue; // no later queries in span: score stays 0
        }
        let mut sum = 0.0;
        for h in 0..heads {
            for q in first_q..query_span {
                sum += record.row(h, q)[j];
            }
        }
        *score = sum / (heads * (query_span - first_q)) as f64;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("attention scores are finite")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    Ok(kept)
}

// ── Registers ───────────────────────────────────────────────────────────

/// Build a register bank in the requested initialization mode.
pub fn init_registers(
    mode: RegisterInit,
    m: usize,
    d_model: usize,
    rng: Option<&mut dyn rand::RngCore>,
    x_v: Option<&Tensor>,
    word_vec: Option<&[f64]>,
) -> Result<RegisterBank> {
    let vectors = match mode {
        RegisterInit::Learnable => {
            let rng = rng.ok_or_else(|| {
                Error::config("learnable register init needs a random source".to_string())
            })?;
            let mut r = rng;
            let data = (0..m * d_model)
                .map(|_| 0.02 * crate::tensor::sample_normal(&mut r))
                .collect();
            Tensor::new(vec![m, d_model], data)?
        }
        RegisterInit::PooledFeature => {
            let x = x_v.ok_or_else(|| {
                Error::config("pooled_feature register init needs visual tokens".to_string())
            })?;
            let (n, d) = x.dims2()?;
            if d != d_model {
                return Err(Error::shape(format!(
                    "visual tokens have width {d}, expected {d_model}"
                )));
            }
            if m == 0 || m > n {
                return Err(Error::config(format!(
                    "cannot pool {n} visual tokens into {m} registers"
                )));
            }
            let mut data = vec![0.0; m * d_model];
            for (ci, (start, end)) in chunk_bounds(n, m).into_iter().enumerate() {
                let inv = 1.0 / (end - start) as f64;
                for i in start..end {
                    for (jj, &v) in x.row(i).iter().enumerate() {
                        data[ci * d_model + jj] += v * inv;
                    }
                }
            }
            Tensor::new(vec![m, d_model], data)?
        }
        RegisterInit::Zeros => Tensor::zeros(vec![m, d_model]),
        RegisterInit::WordEmbedding => {
            let w = word_vec.ok_or_else(|| {
                Error::config("word_embedding register init needs an embedding vector".to_string())
            })?;
            if w.len() != d_model {
                return Err(Error::shape(format!(
                    "word vector has width {}, expected {d_model}",
                    w.len()
                )));
            }
            let mut data = Vec::with_capacity(m * d_model);
            for _ in 0..m {
                data.extend_from_slice(w);
            }
            Tensor::new(vec![m, d_model], data)?
        }
    };
    Ok(RegisterBank {
        vectors,
        init: mode,
    })
}

/// Keep a contiguous head or tail of the bank, order preserved.
pub fn subselect_registers(
    bank: &RegisterBank,
    m_prime: usize,
    mode: SubselectMode,
) -> Result<RegisterBank> {
    let (m, _) = bank.vectors.dims2()?;
    let indices = subselect_indices(m, m_prime, mode)?;
    Ok(RegisterBank {
        vectors: select_tensor_rows(&bank.vectors, &indices),
        init: bank.init,
    })
}

pub fn subselect_indices(m: usize, m_prime: usize, mode: SubselectMode) -> Result<Vec<usize>> {
    if m_prime > m {
        return Err(Error::contract(format!(
            "subselect m'={m_prime} exceeds bank size {m}"
        )));
    }
    Ok(match mode {
        SubselectMode::Head => (0..m_prime).collect(),
        SubselectMode::Tail => ((m - m_prime)..m).collect(),
    })
}

// ── Resampler ───────────────────────────────────────────────────────────

/// Tape handles for one resampler cross-attention block.
#[derive(Clone, Copy, Debug)]
pub struct ResamplerBlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w1: Var,
    pub w2: Var,
    pub norm_q: Var,
    pub norm_kv: Var,
    pub norm_ffn: Var,
}

/// Tape handles for the resampler: learned queries plus its blocks.
#[derive(Clone, Debug)]
pub struct ResamplerVars {
    pub queries: Var,
    pub blocks: Vec<ResamplerBlockVars>,
}

/// Pool `n` visual tokens into the learned query set via cross-attention
/// blocks; output token count equals the query count regardless of `n`.
pub fn resample(
    tape: &mut Tape,
    x_v: Var,
    vars: &ResamplerVars,
    n_heads: usize,
) -> Result<Var> {
    let (n, _) = tape.value(x_v).dims2()?;
    if n == 0 {
        return Err(Error::shape("resample needs at least one visual token".to_string()));
    }
    let mut latents = vars.queries;
    for block in &vars.blocks {
        let qn = tape.rms_norm(latents, block.norm_q)?;
        let kvn = tape.rms_norm(x_v, block.norm_kv)?;
        let q = tape.matmul(qn, block.wq)?;
        let k = tape.matmul(kvn, block.wk)?;
        let v = tape.matmul(kvn, block.wv)?;
        let (attn, _) = tape.attention(q, k, v, n_heads, Mask::None, false)?;
        let o = tape.matmul(attn, block.wo)?;
        latents = tape.add(latents, o)?;

        let fn_in = tape.rms_norm(latents, block.norm_ffn)?;
        let h = tape.matmul(fn_in, block.w1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, block.w2)?;
        latents = tape.add(latents, h)?;
    }
    Ok(latents)
}


/// Gaussian-initialized register bank draw used at model construction.
pub fn draw_register_bank(
    config: &StrategyConfig,
    d_model: usize,
    rng: &mut impl Rng,
    word_vec: Option<&[f64]>,
) -> Result<RegisterBank> {
    match config.register_init {
        RegisterInit::Learnable => init_registers(
            RegisterInit::Learnable,
            config.m,
            d_model,
            Some(rng),
            None,
            None,
        ),
        RegisterInit::Zeros => init_registers(RegisterInit::Zeros, config.m, d_model, None, None, None),
        RegisterInit::WordEmbedding => init_registers(
            RegisterInit::WordEmbedding,
            config.m,
            d_model,
            None,
            None,
            word_vec,
        ),
        RegisterInit::PooledFeature => Err(Error::config(
            "pooled_feature registers are derived per input, not stored".to_string(),
        )),
    }
}
