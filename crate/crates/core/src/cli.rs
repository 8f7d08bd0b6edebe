//! Run configuration and the command implementations behind the `vtlab`
//! binary: train, eval, bench, flops, analyze, and Pareto sweeps.
//!
//! One JSON configuration document drives everything; command-line flags
//! only override document fields. Every command is deterministic given
//! the config and seed, wall-clock fields aside. The worker count comes
//! from the `VTLAB_WORKERS` environment variable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytics::{
    attention_to_grid, cosine_similarity_stats, model_flops, register_attention_map, FlopsReport,
    SimilarityStats,
};
use crate::checkpoint;
use crate::engine::{bench, throughput_ratio, Scenario, ThroughputReport};
use crate::error::{Error, Result};
use crate::model::{
    count_extra_params, ExtraParams, ForwardOptions, LogitsSelection, ModelConfig, ModelInput,
    TokenLayout, VlmModel,
};
use crate::strategy::{StrategyConfig, StrategyTag};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::{
    evaluate, gen_dataset, timing_probe, train, DataConfig, EvalResult, StageConfig, StageKind,
    SyntheticSample, TimingProbe, TrainLog, VocabLayout,
};

pub const RUN_CONFIG_SCHEMA_VERSION: u32 = 1;

pub const ENV_WORKERS: &str = "VTLAB_WORKERS";

/// Worker count from `VTLAB_WORKERS`, defaulting to the machine's
/// available parallelism.
pub fn worker_count() -> usize {
    std::env::var(ENV_WORKERS)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

// ── Configuration document ──────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub grid: usize,
    pub patch_dim: usize,
    pub d_vision: usize,
    #[serde(default = "default_attention_impl")]
    pub attention_impl: crate::model::AttentionImpl,
}

fn default_attention_impl() -> crate::model::AttentionImpl {
    crate::model::AttentionImpl::Standard
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub stage1: StageSection,
    pub stage2: StageSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub strategy: StrategyConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    pub scenario: Scenario,
    /// Benchmark from this checkpoint instead of a fresh seeded model.
    #[serde(default)]
    pub bench_checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_CONFIG_SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported schema_version {}, expected {RUN_CONFIG_SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        let model = self.model_config();
        model.validate()?;
        self.scenario.validate()?;
        let vocab = self.vocab_layout();
        if vocab.required_vocab() > model.vocab_size {
            return Err(Error::config(format!(
                "task needs vocab {} (colors {} + 2*grid {}), model has {}",
                vocab.required_vocab(),
                self.data.colors,
                model.grid,
                model.vocab_size
            )));
        }
        if self.data.colors < 2 {
            return Err(Error::config("data.colors must be >= 2".to_string()));
        }
        if self.data.train_count == 0 || self.data.eval_count == 0 {
            return Err(Error::config(
                "data.train_count and data.eval_count must be positive".to_string(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.model.n_layers,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            vocab_size: self.model.vocab_size,
            grid: self.model.grid,
            patch_dim: self.model.patch_dim,
            d_vision: self.model.d_vision,
            seed: self.seed,
            attention_impl: self.model.attention_impl,
            strategy: self.strategy.clone(),
        }
    }

    /// The same architecture with the plain no-reduction strategy.
    pub fn baseline_model_config(&self) -> ModelConfig {
        let mut config = self.model_config();
        config.strategy = StrategyConfig::new(StrategyTag::Baseline);
        config
    }

    pub fn vocab_layout(&self) -> VocabLayout {
        VocabLayout::new(self.data.colors, self.model.grid)
    }

    pub fn stage_configs(&self) -> (StageConfig, StageConfig) {
        (
            StageConfig {
                stage: StageKind::PretrainAnalog,
                lr: self.train.stage1.lr,
                steps: self.train.stage1.steps,
                batch_size: self.train.stage1.batch_size,
                seed: self.seed.wrapping_add(1),
                weight_decay: self.train.stage1.weight_decay,
            },
            StageConfig {
                stage: StageKind::FinetuneAnalog,
                lr: self.train.stage2.lr,
                steps: self.train.stage2.steps,
                batch_size: self.train.stage2.batch_size,
                seed: self.seed.wrapping_add(2),
                weight_decay: self.train.stage2.weight_decay,
            },
        )
    }

    pub fn train_dataset(&self) -> Result<Vec<SyntheticSample>> {
        gen_dataset(
            self.seed ^ 0xd47a,
            self.data.train_count,
            self.model.grid,
            self.data.colors,
            self.data.noise_std,
            self.data.question_len,
            self.model.patch_dim,
        )
    }

    /// Held out by seed separation from the training set.
    pub fn eval_dataset(&self) -> Result<Vec<SyntheticSample>> {
        gen_dataset(
            self.seed ^ 0xe7a1,
            self.data.eval_count,
            self.model.grid,
            self.data.colors,
            self.data.noise_std,
            self.data.question_len,
            self.model.patch_dim,
        )
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoint.json")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct ProbeFile {
    pub stage1: Option<TimingProbe>,
    pub stage2: Option<TimingProbe>,
}

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub logs: (TrainLog, TrainLog),
}

/// Run both stages for the configured strategy and write checkpoint,
/// per-stage training logs, and the timing probe.
pub fn cmd_train(config: &RunConfig) -> Result<TrainArtifacts> {
    std::fs::create_dir_all(&config.out_dir)?;
    let workers = worker_count();
    let dataset = config.train_dataset()?;
    let mut model = VlmModel::new(config.model_config())?;
    let (s1, s2) = config.stage_configs();
    let log1 = train(&mut model, &dataset, &s1, workers)?;
    let log2 = train(&mut model, &dataset, &s2, workers)?;
    log1.write_jsonl(&config.out_dir.join("train_log_stage1.jsonl"))?;
    log2.write_jsonl(&config.out_dir.join("train_log_stage2.jsonl"))?;

    let probe_warmup = 2;
    let probes = ProbeFile {
        stage1: timing_probe(&log1, probe_warmup).ok(),
        stage2: timing_probe(&log2, probe_warmup).ok(),
    };
    write_json(&config.out_dir.join("timing_probe.json"), &probes)?;

    let ckpt = config.checkpoint_path();
    checkpoint::save(&model, &ckpt)?;
    Ok(TrainArtifacts {
        checkpoint: ckpt,
        logs: (log1, log2),
    })
}

// ── eval ────────────────────────────────────────────────────────────────

/// Evaluate a checkpoint on the held-out split; writes `eval.json`.
pub fn cmd_eval(config: &RunConfig, checkpoint_path: Option<&Path>) -> Result<EvalResult> {
    std::fs::create_dir_all(&config.out_dir)?;
    let default_path = config.checkpoint_path();
    let path = checkpoint_path.unwrap_or(&default_path);
    let model = checkpoint::load(path)?;
    let dataset = config.eval_dataset()?;
    let result = evaluate(&model, &dataset, &config.vocab_layout())?;
    write_json(&config.out_dir.join("eval.json"), &result)?;
    Ok(result)
}

// ── bench ───────────────────────────────────────────────────────────────

fn bench_model(config: &RunConfig) -> Result<VlmModel> {
    match &config.bench_checkpoint {
        Some(path) => checkpoint::load(path),
        None => VlmModel::new(config.model_config()),
    }
}

/// Bench the configured strategy against the baseline for each requested
/// generation length; writes `bench_gen{n}.json` with the ratio filled in.
pub fn cmd_bench(config: &RunConfig, gen_len: Option<usize>) -> Result<Vec<ThroughputReport>> {
    std::fs::create_dir_all(&config.out_dir)?;
    let workers = worker_count();
    let model = bench_model(config)?;
    let gen_lens: Vec<usize> = match gen_len {
        Some(n) => vec![n],
        None => vec![2, 128],
    };
    let mut reports = Vec::new();
    for g in gen_lens {
        let scenario = Scenario {
            gen_len: g,
            ..config.scenario
        };
        let mut report = bench(&model, &scenario, workers, config.seed)?;
        if config.strategy.tag == StrategyTag::Baseline {
            report.ratio_vs_baseline = Some(1.0);
        } else {
            let baseline = VlmModel::new(config.baseline_model_config())?;
            let base_report = bench(&baseline, &scenario, workers, config.seed)?;
            report.ratio_vs_baseline = Some(throughput_ratio(&report, &base_report)?);
        }
        write_json(&config.out_dir.join(format!("bench_gen{g}.json")), &report)?;
        reports.push(report);
    }
    Ok(reports)
}

// ── flops ───────────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct FlopsFile {
    pub flops: FlopsReport,
    pub extra_params: ExtraParams,
}

/// Analytic prefill FLOPs and strategy-added parameters; writes
/// `flops.json`.
pub fn cmd_flops(config: &RunConfig) -> Result<FlopsFile> {
    std::fs::create_dir_all(&config.out_dir)?;
    let model_config = config.model_config();
    let file = FlopsFile {
        flops: model_flops(&model_config, config.scenario.prompt_text_len)?,
        extra_params: count_extra_params(&model_config),
    };
    write_json(&config.out_dir.join("flops.json"), &file)?;
    Ok(file)
}

// ── analyze ─────────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub strategy: String,
    pub n_visual: usize,
    pub n_registers: usize,
    pub drop_layer: usize,
    pub similarity_visual: SimilarityStats,
    /// Register-state similarity at the last pre-drop layer, when the
    /// strategy has registers.
    pub similarity_registers: Option<SimilarityStats>,
    /// Mean register attention mass on the visual span, per pre-drop layer.
    pub per_layer_visual_mass: Vec<f64>,
}

fn write_csv_matrix(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    let mut text = String::new();
    for r in 0..rows {
        let row: Vec<String> = (0..cols).map(|c| data[r * cols + c].to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Capture one sample's attention and emit the analysis artifacts:
/// similarity stats (JSON), per-layer register→visual maps (CSV), and
/// grid heatmaps (CSV, g rows of g values).
pub fn cmd_analyze(
    config: &RunConfig,
    checkpoint_path: Option<&Path>,
    sample_index: usize,
) -> Result<AnalysisSummary> {
    std::fs::create_dir_all(&config.out_dir)?;
    let default_path = config.checkpoint_path();
    let path = checkpoint_path.unwrap_or(&default_path);
    let model = checkpoint::load(path)?;
    if !model.config.capture_capable() {
        return Err(Error::strategy(
            "checkpoint config uses capture-free attention; analysis needs score capture"
                .to_string(),
        ));
    }
    let dataset = config.eval_dataset()?;
    let sample = dataset
        .get(sample_index)
        .ok_or_else(|| Error::config(format!("sample index {sample_index} out of range")))?;
    let input = ModelInput {
        image: sample.image.clone(),
        text_ids: sample.question.clone(),
    };

    let k = model.config.strategy.k.min(model.config.n_layers);
    let probe_layer = k.saturating_sub(1);
    let mut tape = Tape::no_grad();
    let vars = model.bind(&mut tape, &|_| false);
    let opts = ForwardOptions {
        capture: true,
        logits: LogitsSelection::LastOnly,
        fastv_query_span: None,
        hidden_probe: Some(probe_layer),
    };
    let out = model.forward_on_tape(&mut tape, &vars, &input, &opts, None)?;

    // Raw projected visual tokens.
    let features = model.embed_image(&mut tape, &vars, &input.image)?;
    let x_v = model.project(&mut tape, &vars, features)?;
    let similarity_visual = cosine_similarity_stats(tape.value(x_v))?;

    let n = model.config.n_visual();
    let m = crate::strategy::apply_strategy(&model.config)?.registers;
    let pre_drop = TokenLayout::new(n, m, input.text_ids.len());

    let mut similarity_registers = None;
    let mut per_layer_visual_mass = Vec::new();
    if m > 1 {
        if let Some(hidden) = &out.probed_hidden {
            let reg_rows: Vec<f64> = (pre_drop.register_span())
                .flat_map(|r| hidden.row(r).to_vec())
                .collect();
            let regs = Tensor::new(vec![m, model.config.d_model], reg_rows)?;
            similarity_registers = Some(cosine_similarity_stats(&regs)?);
        }
    }
    if m > 0 && k > 0 {
        let map = register_attention_map(&out.records, &pre_drop, k)?;
        for lm in &map.layers {
            per_layer_visual_mass.push(lm.mean_visual_mass);
            write_csv_matrix(
                &config.out_dir.join(format!("attn_map_layer{}.csv", lm.layer)),
                lm.n_registers,
                lm.n_visual,
                &lm.matrix,
            )?;
            // Column means over registers, mapped back onto the grid.
            let mut col_mean = vec![0.0; lm.n_visual];
            for reg in 0..lm.n_registers {
                for v in 0..lm.n_visual {
                    col_mean[v] += lm.matrix[reg * lm.n_visual + v] / lm.n_registers as f64;
                }
            }
            let grid = attention_to_grid(&col_mean, model.config.grid)?;
            let flat: Vec<f64> = grid.into_iter().flatten().collect();
            write_csv_matrix(
                &config.out_dir.join(format!("grid_layer{}.csv", lm.layer)),
                model.config.grid,
                model.config.grid,
                &flat,
            )?;
        }
    }

    let summary = AnalysisSummary {
        strategy: model.config.strategy.tag.as_str().to_string(),
        n_visual: n,
        n_registers: m,
        drop_layer: k,
        similarity_visual,
        similarity_registers,
        per_layer_visual_mass,
    };
    write_json(&config.out_dir.join("analysis.json"), &summary)?;
    Ok(summary)
}

// ── sweep ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub strategy: String,
    pub m: usize,
    pub k: usize,
    pub accuracy: f64,
    pub normalized_score: f64,
    pub tps_ratio: f64,
    pub flops_ratio: f64,
    pub extra_params: u64,
}

fn cell_config(config: &RunConfig, tag: StrategyTag, m: usize, k: usize) -> RunConfig {
    let mut cell = config.clone();
    cell.strategy.tag = tag;
    cell.strategy.m = m;
    cell.strategy.k = k;
    if tag == StrategyTag::Fastv {
        cell.strategy.fastv_keep = m;
    }
    cell.out_dir = config
        .out_dir
        .join(format!("{}_m{}_k{}", tag.as_str(), m, k));
    cell
}

fn run_cell(cell: &RunConfig, baseline: &CellOutcome) -> Result<SweepRow> {
    let outcome = train_eval_bench(cell)?;
    let tps_ratio = outcome.tps / baseline.tps;
    let flops = model_flops(&cell.model_config(), cell.scenario.prompt_text_len)?;
    let extra = count_extra_params(&cell.model_config());
    Ok(SweepRow {
        strategy: cell.strategy.tag.as_str().to_string(),
        m: cell.strategy.m,
        k: cell.strategy.k,
        accuracy: outcome.accuracy,
        normalized_score: outcome.accuracy / baseline.accuracy,
        tps_ratio,
        flops_ratio: flops.ratio_vs_baseline,
        extra_params: extra.extra,
    })
}

struct CellOutcome {
    accuracy: f64,
    tps: f64,
}

fn train_eval_bench(config: &RunConfig) -> Result<CellOutcome> {
    cmd_train(config)?;
    let eval = cmd_eval(config, None)?;
    let workers = worker_count();
    let model = checkpoint::load(&config.checkpoint_path())?;
    let report = bench(&model, &config.scenario, workers, config.seed)?;
    Ok(CellOutcome {
        accuracy: eval.accuracy,
        tps: report.tps,
    })
}

/// Train, evaluate, and bench every (strategy, m, k) cell; normalization
/// and tps ratios come from a baseline trained under the same config
/// family. Writes `sweep.csv`.
pub fn cmd_sweep(
    config: &RunConfig,
    strategies: &[StrategyTag],
    m_list: &[usize],
    k_list: &[usize],
) -> Result<Vec<SweepRow>> {
    if strategies.is_empty() || m_list.is_empty() || k_list.is_empty() {
        return Err(Error::config(
            "sweep needs nonempty strategy, m, and k lists".to_string(),
        ));
    }
    std::fs::create_dir_all(&config.out_dir)?;

    let mut baseline_cfg = config.clone();
    baseline_cfg.strategy = StrategyConfig::new(StrategyTag::Baseline);
    baseline_cfg.out_dir = config.out_dir.join("baseline");
    let baseline = train_eval_bench(&baseline_cfg)?;

    let mut rows = vec![SweepRow {
        strategy: "baseline".to_string(),
        m: 0,
        k: 0,
        accuracy: baseline.accuracy,
        normalized_score: 1.0,
        tps_ratio: 1.0,
        flops_ratio: 1.0,
        extra_params: 0,
    }];
    for &tag in strategies {
        if tag == StrategyTag::Baseline {
            continue;
        }
        for &m in m_list {
            for &k in k_list {
                let cell = cell_config(config, tag, m, k);
                rows.push(run_cell(&cell, &baseline)?);
            }
        }
    }

    let mut csv = String::from(
        "strategy,m,k,accuracy,normalized_score,tps_ratio,flops_ratio,extra_params\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.strategy, r.m, r.k, r.accuracy, r.normalized_score, r.tps_ratio, r.flops_ratio,
            r.extra_params
        ));
    }
    std::fs::write(config.out_dir.join("sweep.csv"), csv)?;
    Ok(rows)
}
