//! KV-cache generation and throughput benchmarking.
//!
//! A prefill runs the strategy's forward plan once, populating per-layer
//! caches with keys/values for the *surviving* positions only — visual
//! keys/values at layers past the drop are never materialized. Decode
//! steps then push one token at a time through every layer, attending to
//! the full per-layer cache.
//!
//! The benchmark times the prefill and decode phases separately over a
//! batch of independent generation streams; tokens/second counts
//! generated tokens against decode wall time.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ForwardOptions, LogitsSelection, ModelInput, SyntheticImage, TokenLayout, VlmModel,
};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::transformer::{decoder_layer, AttentionRecord, LayerKV};

// ── KV cache ────────────────────────────────────────────────────────────

/// Per-layer key/value stores with retained original position ids.
pub struct KVCache {
    pub layers: Vec<LayerKV>,
    next_position: usize,
    d_model: usize,
    n_layers: usize,
}

impl KVCache {
    fn new(n_layers: usize, d_model: usize) -> Self {
        KVCache {
            layers: (0..n_layers).map(|_| LayerKV::empty(d_model)).collect(),
            next_position: 0,
            d_model,
            n_layers,
        }
    }

    /// Position id the next decoded token will use.
    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn layer_lens(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.len()).collect()
    }

    fn check_model(&self, model: &VlmModel) -> Result<()> {
        if self.n_layers != model.config.n_layers || self.d_model != model.config.d_model {
            return Err(Error::cache(format!(
                "cache built for {} layers x d{}, model is {} layers x d{}",
                self.n_layers, self.d_model, model.config.n_layers, model.config.d_model
            )));
        }
        Ok(())
    }
}

pub struct PrefillOutput {
    /// Logits at the final prompt position, `[1, vocab]`.
    pub logits: Tensor,
    pub cache: KVCache,
    pub layout: TokenLayout,
    pub records: Vec<AttentionRecord>,
    pub seq_lens: Vec<usize>,
}

/// Run the strategy plan over the prompt, returning final-position logits
/// and the populated cache.
pub fn prefill(model: &VlmModel, input: &ModelInput) -> Result<PrefillOutput> {
    let mut tape = Tape::no_grad();
    let vars = model.bind(&mut tape, &|_| false);
    let mut cache = KVCache::new(model.config.n_layers, model.config.d_model);
    let opts = ForwardOptions {
        capture: false,
        logits: LogitsSelection::LastOnly,
        fastv_query_span: None,
        hidden_probe: None,
    };
    let out = model.forward_on_tape(&mut tape, &vars, input, &opts, Some(&mut cache.layers))?;
    // Dropped rows consumed position ids too; the next token continues
    // after the full assembled prompt.
    let assembled_len = out.positions.last().map(|&p| p + 1).unwrap_or(0);
    cache.next_position = assembled_len;
    Ok(PrefillOutput {
        logits: tape.value(out.logits).clone(),
        cache,
        layout: out.layout,
        records: out.records,
        seq_lens: out.seq_lens,
    })
}

/// One-token forward attending to the full per-layer cache; the new
/// position id is one past the previous maximum.
pub fn decode_step(model: &VlmModel, token_id: usize, cache: &mut KVCache) -> Result<Tensor> {
    cache.check_model(model)?;
    if token_id >= model.config.vocab_size {
        return Err(Error::contract(format!(
            "token id {token_id} out of vocab {}",
            model.config.vocab_size
        )));
    }
    let mut tape = Tape::no_grad();
    let vars = model.bind(&mut tape, &|_| false);
    let positions = [cache.next_position];
    cache.next_position += 1;

    let mut hidden = tape.embedding(vars.embed, &[token_id])?;
    for i in 0..model.config.n_layers {
        let (next, _) = decoder_layer(
            &mut tape,
            hidden,
            &vars.layers[i],
            model.config.n_heads,
            &positions,
            Some(&mut cache.layers[i]),
            false,
        )?;
        hidden = next;
    }
    let normed = tape.rms_norm(hidden, vars.final_norm)?;
    let logits = tape.matmul(normed, vars.unembed)?;
    Ok(tape.value(logits).clone())
}

/// Greedy argmax with ties broken toward the lower token id.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Prefill once, then greedy-decode until exactly `n_tokens` tokens exist.
pub fn generate(model: &VlmModel, input: &ModelInput, n_tokens: usize) -> Result<Vec<usize>> {
    if n_tokens == 0 {
        return Err(Error::contract("generate needs n_tokens >= 1".to_string()));
    }
    let pre = prefill(model, input)?;
    let mut cache = pre.cache;
    let mut tokens = vec![argmax(pre.logits.data())];
    while tokens.len() < n_tokens {
        let logits = decode_step(model, *tokens.last().unwrap(), &mut cache)?;
        tokens.push(argmax(logits.data()));
    }
    Ok(tokens)
}

// ── Benchmark ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub prompt_text_len: usize,
    pub gen_len: usize,
    pub batch: usize,
    pub repetitions: usize,
    pub warmup: usize,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_text_len == 0
            || self.gen_len == 0
            || self.batch == 0
            || self.repetitions == 0
            || self.warmup == 0
        {
            return Err(Error::config(
                "scenario fields must all be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Scenario echo plus the model facts a reader needs to interpret tps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchConfigEcho {
    pub strategy: String,
    pub m: usize,
    pub k: usize,
    pub n_visual: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub prompt_text_len: usize,
    pub gen_len: usize,
    pub batch: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub workers: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThroughputReport {
    /// batch * gen_len * repetitions / decode wall seconds.
    pub tps: f64,
    /// Total prefill wall milliseconds over the timed repetitions.
    pub prefill_ms: f64,
    /// Total decode wall milliseconds over the timed repetitions.
    pub decode_ms: f64,
    pub config: BenchConfigEcho,
    pub ratio_vs_baseline: Option<f64>,
    pub per_rep_tps: Vec<f64>,
    pub median_tps: f64,
    /// (max - min) / median over per-repetition tps.
    pub tps_spread: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Deterministic bench prompts (random image + random text ids).
pub fn bench_inputs(model: &VlmModel, scenario: &Scenario, seed: u64) -> Vec<ModelInput> {
    let config = &model.config;
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xbe5c);
    (0..scenario.batch)
        .map(|_| {
            let patches = Tensor::randn(
                vec![config.n_visual(), config.patch_dim],
                1.0,
                &mut rng,
            );
            let image = SyntheticImage {
                grid: config.grid,
                patches,
                labels: vec![0; config.n_visual()],
            };
            let text_ids = (0..scenario.prompt_text_len)
                .map(|_| rng.gen_range(0..config.vocab_size))
                .collect();
            ModelInput { image, text_ids }
        })
        .collect()
}

/// Run a function over each stream index on up to `workers` threads,
/// collecting results in stream order.
fn run_streams<T: Send>(
    n: usize,
    workers: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let workers = workers.max(1).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = n.div_ceil(workers);
        for (w, slot_chunk) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (off, slot) in slot_chunk.iter_mut().enumerate() {
                    *slot = Some(f(w * chunk + off));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every stream ran"))
        .collect()
}

/// Advance every stream by `steps` greedy decode tokens.
fn decode_phase(
    model: &VlmModel,
    streams: &mut [(KVCache, usize)],
    steps: usize,
    workers: usize,
) -> Result<()> {
    let n = streams.len();
    let workers = workers.max(1).min(n.max(1));
    let advance = |part: &mut [(KVCache, usize)]| -> Result<()> {
        for (cache, last) in part.iter_mut() {
            for _ in 0..steps {
                let logits = decode_step(model, *last, cache)?;
                *last = argmax(logits.data());
            }
        }
        Ok(())
    };
    if workers <= 1 {
        return advance(streams);
    }
    let failures = std::sync::Mutex::new(Vec::<Error>::new());
    std::thread::scope(|scope| {
        let chunk = n.div_ceil(workers);
        for part in streams.chunks_mut(chunk) {
            let failures = &failures;
            let advance = &advance;
            scope.spawn(move || {
                if let Err(e) = advance(part) {
                    failures.lock().unwrap().push(e);
                }
            });
        }
    });
    match failures.into_inner().unwrap().pop() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Wall-clock throughput of greedy generation under the model's strategy.
///
/// The batch runs as independent single-stream replicas, optionally in
/// parallel. Timing excludes model construction and warmup repetitions;
/// the report carries per-repetition tps plus median and spread.
pub fn bench(model: &VlmModel, scenario: &Scenario, workers: usize, seed: u64) -> Result<ThroughputReport> {
    scenario.validate()?;
    let inputs = bench_inputs(model, scenario, seed);
    let mut prefill_secs = 0.0;
    let mut decode_secs = 0.0;
    let mut per_rep_tps = Vec::with_capacity(scenario.repetitions);

    for rep in 0..scenario.warmup + scenario.repetitions {
        let t0 = Instant::now();
        let mut streams = run_streams(scenario.batch, workers, |i| {
            let pre = prefill(model, &inputs[i])?;
            let first = argmax(pre.logits.data());
            Ok((pre.cache, first))
        })?;
        let prefill_wall = t0.elapsed().as_secs_f64();

        let steps = scenario.gen_len - 1;
        let t1 = Instant::now();
        decode_phase(model, &mut streams, steps, workers)?;
        let decode_wall = t1.elapsed().as_secs_f64();

        if rep >= scenario.warmup {
            prefill_secs += prefill_wall;
            decode_secs += decode_wall;
            per_rep_tps.push((scenario.batch * scenario.gen_len) as f64 / decode_wall.max(1e-12));
        }
    }

    let total_tokens = (scenario.batch * scenario.gen_len * scenario.repetitions) as f64;
    let tps = total_tokens / decode_secs.max(1e-12);
    let mut sorted = per_rep_tps.clone();
    let median_tps = median(&mut sorted);
    let spread = if median_tps > 0.0 {
        (sorted.last().copied().unwrap_or(0.0) - sorted.first().copied().unwrap_or(0.0))
            / median_tps
    } else {
        0.0
    };
    let s = &model.config.strategy;
    Ok(ThroughputReport {
        tps,
        prefill_ms: prefill_secs * 1e3,
        decode_ms: decode_secs * 1e3,
        config: BenchConfigEcho {
            strategy: s.tag.as_str().to_string(),
            m: s.m,
            k: s.k,
            n_visual: model.config.n_visual(),
            n_layers: model.config.n_layers,
            d_model: model.config.d_model,
            prompt_text_len: scenario.prompt_text_len,
            gen_len: scenario.gen_len,
            batch: scenario.batch,
            repetitions: scenario.repetitions,
            warmup: scenario.warmup,
            workers: workers.max(1),
        },
        ratio_vs_baseline: None,
        per_rep_tps,
        median_tps,
        tps_spread: spread,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, OwnedForward};
    use crate::strategy::{StrategyConfig, StrategyTag};

    fn input_for(config: &ModelConfig, seed: u64, n_text: usize) -> ModelInput {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let image = SyntheticImage {
            grid: config.grid,
            patches: Tensor::randn(vec![config.n_visual(), config.patch_dim], 1.0, &mut rng),
            labels: vec![0; config.n_visual()],
        };
        let text_ids = (0..n_text)
            .map(|_| rng.gen_range(0..config.vocab_size))
            .collect();
        ModelInput { image, text_ids }
    }

    /// Uncached forward over prompt + generated tokens; selection queries
    /// pinned to the prompt extent so it matches the cached path.
    fn uncached_extended(
        model: &VlmModel,
        input: &ModelInput,
        generated: &[usize],
    ) -> OwnedForward {
        let mut extended = input.clone();
        extended.text_ids.extend_from_slice(generated);
        let prompt_total = model.config.n_visual()
            + prompt_register_count(model)
            + input.text_ids.len();
        let opts = ForwardOptions {
            capture: false,
            logits: LogitsSelection::All,
            fastv_query_span: Some(prompt_total),
            hidden_probe: None,
        };
        model.forward(&extended, &opts).unwrap()
    }

    fn prompt_register_count(model: &VlmModel) -> usize {
        crate::strategy::apply_strategy(&model.config)
            .unwrap()
            .registers
    }

    #[test]
    fn baseline_prefill_cache_lengths() {
        let config = ModelConfig::tiny(StrategyConfig::new(StrategyTag::Baseline));
        let model = VlmModel::new(config.clone()).unwrap();
        let input = input_for(&config, 1, 1);
        let pre = prefill(&model, &input).unwrap();
        let n = config.n_visual();
        assert_eq!(pre.cache.layer_lens(), vec![n + 1; config.n_layers]);
    }

    #[test]
    fn victor_prefill_caches_only_survivors_past_the_drop() {
        let mut s = StrategyConfig::new(StrategyTag::Victor);
        s.m = 8;
        s.k = 3;
        let mut config = ModelConfig::tiny(s);
        config.grid = 24; // N = 576
        config.n_layers = 4;
        config.vocab_size = 70;
        let model = VlmModel::new(config.clone()).unwrap();
        let input = input_for(&config, 2, 64);
        let pre = prefill(&model, &input).unwrap();
        let lens = pre.cache.layer_lens();
        assert_eq!(&lens[..3], &[648, 648, 648]);
        assert_eq!(lens[3], 72);
        assert_eq!(pre.cache.next_position(), 648);
        // Visual keys/values at layers >= k were never materialized.
        assert!(pre.cache.layers[3].position_ids.iter().all(|&p| p >= 576));
    }

    #[test]
    fn prefill_logits_match_uncached_forward() {
        for tag in StrategyTag::all() {
            let mut s = StrategyConfig::new(tag);
            s.m = 2;
            s.k = 1;
            s.fastv_keep = 2;
            let config = ModelConfig::tiny(s);
            let model = VlmModel::new(config.clone()).unwrap();
            let input = input_for(&config, 3, 4);
            let pre = prefill(&model, &input).unwrap();
            let opts = ForwardOptions {
                logits: LogitsSelection::LastOnly,
                ..ForwardOptions::default()
            };
            let full = model.forward(&input, &opts).unwrap();
            let diff = pre.logits.max_abs_diff(&full.logits).unwrap();
            assert!(diff < 1e-8, "{tag:?}: {diff}");
        }
    }

    #[test]
    fn greedy_decode_matches_uncached_extended_forward() {
        for tag in StrategyTag::all() {
            let mut s = StrategyConfig::new(tag);
            s.m = 2;
            s.k = 1;
            s.fastv_keep = 2;
            let config = ModelConfig::tiny(s);
            let model = VlmModel::new(config.clone()).unwrap();
            let input = input_for(&config, 4, 3);
            let n_gen = 4;
            let tokens = generate(&model, &input, n_gen).unwrap();
            assert_eq!(tokens.len(), n_gen);

            // Logits that produced tokens 2..n come from feeding tokens
            // 1..n-1; compare against the uncached forward over the
            // extended sequence.
            let fed = &tokens[..n_gen - 1];
            let full = uncached_extended(&model, &input, fed);
            let total = full.layout.total();
            for step in 0..n_gen - 1 {
                let row = full.logits.row(total - (n_gen - 1) + step);
                assert_eq!(argmax(row), tokens[step + 1], "{tag:?} step {step}");
            }
        }
    }

    #[test]
    fn decode_grows_every_layer_cache_by_one() {
        let mut s = StrategyConfig::new(StrategyTag::Victor);
        s.m = 2;
        s.k = 1;
        let config = ModelConfig::tiny(s);
        let model = VlmModel::new(config.clone()).unwrap();
        let input = input_for(&config, 5, 3);
        let pre = prefill(&model, &input).unwrap();
        let mut cache = pre.cache;
        let before = cache.layer_lens();
        let next = cache.next_position();
        decode_step(&model, 1, &mut cache).unwrap();
        let after = cache.layer_lens();
        for (b, a) in before.iter().zip(&after) {
            assert_eq!(b + 1, *a);
        }
        assert_eq!(cache.next_position(), next + 1);
    }

    #[test]
    fn generate_is_deterministic_and_single_token_matches_prefill() {
        let config = ModelConfig::tiny(StrategyConfig::new(StrategyTag::Baseline));
        let model = VlmModel::new(config.clone()).unwrap();
        let input = input_for(&config, 6, 3);
        let a = generate(&model, &input, 5).unwrap();
        let b = generate(&model, &input, 5).unwrap();
        assert_eq!(a, b);

        let pre = prefill(&model, &input).unwrap();
        let one = generate(&model, &input, 1).unwrap();
        assert_eq!(one, vec![argmax(pre.logits.data())]);
        assert!(matches!(
            generate(&model, &input, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn throughput_ratio_checks_scenario_and_self_ratio_is_one() {
        let config = ModelConfig::tiny(StrategyConfig::new(StrategyTag::Baseline));
        let model = VlmModel::new(config).unwrap();
        let scenario = Scenario {
            prompt_text_len: 2,
            gen_len: 2,
            batch: 1,
            repetitions: 2,
            warmup: 1,
        };
        let report = bench(&model, &scenario, 1, 0).unwrap();
        assert!((throughput_ratio(&report, &report).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(report.per_rep_tps.len(), 2);

        let other = Scenario {
            gen_len: 3,
            ..scenario
        };
        let report2 = bench(&model, &other, 1, 0).unwrap();
        assert!(matches!(
            throughput_ratio(&report2, &report),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn report_serializes_with_pinned_field_names() {
        let config = ModelConfig::tiny(StrategyConfig::new(StrategyTag::Baseline));
        let model = VlmModel::new(config).unwrap();
        let scenario = Scenario {
            prompt_text_len: 2,
            gen_len: 2,
            batch: 1,
            repetitions: 1,
            warmup: 1,
        };
        let report = bench(&model, &scenario, 1, 0).unwrap();
        let value = serde_json::to_value(&report).unwrap();
        for key in ["tps", "prefill_ms", "decode_ms", "config", "ratio_vs_baseline"] {
            assert!(value.get(key).is_some(), "missing field {key}");
        }
        let t = value["tps"].as_f64().unwrap();
        let decode_s = value["decode_ms"].as_f64().unwrap() / 1e3;
        let expect = (scenario.batch * scenario.gen_len * scenario.repetitions) as f64 / decode_s;
        assert!((t - expect).abs() / expect < 1e-9);
    }

    #[test]
    fn invalid_scenario_is_a_config_error() {
        let s = Scenario {
            prompt_text_len: 0,
            gen_len: 2,
            batch: 1,
            repetitions: 1,
            warmup: 1,
        };
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }
}

/// tps ratio against a baseline report of the same scenario.
pub fn throughput_ratio(report: &ThroughputReport, baseline: &ThroughputReport) -> Result<f64> {
    let a = &report.config;
    let b = &baseline.config;
    if (a.prompt_text_len, a.gen_len, a.batch, a.repetitions)
        != (b.prompt_text_len, b.gen_len, b.batch, b.repetitions)
    {
        return Err(Error::contract(format!(
            "scenario mismatch: {}x{} batch {} reps {} vs {}x{} batch {} reps {}",
            a.prompt_text_len,
            a.gen_len,
            a.batch,
            a.repetitions,
            b.prompt_text_len,
            b.gen_len,
            b.batch,
            b.repetitions
        )));
    }
    Ok(report.tps / baseline.tps)
}
