//! Measurement instruments: analytic FLOPs accounting with reduction
//! ratios, token cosine-similarity statistics, and register-to-visual
//! attention maps with image-grid back-projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{resampler_d_ff, ModelConfig, TokenLayout};
use crate::strategy::{apply_strategy, StrategyTag};
use crate::tensor::Tensor;
use crate::transformer::AttentionRecord;

// ── FLOPs ───────────────────────────────────────────────────────────────

/// Decoder-layer prefill cost at `n` tokens: `4nd^2 + 2n^2 d + 2 n d d_ff`.
///
/// This is the standard per-layer accounting formula; the gated FFN in the
/// toy layer actually multiplies three matrices, so the n^2 coefficient is
/// exact for this tower while the linear term is the literature's
/// convention (cross-checked proportionally in tests).
pub fn layer_flops(n_tokens: usize, d_model: usize, d_ff: usize) -> u64 {
    let (n, d, f) = (n_tokens as u64, d_model as u64, d_ff as u64);
    4 * n * d * d + 2 * n * n * d + 2 * n * d * f
}

/// One resampler cross-attention block at `m` queries over `n` keys.
pub fn resampler_block_flops(m: usize, n: usize, d_model: usize, d_ff: usize) -> u64 {
    let (m, n, d, f) = (m as u64, n as u64, d_model as u64, d_ff as u64);
    2 * m * d * d + 2 * n * d * d + 2 * m * n * d + 2 * m * d * f
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlopsReport {
    pub strategy: String,
    /// Token count entering each layer.
    pub token_schedule: Vec<usize>,
    pub per_layer: Vec<u64>,
    /// Strategy-added costs outside the tower (resampler blocks).
    pub added: u64,
    pub total: u64,
    pub baseline_total: u64,
    /// total / baseline_total; 1 for the baseline itself.
    pub ratio_vs_baseline: f64,
}

/// Analytic prefill FLOPs for the model's strategy at `n_text` prompt
/// tokens, with the ratio against the plain `N + L` baseline schedule.
pub fn model_flops(config: &ModelConfig, n_text: usize) -> Result<FlopsReport> {
    let plan = apply_strategy(config)?;
    let schedule = plan.token_schedule(config.n_visual(), n_text, config.n_layers);
    let per_layer: Vec<u64> = schedule
        .iter()
        .map(|&n| layer_flops(n, config.d_model, config.d_ff))
        .collect();
    let added = if config.strategy.tag == StrategyTag::Resampler {
        let dff_r = resampler_d_ff(config);
        (config.strategy.resampler_blocks as u64)
            * resampler_block_flops(config.strategy.m, config.n_visual(), config.d_model, dff_r)
    } else {
        0
    };
    let total = per_layer.iter().sum::<u64>() + added;
    let baseline_total: u64 = (0..config.n_layers)
        .map(|_| layer_flops(config.n_visual() + n_text, config.d_model, config.d_ff))
        .sum();
    Ok(FlopsReport {
        strategy: config.strategy.tag.as_str().to_string(),
        token_schedule: schedule,
        per_layer,
        added,
        total,
        baseline_total,
        ratio_vs_baseline: total as f64 / baseline_total as f64,
    })
}

// ── Token similarity ────────────────────────────────────────────────────

pub const SIMILARITY_BINS: usize = 50;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimilarityStats {
    /// Upper-triangle pairwise cosine values, row-major order.
    pub values: Vec<f64>,
    /// Fixed bins over [-1, 1].
    pub histogram: Vec<u64>,
    pub mean: f64,
    pub fraction_above_0_8: f64,
}

/// All-pairs cosine similarity over the rows of `tokens`.
pub fn cosine_similarity_stats(tokens: &Tensor) -> Result<SimilarityStats> {
    let (n, _d) = tokens.dims2()?;
    if n < 2 {
        return Err(Error::data(format!(
            "similarity needs at least 2 tokens, got {n}"
        )));
    }
    let norms: Vec<f64> = (0..n)
        .map(|i| tokens.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(row) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::data(format!("zero-norm token row {row}")));
    }
    let mut values = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let dot: f64 = tokens.row(i).iter().zip(tokens.row(j)).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values.push(c);
        }
    }
    let mut histogram = vec![0u64; SIMILARITY_BINS];
    for &v in &values {
        let idx = (((v + 1.0) / 2.0) * SIMILARITY_BINS as f64) as usize;
        histogram[idx.min(SIMILARITY_BINS - 1)] += 1;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let above = values.iter().filter(|&&v| v > 0.8).count();
    Ok(SimilarityStats {
        fraction_above_0_8: above as f64 / values.len() as f64,
        mean,
        histogram,
        values,
    })
}

// ── Register attention maps ─────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerRegisterMap {
    pub layer: usize,
    pub n_registers: usize,
    pub n_visual: usize,
    /// `[m, n]` head-averaged attention mass from register queries to
    /// visual keys, row-major.
    pub matrix: Vec<f64>,
    /// Mean over registers of total mass on the visual span.
    pub mean_visual_mass: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegisterAttentionMap {
    pub layers: Vec<LayerRegisterMap>,
}

/// Restrict register-query rows to visual-key columns, averaged over
/// heads, for layers `0..k` (the pre-drop layers).
pub fn register_attention_map(
    records: &[AttentionRecord],
    layout: &TokenLayout,
    k: usize,
) -> Result<RegisterAttentionMap> {
    if layout.dropped {
        return Err(Error::contract(
            "register map needs the pre-drop layout".to_string(),
        ));
    }
    let (n, m) = (layout.n_visual, layout.n_registers);
    if m == 0 {
        return Err(Error::contract("layout has no register span".to_string()));
    }
    let mut layers = Vec::with_capacity(k);
    for layer in 0..k {
        let record = records
            .iter()
            .find(|r| r.layer == layer)
            .ok_or_else(|| Error::contract(format!("missing attention record for layer {layer}")))?;
        if record.q_len() != layout.total() || record.kv_len() != layout.total() {
            return Err(Error::contract(format!(
                "record {} is {}x{}, layout expects {}",
                layer,
                record.q_len(),
                record.kv_len(),
                layout.total()
            )));
        }
        let heads = record.n_heads();
        let mut matrix = vec![0.0; m * n];
        let mut mass = 0.0;
        for reg in 0..m {
            let q = layout.n_visual + reg;
            for v in 0..n {
                let sum: f64 = (0..heads).map(|h| record.row(h, q)[v]).sum();
                matrix[reg * n + v] = sum / heads as f64;
            }
            mass += matrix[reg * n..(reg + 1) * n].iter().sum::<f64>();
        }
        layers.push(LayerRegisterMap {
            layer,
            n_registers: m,
            n_visual: n,
            matrix,
            mean_visual_mass: mass / m as f64,
        });
    }
    Ok(RegisterAttentionMap { layers })
}

/// Row-major reshape of a length-`g^2` attention row onto the image grid.
pub fn attention_to_grid(row: &[f64], grid: usize) -> Result<Vec<Vec<f64>>> {
    if grid * grid != row.len() {
        return Err(Error::contract(format!(
            "row length {} is not grid {grid} squared",
            row.len()
        )));
    }
    Ok((0..grid)
        .map(|r| row[r * grid..(r + 1) * grid].to_vec())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::StrategyConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn layer_flops_hand_case() {
        // 4*1*4 + 2*1*2 + 2*1*2*4 = 36
        assert_eq!(layer_flops(1, 2, 4), 36);
        assert_eq!(layer_flops(0, 64, 256), 0);
    }

    /// Walk the toy layer's exact matmul loop nests (q/k/v/o projections,
    /// per-head scores and mixing, gated FFN) counting one multiply per
    /// innermost iteration.
    fn instrumented_layer_macs(n: usize, d: usize, d_ff: usize) -> u64 {
        let mut macs = 0u64;
        let mut mm = |r: usize, inner: usize, cols: usize| {
            for _ in 0..r {
                for _ in 0..inner {
                    for _ in 0..cols {
                        macs += 1;
                    }
                }
            }
        };
        for _proj in 0..4 {
            mm(n, d, d); // wq, wk, wv, wo
        }
        let heads = 2;
        let hd = d / heads;
        for _h in 0..heads {
            mm(n, n, hd); // scores: q . k^T
            mm(n, n, hd); // mix: probs . v
        }
        mm(n, d, d_ff); // gate
        mm(n, d, d_ff); // up
        mm(n, d_ff, d); // down
        macs
    }

    #[test]
    fn quadratic_coefficient_matches_instrumented_count() {
        // f(2n) - 2 f(n) isolates the n^2 term; it must agree exactly
        // between the pinned formula and the instrumented MAC count.
        for (n, d, f) in [(4usize, 8usize, 16usize), (10, 16, 64), (7, 32, 128)] {
            let formula = layer_flops(2 * n, d, f) as i128 - 2 * layer_flops(n, d, f) as i128;
            let inst = instrumented_layer_macs(2 * n, d, f) as i128
                - 2 * instrumented_layer_macs(n, d, f) as i128;
            assert_eq!(formula, inst);
        }
        // Doubling n less than quadruples the count when the linear terms
        // dominate.
        let f1 = layer_flops(8, 64, 256);
        let f2 = layer_flops(16, 64, 256);
        assert!(f2 < 4 * f1);
        assert_eq!(f2, layer_flops(16, 64, 256));
    }

    #[test]
    fn baseline_flops_ratio_is_one() {
        let config = ModelConfig::toy(StrategyConfig::new(StrategyTag::Baseline));
        let report = model_flops(&config, 64).unwrap();
        assert_eq!(report.total, report.baseline_total);
        assert_eq!(report.ratio_vs_baseline, 1.0);
        assert_eq!(report.added, 0);
    }

    #[test]
    fn victor_ratio_exceeds_fastv_at_equal_final_budget() {
        let mut vs = StrategyConfig::new(StrategyTag::Victor);
        vs.m = 8;
        vs.k = 3;
        let victor = model_flops(&ModelConfig::toy(vs), 64).unwrap();
        let mut fs = StrategyConfig::new(StrategyTag::Fastv);
        fs.fastv_keep = 8;
        fs.k = 3;
        let fastv = model_flops(&ModelConfig::toy(fs), 64).unwrap();
        assert!(victor.ratio_vs_baseline > fastv.ratio_vs_baseline);
        assert!(victor.ratio_vs_baseline < 1.0);
    }

    #[test]
    fn model_flops_equals_per_layer_summation() {
        let mut s = StrategyConfig::new(StrategyTag::Victor);
        s.m = 4;
        s.k = 2;
        let config = ModelConfig::toy(s);
        let report = model_flops(&config, 10).unwrap();
        let by_hand: u64 = report
            .token_schedule
            .iter()
            .map(|&n| layer_flops(n, config.d_model, config.d_ff))
            .sum();
        assert_eq!(report.total, by_hand + report.added);
    }

    #[test]
    fn cosine_identical_rows_are_one_orthogonal_are_zero() {
        let same = Tensor::new(vec![3, 2], vec![1., 2., 1., 2., 1., 2.]).unwrap();
        let stats = cosine_similarity_stats(&same).unwrap();
        assert!(stats.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(stats.histogram.iter().sum::<u64>(), 3);
        assert_eq!(*stats.histogram.last().unwrap(), 3);

        let ortho = Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        let stats = cosine_similarity_stats(&ortho).unwrap();
        assert!(stats.values.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn cosine_matches_direct_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let t = Tensor::randn(vec![8, 4], 1.0, &mut rng);
        let stats = cosine_similarity_stats(&t).unwrap();
        let mut idx = 0;
        for i in 0..8 {
            for j in (i + 1)..8 {
                let dot: f64 = t.row(i).iter().zip(t.row(j)).map(|(a, b)| a * b).sum();
                let ni = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                let nj = t.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((stats.values[idx] - dot / (ni * nj)).abs() < 1e-12);
                idx += 1;
            }
        }
        assert_eq!(idx, stats.values.len());
        assert_eq!(stats.histogram.iter().sum::<u64>(), (8 * 7 / 2) as u64);
    }

    #[test]
    fn cosine_zero_norm_row_is_named() {
        let t = Tensor::new(vec![3, 2], vec![1., 0., 0., 0., 1., 1.]).unwrap();
        match cosine_similarity_stats(&t) {
            Err(Error::Data(msg)) => assert!(msg.contains("row 1")),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    fn uniform_record(layout: &TokenLayout, heads: usize) -> AttentionRecord {
        // Causal uniform attention: query q spreads 1/(q+1) over keys 0..=q.
        let t = layout.total();
        let mut data = vec![0.0; heads * t * t];
        for h in 0..heads {
            for q in 0..t {
                for j in 0..=q {
                    data[(h * t + q) * t + j] = 1.0 / (q + 1) as f64;
                }
            }
        }
        AttentionRecord {
            layer: 0,
            probs: Tensor::new(vec![heads, t, t], data).unwrap(),
        }
    }

    #[test]
    fn uniform_attention_gives_uniform_map_entries() {
        let layout = TokenLayout::new(4, 2, 3);
        let rec = uniform_record(&layout, 2);
        let map = register_attention_map(&[rec], &layout, 1).unwrap();
        let lm = &map.layers[0];
        // Register r sits at position 4 + r and attends 4 + r + 1 keys.
        for reg in 0..2 {
            let expect = 1.0 / (4 + reg + 1) as f64;
            for v in 0..4 {
                assert!((lm.matrix[reg * 4 + v] - expect).abs() < 1e-12);
            }
        }
        let mass0 = 4.0 / 5.0;
        let mass1 = 4.0 / 6.0;
        assert!((lm.mean_visual_mass - 0.5 * (mass0 + mass1)).abs() < 1e-12);
    }

    #[test]
    fn fixated_attention_lights_one_column() {
        let layout = TokenLayout::new(3, 1, 1);
        let t = layout.total();
        let mut data = vec![0.0; t * t];
        for q in 0..t {
            data[q * t] = 1.0; // everything on visual token 0
        }
        // Make rows causal-legal for q=0.
        let rec = AttentionRecord {
            layer: 0,
            probs: Tensor::new(vec![1, t, t], data).unwrap(),
        };
        let map = register_attention_map(&[rec], &layout, 1).unwrap();
        let lm = &map.layers[0];
        assert_eq!(lm.matrix[0], 1.0);
        assert_eq!(lm.matrix[1], 0.0);
        assert_eq!(lm.matrix[2], 0.0);
    }

    #[test]
    fn map_extraction_is_lossless_slicing() {
        let layout = TokenLayout::new(4, 2, 2);
        let rec = uniform_record(&layout, 3);
        let map = register_attention_map(&[rec.clone()], &layout, 1).unwrap();
        let lm = &map.layers[0];
        for reg in 0..2 {
            for v in 0..4 {
                let direct: f64 = (0..3).map(|h| rec.row(h, 4 + reg)[v]).sum::<f64>() / 3.0;
                assert_eq!(lm.matrix[reg * 4 + v], direct);
            }
        }
    }

    #[test]
    fn missing_layer_record_is_a_contract_error() {
        let layout = TokenLayout::new(4, 2, 2);
        let rec = uniform_record(&layout, 1);
        assert!(matches!(
            register_attention_map(&[rec], &layout, 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn grid_reshape_round_trips() {
        let row = [1.0, 2.0, 3.0, 4.0];
        let grid = attention_to_grid(&row, 2).unwrap();
        assert_eq!(grid, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let flat: Vec<f64> = grid.into_iter().flatten().collect();
        assert_eq!(flat, row);
        assert!(matches!(
            attention_to_grid(&row[..3], 2),
            Err(Error::Contract(_))
        ));
        // Hot index j lands at (j / g, j % g).
        let mut row = vec![0.0; 9];
        row[5] = 1.0;
        let grid = attention_to_grid(&row, 3).unwrap();
        assert_eq!(grid[5 / 3][5 % 3], 1.0);
    }
}
