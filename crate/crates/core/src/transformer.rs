//! Causal decoder building blocks: masks, attention records, and the
//! pre-norm decoder layer.
//!
//! A layer is a pure function of its weights; the same code path serves
//! uncached full-sequence forwards, cache-populating prefills, and
//! single-token decode steps. Position ids are explicit everywhere so that
//! tokens keep their original rotary positions after a drop.

use crate::error::{Error, Result};
use crate::tape::{Mask, Tape, Var, MASK_SENTINEL};
use crate::tensor::Tensor;

/// Additive causal mask: query row `i` (at slot `q_offset + i`) may attend
/// key slots `j <= q_offset + i`. Allowed entries are 0, disallowed ones
/// the negative sentinel.
pub fn causal_mask(q_len: usize, kv_len: usize, q_offset: usize) -> Result<Tensor> {
    if q_offset + q_len > kv_len {
        return Err(Error::contract(format!(
            "causal_mask: offset {q_offset} + q_len {q_len} exceeds kv_len {kv_len}"
        )));
    }
    let mut data = vec![0.0; q_len * kv_len];
    for i in 0..q_len {
        for j in (q_offset + i + 1)..kv_len {
            data[i * kv_len + j] = MASK_SENTINEL;
        }
    }
    Tensor::new(vec![q_len, kv_len], data)
}

/// Post-softmax attention probabilities captured at one layer.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub layer: usize,
    /// `[n_heads, q_len, kv_len]`
    pub probs: Tensor,
}

impl AttentionRecord {
    pub fn n_heads(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn q_len(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn kv_len(&self) -> usize {
        self.probs.shape()[2]
    }

    /// One query row of one head.
    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let (h, q, kv) = (self.n_heads(), self.q_len(), self.kv_len());
        debug_assert!(head < h && query < q);
        let base = (head * q + query) * kv;
        &self.probs.data()[base..base + kv]
    }
}

/// Per-layer key/value store with the retained original position ids.
#[derive(Clone, Debug)]
pub struct LayerKV {
    pub k: Tensor,
    pub v: Tensor,
    pub position_ids: Vec<usize>,
}

impl LayerKV {
    pub fn empty(d_model: usize) -> Self {
        LayerKV {
            k: Tensor::zeros(vec![0, d_model]),
            v: Tensor::zeros(vec![0, d_model]),
            position_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.position_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position_ids.is_empty()
    }

    pub fn append(&mut self, k: &Tensor, v: &Tensor, positions: &[usize]) -> Result<()> {
        if k.shape() != v.shape() || k.n_rows() != positions.len() {
            return Err(Error::cache(format!(
                "cache append: k {:?}, v {:?}, {} positions",
                k.shape(),
                v.shape(),
                positions.len()
            )));
        }
        if let Some(&last) = self.position_ids.last() {
            if let Some(&first) = positions.first() {
                if first <= last {
                    return Err(Error::cache(format!(
                        "cache position ids must be strictly increasing: {last} then {first}"
                    )));
                }
            }
        }
        self.k.append_rows(k).map_err(|e| Error::cache(e.to_string()))?;
        self.v.append_rows(v).map_err(|e| Error::cache(e.to_string()))?;
        self.position_ids.extend_from_slice(positions);
        Ok(())
    }
}

/// Tape handles for one decoder layer's weights.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
    pub norm_attn: Var,
    pub norm_ffn: Var,
}

/// Pre-norm residual decoder layer: norm → attention → residual,
/// norm → gated FFN → residual.
///
/// With a cache, the freshly computed keys/values are appended and
/// attention runs over the full cache (queries sit at the tail). Without
/// one, attention runs over the current sequence with a plain causal mask.
/// Returns the new hidden state and, when `capture` is set, the
/// post-softmax attention probabilities.
pub fn decoder_layer(
    tape: &mut Tape,
    hidden: Var,
    layer: &LayerVars,
    n_heads: usize,
    positions: &[usize],
    cache: Option<&mut LayerKV>,
    capture: bool,
) -> Result<(Var, Option<Tensor>)> {
    let (t_len, _) = tape.value(hidden).dims2()?;
    if positions.len() != t_len {
        return Err(Error::shape(format!(
            "decoder_layer: {} positions for {} rows",
            positions.len(),
            t_len
        )));
    }

    let normed = tape.rms_norm(hidden, layer.norm_attn)?;
    let q = tape.matmul(normed, layer.wq)?;
    let k = tape.matmul(normed, layer.wk)?;
    let v = tape.matmul(normed, layer.wv)?;
    let q = tape.rope(q, n_heads, positions)?;
    let k = tape.rope(k, n_heads, positions)?;

    let (attn_out, probs) = match cache {
        Some(kv) => {
            kv.append(tape.value(k), tape.value(v), positions)?;
            let q_offset = kv.len() - t_len;
            let k_all = tape.constant(kv.k.clone());
            let v_all = tape.constant(kv.v.clone());
            tape.attention(q, k_all, v_all, n_heads, Mask::Causal { q_offset }, capture)?
        }
        None => tape.attention(q, k, v, n_heads, Mask::Causal { q_offset: 0 }, capture)?,
    };
    let o = tape.matmul(attn_out, layer.wo)?;
    let hidden = tape.add(hidden, o)?;

    let normed = tape.rms_norm(hidden, layer.norm_ffn)?;
    let gate = tape.matmul(normed, layer.w_gate)?;
    let gate = tape.silu(gate);
    let up = tape.matmul(normed, layer.w_up)?;
    let act = tape.mul(gate, up)?;
    let ffn = tape.matmul(act, layer.w_down)?;
    let hidden = tape.add(hidden, ffn)?;
    Ok((hidden, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const D: usize = 8;
    const HEADS: usize = 2;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    struct OwnedLayer {
        weights: Vec<Tensor>,
    }

    impl OwnedLayer {
        fn random(rng: &mut ChaCha20Rng, d: usize, d_ff: usize) -> Self {
            let mut weights: Vec<Tensor> = (0..4).map(|_| Tensor::randn(vec![d, d], 0.2, rng)).collect();
            weights.push(Tensor::randn(vec![d, d_ff], 0.2, rng));
            weights.push(Tensor::randn(vec![d, d_ff], 0.2, rng));
            weights.push(Tensor::randn(vec![d_ff, d], 0.2, rng));
            weights.push(Tensor::full(vec![d], 1.0));
            weights.push(Tensor::full(vec![d], 1.0));
            OwnedLayer { weights }
        }

        fn zeros(d: usize, d_ff: usize) -> Self {
            let mut weights: Vec<Tensor> = (0..4).map(|_| Tensor::zeros(vec![d, d])).collect();
            weights.push(Tensor::zeros(vec![d, d_ff]));
            weights.push(Tensor::zeros(vec![d, d_ff]));
            weights.push(Tensor::zeros(vec![d_ff, d]));
            weights.push(Tensor::full(vec![d], 1.0));
            weights.push(Tensor::full(vec![d], 1.0));
            OwnedLayer { weights }
        }

        fn bind(&self, tape: &mut Tape) -> LayerVars {
            let v: Vec<Var> = self.weights.iter().map(|w| tape.constant(w.clone())).collect();
            LayerVars {
                wq: v[0],
                wk: v[1],
                wv: v[2],
                wo: v[3],
                w_gate: v[4],
                w_up: v[5],
                w_down: v[6],
                norm_attn: v[7],
                norm_ffn: v[8],
            }
        }
    }

    #[test]
    fn causal_mask_matches_expected_pattern() {
        let m = causal_mask(3, 3, 0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v = m.data()[i * 3 + j];
                if j <= i {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, MASK_SENTINEL);
                }
            }
        }
    }

    #[test]
    fn causal_mask_decode_row_is_all_allowed() {
        let m = causal_mask(1, 10, 9).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causal_mask_prefill_rows_equal_per_step_decode_masks() {
        let full = causal_mask(5, 5, 0).unwrap();
        for i in 0..5 {
            let step = causal_mask(1, 5, i).unwrap();
            assert_eq!(&full.data()[i * 5..(i + 1) * 5], step.data());
        }
    }

    #[test]
    fn causal_mask_rejects_offset_overflow() {
        assert!(matches!(causal_mask(3, 3, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_weight_layer_is_identity() {
        let layer = OwnedLayer::zeros(D, 16);
        let x = Tensor::randn(vec![4, D], 1.0, &mut rng(0));
        let mut tape = Tape::no_grad();
        let lv = layer.bind(&mut tape);
        let xv = tape.leaf(x.clone(), false);
        let (out, _) = decoder_layer(&mut tape, xv, &lv, HEADS, &[0, 1, 2, 3], None, false).unwrap();
        assert!(tape.value(out).bit_eq(&x));
    }

    #[test]
    fn cached_stepwise_pass_matches_uncached_full_pass() {
        let mut r = rng(1);
        let layer = OwnedLayer::random(&mut r, D, 16);
        let x = Tensor::randn(vec![5, D], 1.0, &mut r);
        let positions: Vec<usize> = vec![3, 4, 8, 9, 10]; // noncontiguous on purpose

        let mut tape = Tape::no_grad();
        let lv = layer.bind(&mut tape);
        let xv = tape.leaf(x.clone(), false);
        let (full, _) = decoder_layer(&mut tape, xv, &lv, HEADS, &positions, None, false).unwrap();
        let full = tape.value(full).clone();

        let mut cache = LayerKV::empty(D);
        let mut stepped = Vec::new();
        for i in 0..5 {
            let mut tape = Tape::no_grad();
            let lv = layer.bind(&mut tape);
            let row = Tensor::new(vec![1, D], x.row(i).to_vec()).unwrap();
            let rv = tape.leaf(row, false);
            let (out, _) = decoder_layer(
                &mut tape,
                rv,
                &lv,
                HEADS,
                &positions[i..i + 1],
                Some(&mut cache),
                false,
            )
            .unwrap();
            stepped.extend_from_slice(tape.value(out).data());
        }
        let stepped = Tensor::new(vec![5, D], stepped).unwrap();
        assert!(full.max_abs_diff(&stepped).unwrap() < 1e-10);
    }

    #[test]
    fn capture_produces_rows_summing_to_one() {
        let mut r = rng(2);
        let layer = OwnedLayer::random(&mut r, D, 16);
        let x = Tensor::randn(vec![6, D], 1.0, &mut r);
        let mut tape = Tape::no_grad();
        let lv = layer.bind(&mut tape);
        let xv = tape.leaf(x, false);
        let positions: Vec<usize> = (0..6).collect();
        let (_, probs) = decoder_layer(&mut tape, xv, &lv, HEADS, &positions, None, true).unwrap();
        let rec = AttentionRecord {
            layer: 0,
            probs: probs.unwrap(),
        };
        for h in 0..HEADS {
            for q in 0..6 {
                let row = rec.row(h, q);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-10);
                for (j, &p) in row.iter().enumerate() {
                    if j > q {
                        assert_eq!(p, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn capture_flag_never_changes_layer_output() {
        let mut r = rng(3);
        let layer = OwnedLayer::random(&mut r, D, 16);
        let x = Tensor::randn(vec![4, D], 1.0, &mut r);
        let positions: Vec<usize> = (0..4).collect();
        let run = |capture: bool| {
            let mut tape = Tape::no_grad();
            let lv = layer.bind(&mut tape);
            let xv = tape.leaf(x.clone(), false);
            let (out, _) =
                decoder_layer(&mut tape, xv, &lv, HEADS, &positions, None, capture).unwrap();
            tape.value(out).clone()
        };
        assert!(run(false).bit_eq(&run(true)));
    }

    #[test]
    fn cache_append_rejects_nonincreasing_positions() {
        let mut cache = LayerKV::empty(D);
        let k = Tensor::zeros(vec![2, D]);
        let v = Tensor::zeros(vec![2, D]);
        cache.append(&k, &v, &[4, 7]).unwrap();
        let err = cache.append(&k, &v, &[7, 8]).unwrap_err();
        assert!(matches!(err, Error::Cache(_)));
    }
}
