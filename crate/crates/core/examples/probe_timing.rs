use vtlab_core::model::{ModelConfig, VlmModel, AttentionImpl};
use vtlab_core::strategy::{StrategyConfig, StrategyTag};
use vtlab_core::trainer::{gen_dataset, timing_probe, train, StageConfig};

fn probe(tag: StrategyTag, steps: usize, question_len: usize) -> f64 {
    let mut s = StrategyConfig::new(tag);
    s.m = 8;
    s.k = 3;
    s.fastv_keep = 8;
    let config = ModelConfig {
        n_layers: 4,
        d_model: 32,
        n_heads: 8,
        d_ff: 128,
        vocab_size: 64,
        grid: 24,
        patch_dim: 16,
        d_vision: 32,
        seed: 5,
        attention_impl: AttentionImpl::Standard,
        strategy: s,
    };
    let mut model = VlmModel::new(config.clone()).unwrap();
    let data = gen_dataset(9, 8, config.grid, 8, 0.05, question_len, config.patch_dim).unwrap();
    let stage = StageConfig::finetune_default(steps, 1, 1);
    let log = train(&mut model, &data, &stage, 1).unwrap();
    timing_probe(&log, 2).unwrap().median_step_seconds
}

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(22);
    let qlen: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(256);
    let baseline = probe(StrategyTag::Baseline, steps, qlen);
    let victor = probe(StrategyTag::Victor, steps, qlen);
    let fastv = probe(StrategyTag::Fastv, steps, qlen);
    println!("baseline {baseline:.4}s victor {victor:.4}s fastv {fastv:.4}s");
    println!("victor/baseline {:.3}  fastv/victor {:.3}", victor / baseline, fastv / victor);
}
