use vtlab_core::model::{AttentionImpl, ModelConfig, VlmModel};
use vtlab_core::strategy::{StrategyConfig, StrategyTag};
use vtlab_core::trainer::{evaluate, gen_dataset, train, StageConfig, VocabLayout};

fn main() {
    // args: tag n d d_ff heads steps1 steps2 lr1 lr2 batch [seed]
    let a: Vec<String> = std::env::args().collect();
    let tag = match a[1].as_str() {
        "victor" => StrategyTag::Victor,
        "fastv" => StrategyTag::Fastv,
        _ => StrategyTag::Baseline,
    };
    let n: usize = a[2].parse().unwrap();
    let d: usize = a[3].parse().unwrap();
    let d_ff: usize = a[4].parse().unwrap();
    let heads: usize = a[5].parse().unwrap();
    let steps1: usize = a[6].parse().unwrap();
    let steps2: usize = a[7].parse().unwrap();
    let lr1: f64 = a[8].parse().unwrap();
    let lr2: f64 = a[9].parse().unwrap();
    let batch: usize = a[10].parse().unwrap();
    let seed: u64 = a.get(11).map(|s| s.parse().unwrap()).unwrap_or(42);

    let mut s = StrategyConfig::new(tag);
    s.m = 8;
    s.k = 3;
    s.fastv_keep = 8;
    let config = ModelConfig {
        n_layers: n,
        d_model: d,
        n_heads: heads,
        d_ff,
        vocab_size: 32,
        grid: 8,
        patch_dim: 16,
        d_vision: 32,
        seed,
        attention_impl: AttentionImpl::Standard,
        strategy: s,
    };
    let t0 = std::time::Instant::now();
    let mut model = VlmModel::new(config.clone()).unwrap();
    let data = gen_dataset(seed ^ 0xd47a, 8192, 8, 8, 0.05, 3, 16).unwrap();
    let eval_data = gen_dataset(seed ^ 0xe7a1, 512, 8, 8, 0.05, 3, 16).unwrap();

    let mut st1 = StageConfig::pretrain_default(steps1, batch, seed + 1);
    st1.lr = lr1;
    let log1 = train(&mut model, &data, &st1, 1).unwrap();
    let mut st2 = StageConfig::finetune_default(steps2, batch, seed + 2);
    st2.lr = lr2;
    let log2 = train(&mut model, &data, &st2, 1).unwrap();

    let vocab = VocabLayout::new(8, 8);
    let result = evaluate(&model, &eval_data, &vocab).unwrap();
    let early: f64 = log2.steps.iter().take(20).map(|s| s.loss).sum::<f64>() / 20.0;
    let late: f64 = log2.steps.iter().rev().take(20).map(|s| s.loss).sum::<f64>() / 20.0;
    println!(
        "{} n{} d{} ff{} h{} s{}+{} lr {}/{} b{} seed{} | loss1_end {:.3} loss2 {:.3}->{:.3} | acc {:.4} | {:.0}s",
        a[1], n, d, d_ff, heads, steps1, steps2, lr1, lr2, batch, seed,
        log1.steps.last().map(|s| s.loss).unwrap_or(0.0),
        early, late, result.accuracy, t0.elapsed().as_secs_f64()
    );
}
