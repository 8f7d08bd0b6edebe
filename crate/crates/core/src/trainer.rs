//! Synthetic-task data generation and the two-stage training schedule.
//!
//! The task: each image is a grid of colored cells (one palette feature
//! vector per color, plus noise), the question names a cell by row and
//! column, and the answer is that cell's color token. Answering requires
//! visual information to survive whatever reduction the strategy applies,
//! so summarization quality is directly measurable as accuracy.
//!
//! Stage 1 freezes both towers and trains the projector and registers;
//! stage 2 unfreezes the language tower. The loss is masked to the answer
//! position only, and the drop stays active during training.

use std::io::{BufRead, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ForwardOptions, LogitsSelection, ModelInput, Param, ParamGroup, SyntheticImage, VlmModel,
};
use crate::optim::{AdamWHyper, OptimizerState};
use crate::strategy::{apply_strategy, StrategyConfig};
use crate::tape::Tape;
use crate::tensor::{sample_normal, Tensor};

// ── Vocabulary layout ───────────────────────────────────────────────────

/// Token id assignment for the cell-color task.
#[derive(Clone, Copy, Debug)]
pub struct VocabLayout {
    pub colors: usize,
    pub grid: usize,
}

impl VocabLayout {
    pub const BOS: usize = 0;
    pub const PAD: usize = 1;

    pub fn new(colors: usize, grid: usize) -> Self {
        VocabLayout { colors, grid }
    }

    pub fn color(&self, c: usize) -> usize {
        2 + c
    }

    pub fn row(&self, r: usize) -> usize {
        2 + self.colors + r
    }

    pub fn col(&self, c: usize) -> usize {
        2 + self.colors + self.grid + c
    }

    /// Designated word token for the word-embedding register init.
    pub fn image_word(&self) -> usize {
        2 + self.colors + 2 * self.grid
    }

    pub fn required_vocab(&self) -> usize {
        3 + self.colors + 2 * self.grid
    }
}

// ── Data generation ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub image: SyntheticImage,
    /// Fixed-length question naming the target cell.
    pub question: Vec<usize>,
    /// Ground-truth color token id.
    pub answer: usize,
}

fn default_noise() -> f64 {
    0.05
}
fn default_question_len() -> usize {
    3
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub colors: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_question_len")]
    pub question_len: usize,
    pub train_count: usize,
    pub eval_count: usize,
}

/// Color prototype vectors, fixed independently of the dataset seed so
/// train and eval splits share ground truth.
pub fn palette(colors: usize, patch_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(0x7674_6c61_6221);
    (0..colors)
        .map(|_| (0..patch_dim).map(|_| sample_normal(&mut rng)).collect())
        .collect()
}

/// Reproducible dataset: uniform cell colors, uniform queried cells,
/// palette prototypes plus Gaussian patch noise.
pub fn gen_dataset(
    seed: u64,
    count: usize,
    grid: usize,
    colors: usize,
    noise_std: f64,
    question_len: usize,
    patch_dim: usize,
) -> Result<Vec<SyntheticSample>> {
    if colors < 2 {
        return Err(Error::config("need at least 2 colors".to_string()));
    }
    if grid < 2 {
        return Err(Error::config("need a grid of at least 2x2".to_string()));
    }
    if question_len < 3 {
        return Err(Error::config(
            "question_len must fit [BOS, row, col]".to_string(),
        ));
    }
    let vocab = VocabLayout::new(colors, grid);
    let protos = palette(colors, patch_dim);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = grid * grid;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..colors) as u8).collect();
        let mut patches = Vec::with_capacity(n * patch_dim);
        for &label in &labels {
            for &p in &protos[label as usize] {
                patches.push(p + noise_std * sample_normal(&mut rng));
            }
        }
        let row = rng.gen_range(0..grid);
        let col = rng.gen_range(0..grid);
        let mut question = vec![VocabLayout::BOS];
        question.resize(question_len - 2, VocabLayout::PAD);
        question.push(vocab.row(row));
        question.push(vocab.col(col));
        let answer = vocab.color(labels[row * grid + col] as usize);
        out.push(SyntheticSample {
            image: SyntheticImage {
                grid,
                patches: Tensor::new(vec![n, patch_dim], patches)?,
                labels,
            },
            question,
            answer,
        });
    }
    Ok(out)
}

// ── Stages ──────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    PretrainAnalog,
    FinetuneAnalog,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: StageKind,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl StageConfig {
    /// Stage-1 recipe: freeze towers, lr 1e-4, no weight decay.
    pub fn pretrain_default(steps: usize, batch_size: usize, seed: u64) -> Self {
        StageConfig {
            stage: StageKind::PretrainAnalog,
            lr: 1e-4,
            steps,
            batch_size,
            seed,
            weight_decay: 0.0,
        }
    }

    /// Stage-2 recipe: unfreeze the language tower, lr 2e-5.
    pub fn finetune_default(steps: usize, batch_size: usize, seed: u64) -> Self {
        StageConfig {
            stage: StageKind::FinetuneAnalog,
            lr: 2e-5,
            steps,
            batch_size,
            seed,
            weight_decay: 0.0,
        }
    }
}

/// Which parameters train in a stage. The vision tower is frozen in both;
/// stage 1 additionally freezes the language tower.
pub fn stage_trainable(stage: StageKind, strategy: &StrategyConfig) -> impl Fn(&Param) -> bool {
    let registers_stage2 = strategy.train_registers_stage2;
    move |p: &Param| match stage {
        StageKind::PretrainAnalog => matches!(
            p.group,
            ParamGroup::Projector | ParamGroup::Registers | ParamGroup::Resampler
        ),
        StageKind::FinetuneAnalog => match p.group {
            ParamGroup::Projector | ParamGroup::Tower | ParamGroup::Resampler => true,
            ParamGroup::Registers => registers_stage2,
            ParamGroup::Vision => false,
        },
    }
}

// ── Training ────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: StageKind,
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for s in &self.steps {
            serde_json::to_writer(&mut f, s)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &std::path::Path) -> Result<Vec<StepLog>> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut out = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line)?);
        }
        Ok(out)
    }
}

fn sample_loss_and_grads(
    model: &VlmModel,
    sample: &SyntheticSample,
    trainable: &(dyn Fn(&Param) -> bool + Sync),
    trainable_idx: &[usize],
    capture: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, &trainable);
    let mut text_ids = sample.question.clone();
    text_ids.push(sample.answer);
    let input = ModelInput {
        image: sample.image.clone(),
        text_ids,
    };
    // The answer is predicted from the preceding position.
    let opts = ForwardOptions {
        capture,
        logits: LogitsSelection::FromEnd(1),
        fastv_query_span: None,
        hidden_probe: None,
    };
    let out = model.forward_on_tape(&mut tape, &vars, &input, &opts, None)?;
    let loss = tape.cross_entropy_mean(out.logits, &[sample.answer])?;
    let loss_value = tape.value(loss).item()?;
    tape.backward(loss)?;
    let grads = trainable_idx
        .iter()
        .map(|&i| {
            tape.grad(vars.by_param[i])
                .expect("trainable parameters receive gradients")
                .to_vec()
        })
        .collect();
    Ok((loss_value, grads))
}

/// Train one stage. Only the stage's trainable set changes; gradients are
/// averaged over the batch in sample order, so the loss curve is
/// deterministic for a given seed regardless of worker count.
pub fn train(
    model: &mut VlmModel,
    dataset: &[SyntheticSample],
    stage: &StageConfig,
    workers: usize,
) -> Result<TrainLog> {
    if dataset.is_empty() {
        return Err(Error::data("training dataset is empty".to_string()));
    }
    if stage.batch_size == 0 {
        return Err(Error::config("batch_size must be positive".to_string()));
    }
    let plan = apply_strategy(&model.config)?;
    let trainable = stage_trainable(stage.stage, &model.config.strategy);
    let trainable_idx: Vec<usize> = model
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| trainable(p))
        .map(|(i, _)| i)
        .collect();
    let sizes: Vec<usize> = trainable_idx
        .iter()
        .map(|&i| model.params.at(i).tensor.numel())
        .collect();
    let hyper = AdamWHyper {
        lr: stage.lr,
        weight_decay: stage.weight_decay,
        ..AdamWHyper::default()
    };
    let mut opt = OptimizerState::new(hyper, &sizes);
    let mut rng = ChaCha20Rng::seed_from_u64(stage.seed);
    let mut log = TrainLog {
        stage: stage.stage,
        steps: Vec::with_capacity(stage.steps),
    };

    for step in 0..stage.steps {
        let t0 = Instant::now();
        let batch: Vec<usize> = (0..stage.batch_size)
            .map(|_| rng.gen_range(0..dataset.len()))
            .collect();

        let results = run_batch(model, dataset, &batch, &trainable, &trainable_idx, plan.force_capture, workers)?;

        let mut loss_sum = 0.0;
        let mut grad_acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        for (loss, grads) in &results {
            loss_sum += loss;
            for (acc, g) in grad_acc.iter_mut().zip(grads) {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
        let scale = 1.0 / stage.batch_size as f64;
        let loss = loss_sum * scale;
        if !loss.is_finite() {
            return Err(Error::data(format!(
                "training diverged: loss {loss} at step {step}"
            )));
        }
        for acc in grad_acc.iter_mut() {
            for a in acc.iter_mut() {
                *a *= scale;
            }
        }

        let mut params = model.params.select_mut(&trainable_idx);
        let grads: Vec<&[f64]> = grad_acc.iter().map(|g| g.as_slice()).collect();
        let mut refs: Vec<&mut Tensor> = params.drain(..).collect();
        opt.adamw_step(&mut refs, &grads)?;

        log.steps.push(StepLog {
            step,
            loss,
            lr: stage.lr,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}

fn run_batch(
    model: &VlmModel,
    dataset: &[SyntheticSample],
    batch: &[usize],
    trainable: &(dyn Fn(&Param) -> bool + Sync),
    trainable_idx: &[usize],
    capture: bool,
    workers: usize,
) -> Result<Vec<(f64, Vec<Vec<f64>>)>> {
    let workers = workers.max(1).min(batch.len());
    if workers <= 1 {
        return batch
            .iter()
            .map(|&i| sample_loss_and_grads(model, &dataset[i], trainable, trainable_idx, capture))
            .collect();
    }
    let mut slots: Vec<Option<Result<(f64, Vec<Vec<f64>>)>>> =
        (0..batch.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = batch.len().div_ceil(workers);
        for (w, part) in slots.chunks_mut(chunk).enumerate() {
            scope.spawn(move || {
                for (off, slot) in part.iter_mut().enumerate() {
                    let sample = &dataset[batch[w * chunk + off]];
                    *slot = Some(sample_loss_and_grads(
                        model,
                        sample,
                        trainable,
                        trainable_idx,
                        capture,
                    ));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}

// ── Evaluation ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_total: usize,
    /// accuracy / baseline accuracy, when a baseline is named.
    pub normalized_vs_baseline: Option<f64>,
}

/// Greedy-decode one answer per held-out sample, scored closed-set: the
/// argmax is taken over the color tokens (the known answer vocabulary),
/// so an untrained model sits at chance 1/C rather than at zero.
pub fn evaluate(
    model: &VlmModel,
    dataset: &[SyntheticSample],
    vocab: &VocabLayout,
) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::data("evaluation dataset is empty".to_string()));
    }
    let mut correct = 0;
    for sample in dataset {
        let input = ModelInput {
            image: sample.image.clone(),
            text_ids: sample.question.clone(),
        };
        let pre = crate::engine::prefill(model, &input)?;
        let row = pre.logits.row(0);
        let mut best = vocab.color(0);
        for c in 1..vocab.colors {
            let id = vocab.color(c);
            if row[id] > row[best] {
                best = id;
            }
        }
        if best == sample.answer {
            correct += 1;
        }
    }
    Ok(EvalResult {
        accuracy: correct as f64 / dataset.len() as f64,
        n_correct: correct,
        n_total: dataset.len(),
        normalized_vs_baseline: None,
    })
}

// ── Timing probe ────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimingProbe {
    pub stage: StageKind,
    pub steps_timed: usize,
    pub median_step_seconds: f64,
}

/// Median seconds/step after discarding `warmup` steps. Requires at least
/// 20 timed steps.
pub fn timing_probe(log: &TrainLog, warmup: usize) -> Result<TimingProbe> {
    if log.steps.len() < warmup + 20 {
        return Err(Error::contract(format!(
            "timing probe needs >= 20 timed steps after warmup; have {} with warmup {warmup}",
            log.steps.len()
        )));
    }
    let mut secs: Vec<f64> = log.steps[warmup..].iter().map(|s| s.seconds).collect();
    secs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let median = if secs.len() % 2 == 1 {
        secs[secs.len() / 2]
    } else {
        0.5 * (secs[secs.len() / 2 - 1] + secs[secs.len() / 2])
    };
    Ok(TimingProbe {
        stage: log.stage,
        steps_timed: secs.len(),
        median_step_seconds: median,
    })
}

/// Step-time ratio of `probe` against `baseline`.
pub fn step_time_ratio(probe: &TimingProbe, baseline: &TimingProbe) -> f64 {
    probe.median_step_seconds / baseline.median_step_seconds
}
