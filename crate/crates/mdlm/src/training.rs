//! Three-stage training driver over synthetic audio-text tasks.
//!
//! Stage 1 (align) fine-tunes the whole pipeline; stages 2 and 3 freeze the
//! base model and train LoRA adapters (q,v then all-linear). The optimizer
//! is plain gradient descent with decoupled weight decay; the learning rate
//! follows a linear warmup into a cosine decay that ends at 10% of peak.

use crate::audio::{sine, MelExtractor, MelSpectrogram, Waveform, TARGET_SAMPLE_RATE};
use crate::config::ModelConfig;
use crate::decoder::TokenSequence;
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraConfig, LoraTarget};
use crate::model::Model;
use crate::nn::graph::Graph;
use crate::nn::layers::TapeDropout;
use crate::nn::rng::ModelRng;
use crate::tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Align,
    Pretrain,
    Sft,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Align => "align",
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    /// Encoder + projector + decoder base weights.
    Full,
    /// Attached adapter tensors only; base bytes stay untouched.
    LoraOnly,
}

/// Reference warmup length for full-scale runs; desk-scale runs shrink it
/// proportionally (see [`StageConfig::warmup_steps`]).
pub const REFERENCE_WARMUP: usize = 1000;

#[derive(Debug, Clone)]
pub struct StageConfig {
    pub stage: Stage,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub lora_target: Option<LoraTarget>,
    pub trainable: Trainable,
    pub seed: u64,
}

impl StageConfig {
    pub fn defaults(stage: Stage) -> StageConfig {
        match stage {
            Stage::Align => StageConfig {
                stage,
                peak_lr: 0.3,
                weight_decay: 0.0,
                batch_size: 8,
                total_steps: 1200,
                lora_target: None,
                trainable: Trainable::Full,
                seed: 0,
            },
            Stage::Pretrain => StageConfig {
                stage,
                peak_lr: 1e-4,
                weight_decay: 0.01,
                batch_size: 10,
                total_steps: 200,
                lora_target: Some(LoraTarget::Qv),
                trainable: Trainable::LoraOnly,
                seed: 0,
            },
            Stage::Sft => StageConfig {
                stage,
                peak_lr: 1e-5,
                weight_decay: 0.1,
                batch_size: 8,
                total_steps: 200,
                lora_target: Some(LoraTarget::AllLinear),
                trainable: Trainable::LoraOnly,
                seed: 0,
            },
        }
    }

    /// 1000 steps at full scale; max(10, total/10) when the run is shorter
    /// than ten reference warmups, never exceeding the run itself.
    pub fn warmup_steps(&self) -> usize {
        let w = if self.total_steps >= 10 * REFERENCE_WARMUP {
            REFERENCE_WARMUP
        } else {
            (self.total_steps / 10).max(10)
        };
        w.min(self.total_steps)
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to 10% of peak.
pub fn lr_schedule(step: usize, cfg: &StageConfig) -> Result<f64> {
    let total = cfg.total_steps;
    if step > total {
        return Err(Error::InvalidArgument(format!(
            "step {} out of range 0..={}",
            step, total
        )));
    }
    let warmup = cfg.warmup_steps();
    if step < warmup {
        return Ok(cfg.peak_lr * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(cfg.peak_lr);
    }
    let floor = 0.1 * cfg.peak_lr;
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(floor + 0.5 * (cfg.peak_lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

// ── Synthetic tasks ────────────────────────────────────────────────────

pub const N_BINS: usize = 16;
pub const ASR_PROMPT: &str = "transcribe:";
pub const CAPTION_PROMPT: &str = "caption:";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    AsrLike,
    CaptionLike,
}

impl TaskKind {
    pub fn prompt(&self) -> &'static str {
        match self {
            TaskKind::AsrLike => ASR_PROMPT,
            TaskKind::CaptionLike => CAPTION_PROMPT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthTask {
    pub kind: TaskKind,
    pub seed: u64,
    pub count: usize,
}

/// One training pair: tone-sequence audio plus its textual target.
#[derive(Debug, Clone)]
pub struct SynthItem {
    pub bins: Vec<usize>,
    pub wave: Waveform,
    pub mel: MelSpectrogram,
    pub text: TokenSequence,
    pub target: String,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub kind: TaskKind,
    pub items: Vec<SynthItem>,
}

/// Log-spaced tone frequency for a bin index.
pub fn bin_frequency(bin: usize) -> f64 {
    125.0 * (6000.0f64 / 125.0).powf(bin as f64 / (N_BINS - 1) as f64)
}

/// Per-segment bin symbols in temporal order, e.g. [2,7,2] -> "2 7 2".
pub fn asr_target(bins: &[usize]) -> String {
    bins.iter()
        .map(|b| b.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Sorted (bin, count) histogram, e.g. [2,7,2] -> "2:2 7:1".
pub fn caption_target(bins: &[usize]) -> String {
    let mut counts = [0usize; N_BINS];
    for &b in bins {
        counts[b] += 1;
    }
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(b, &c)| format!("{b}:{c}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Token sequence for one item: BOS + prompt bytes (mask 0), target bytes +
/// EOS (mask 1).
pub fn item_tokens(kind: TaskKind, target: &str) -> TokenSequence {
    let mut prompt = vec![tokenizer::BOS];
    prompt.extend(tokenizer::encode_text(kind.prompt()));
    let mut tgt = tokenizer::encode_text(target);
    tgt.push(tokenizer::EOS);
    TokenSequence::prompt_and_target(&prompt, &tgt)
}

/// Build one item; audio depends only on (seed, index), so the two task
/// kinds see identical waveforms and differ only in their targets.
pub fn synth_item(
    kind: TaskKind,
    seed: u64,
    index: usize,
    extractor: &MelExtractor,
) -> Result<SynthItem> {
    let mut rng = ModelRng::fork(seed, index as u64 + 1);
    let segments = rng.range_inclusive(3, 8);
    let mut bins = Vec::with_capacity(segments);
    let mut samples = Vec::new();
    for _ in 0..segments {
        let bin = rng.below(N_BINS);
        let dur = rng.uniform(0.2, 0.5);
        bins.push(bin);
        samples.extend(sine(bin_frequency(bin), dur, 0.5, TARGET_SAMPLE_RATE));
    }
    let wave = Waveform::new(samples, TARGET_SAMPLE_RATE)?;
    let mel = extractor.log_mel(&wave)?;
    let target = match kind {
        TaskKind::AsrLike => asr_target(&bins),
        TaskKind::CaptionLike => caption_target(&bins),
    };
    let text = item_tokens(kind, &target);
    Ok(SynthItem {
        bins,
        wave,
        mel,
        text,
        target,
    })
}

/// Deterministic pre-built dataset of `count` items.
pub fn synth_dataset(task: &SynthTask) -> Result<SynthDataset> {
    if task.count == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one item".to_string()));
    }
    let extractor = MelExtractor::new();
    let items = (0..task.count)
        .map(|index| synth_item(task.kind, task.seed, index, &extractor))
        .collect::<Result<_>>()?;
    Ok(SynthDataset {
        kind: task.kind,
        items,
    })
}

// ── Training loop ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct StepRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct StageReport {
    pub rows: Vec<StepRow>,
}

impl StageReport {
    pub fn final_window_mean(&self, window: usize) -> f64 {
        let n = self.rows.len().min(window).max(1);
        let tail = &self.rows[self.rows.len() - n..];
        tail.iter().map(|r| r.loss).sum::<f64>() / n as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,lr\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// One optimization step over a batch: forward, mean cross-entropy,
/// backward, decoupled-weight-decay update of the trainable set.
pub fn train_step(
    model: &mut Model<f32>,
    batch: &[&SynthItem],
    cfg: &StageConfig,
    lr: f64,
    dropout_rng: &mut ModelRng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".to_string()));
    }
    let mut g: Graph<f32> = Graph::new();
    let dropout_rate = model
        .decoder
        .adapter
        .as_ref()
        .map(|a| a.cfg.dropout)
        .unwrap_or(0.0);

    let full = cfg.trainable == Trainable::Full;
    let (enc_nodes, proj_nodes) = if full {
        (
            Some(model.encoder.bind(&mut g, "encoder")),
            Some(model.projector.bind(&mut g, "projector")),
        )
    } else {
        (None, None)
    };
    let dec_nodes = model
        .decoder
        .bind(&mut g, "decoder", full, cfg.trainable == Trainable::LoraOnly);

    let mut losses = Vec::with_capacity(batch.len());
    for item in batch {
        let audio_node = if full {
            let feats = model
                .encoder
                .encode_tape(&mut g, enc_nodes.as_ref().unwrap(), &item.mel)?;
            model
                .projector
                .forward_tape(&mut g, proj_nodes.as_ref().unwrap(), feats)?
        } else {
            let feats = model.encoder.encode(&item.mel)?;
            let tokens = model.projector.forward(&feats)?;
            g.constant(tokens.tokens)
        };
        let mut dropout = if dropout_rate > 0.0 {
            TapeDropout::On {
                rate: dropout_rate,
                rng: dropout_rng,
            }
        } else {
            TapeDropout::Off
        };
        let loss =
            model
                .decoder
                .loss_tape(&mut g, &dec_nodes, Some(audio_node), &item.text, &mut dropout)?;
        losses.push(loss);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    let mean = g.scale(total, 1.0 / batch.len() as f64)?;
    let loss_value = g.value(mean).scalar_value() as f64;
    if !loss_value.is_finite() {
        return Err(Error::NonFinite {
            context: "batch loss".to_string(),
        });
    }

    let grads = g.backward(mean)?;
    let decay = (lr * cfg.weight_decay) as f32;
    let lr32 = lr as f32;
    let mut update_err = None;
    model.visit_params_mut(&mut |name, t| {
        if let Some(grad) = grads.get(name) {
            if grad.shape() != t.shape() {
                update_err = Some(Error::shape("train_step", name.to_string()));
                return;
            }
            for (p, &gv) in t.data_mut().iter_mut().zip(grad.data().iter()) {
                *p = *p - lr32 * gv - decay * *p;
            }
        }
    });
    if let Some(e) = update_err {
        return Err(e);
    }
    Ok(loss_value)
}

fn stage_adapters(model: &mut Model<f32>, cfg: &StageConfig) -> Result<()> {
    model.decoder.merge_lora()?;
    if let Some(target) = cfg.lora_target {
        let mut rng = ModelRng::fork(cfg.seed, 0x10_7A);
        let adapter = LoraAdapter::init(LoraConfig::new(target), &model.cfg.decoder, &mut rng);
        model.decoder.apply_lora(adapter)?;
    }
    Ok(())
}

/// Run `total_steps` of [`train_step`] with the stage's schedule. Adapter
/// staging: any previously attached adapters are merged into the base, then
/// the stage's own target set (if any) is attached fresh.
pub fn run_stage(
    model: &mut Model<f32>,
    cfg: &StageConfig,
    data: &SynthDataset,
) -> Result<StageReport> {
    if data.items.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".to_string()));
    }
    stage_adapters(model, cfg)?;
    let mut dropout_rng = ModelRng::fork(cfg.seed, 0xD0);
    let mut rows = Vec::with_capacity(cfg.total_steps);
    for step in 1..=cfg.total_steps {
        let lr = lr_schedule(step, cfg)?;
        let batch: Vec<&SynthItem> = (0..cfg.batch_size)
            .map(|j| &data.items[((step - 1) * cfg.batch_size + j) % data.items.len()])
            .collect();
        let loss = train_step(model, &batch, cfg, lr, &mut dropout_rng)?;
        rows.push(StepRow { step, loss, lr });
    }
    Ok(StageReport { rows })
}

/// Like [`run_stage`] but items are built on the fly (index modulo
/// `task.count`), so large virtual datasets cost no memory. An item built
/// here is identical to the corresponding [`synth_dataset`] entry.
pub fn run_stage_streaming(
    model: &mut Model<f32>,
    cfg: &StageConfig,
    task: &SynthTask,
) -> Result<StageReport> {
    if task.count == 0 {
        return Err(Error::InvalidArgument("empty dataset".to_string()));
    }
    stage_adapters(model, cfg)?;
    let extractor = MelExtractor::new();
    let mut dropout_rng = ModelRng::fork(cfg.seed, 0xD0);
    let mut rows = Vec::with_capacity(cfg.total_steps);
    for step in 1..=cfg.total_steps {
        let lr = lr_schedule(step, cfg)?;
        let items: Vec<SynthItem> = (0..cfg.batch_size)
            .map(|j| {
                synth_item(
                    task.kind,
                    task.seed,
                    ((step - 1) * cfg.batch_size + j) % task.count,
                    &extractor,
                )
            })
            .collect::<Result<_>>()?;
        let batch: Vec<&SynthItem> = items.iter().collect();
        let loss = train_step(model, &batch, cfg, lr, &mut dropout_rng)?;
        rows.push(StepRow { step, loss, lr });
    }
    Ok(StageReport { rows })
}

/// Train two identical models on identical audio, one with monotonic
/// transcript-style targets and one with global histogram captions, and
/// return both loss curves.
pub struct AlignCompare {
    pub asr: StageReport,
    pub caption: StageReport,
}

pub fn exp_align_compare(
    model_cfg: &ModelConfig,
    base: &StageConfig,
    count: usize,
) -> Result<AlignCompare> {
    if base.total_steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".to_string()));
    }
    let mut reports = Vec::new();
    for kind in [TaskKind::AsrLike, TaskKind::CaptionLike] {
        let task = SynthTask {
            kind,
            seed: base.seed,
            count,
        };
        let mut model: Model<f32> = Model::init(model_cfg, base.seed)?;
        reports.push(run_stage_streaming(&mut model, base, &task)?);
    }
    let caption = reports.pop().expect("two reports");
    let asr = reports.pop().expect("two reports");
    Ok(AlignCompare { asr, caption })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        for (stage, peak) in [(Stage::Pretrain, 1e-4), (Stage::Sft, 1e-5)] {
            let cfg = StageConfig {
                total_steps: 500,
                ..StageConfig::defaults(stage)
            };
            let w = cfg.warmup_steps();
            assert_eq!(lr_schedule(0, &cfg).unwrap(), 0.0);
            assert_eq!(lr_schedule(w, &cfg).unwrap(), peak);
            let end = lr_schedule(cfg.total_steps, &cfg).unwrap();
            assert!((end - 0.1 * peak).abs() < 1e-12, "{end}");
            assert!(lr_schedule(cfg.total_steps + 1, &cfg).is_err());
        }
    }

    #[test]
    fn schedule_is_nonincreasing_after_warmup() {
        let cfg = StageConfig {
            total_steps: 300,
            ..StageConfig::defaults(Stage::Pretrain)
        };
        let w = cfg.warmup_steps();
        let mut prev = lr_schedule(w, &cfg).unwrap();
        for step in w + 1..=cfg.total_steps {
            let lr = lr_schedule(step, &cfg).unwrap();
            assert!(lr <= prev + 1e-18, "step {step}: {lr} > {prev}");
            prev = lr;
        }
    }

    #[test]
    fn warmup_scales_down_at_desk_scale() {
        let mut cfg = StageConfig::defaults(Stage::Pretrain);
        cfg.total_steps = 20_000;
        assert_eq!(cfg.warmup_steps(), 1000);
        cfg.total_steps = 500;
        assert_eq!(cfg.warmup_steps(), 50);
        cfg.total_steps = 40;
        assert_eq!(cfg.warmup_steps(), 10);
        cfg.total_steps = 5;
        assert_eq!(cfg.warmup_steps(), 5);
    }

    #[test]
    fn target_rendering_matches_examples() {
        assert_eq!(asr_target(&[2, 7, 2]), "2 7 2");
        assert_eq!(caption_target(&[2, 7, 2]), "2:2 7:1");
        assert_eq!(asr_target(&[15, 0]), "15 0");
        assert_eq!(caption_target(&[15, 0, 15]), "0:1 15:2");
    }

    #[test]
    fn dataset_is_deterministic_and_audio_is_task_independent() {
        let a = synth_dataset(&SynthTask {
            kind: TaskKind::AsrLike,
            seed: 5,
            count: 4,
        })
        .unwrap();
        let b = synth_dataset(&SynthTask {
            kind: TaskKind::AsrLike,
            seed: 5,
            count: 4,
        })
        .unwrap();
        let c = synth_dataset(&SynthTask {
            kind: TaskKind::CaptionLike,
            seed: 5,
            count: 4,
        })
        .unwrap();
        for i in 0..4 {
            assert_eq!(a.items[i].wave.samples, b.items[i].wave.samples);
            assert_eq!(a.items[i].target, b.items[i].target);
            assert_eq!(a.items[i].wave.samples, c.items[i].wave.samples);
            assert_eq!(a.items[i].bins, c.items[i].bins);
            assert_eq!(a.items[i].target, asr_target(&a.items[i].bins));
            assert_eq!(c.items[i].target, caption_target(&c.items[i].bins));
        }
    }

    #[test]
    fn segment_count_and_durations_in_range() {
        let d = synth_dataset(&SynthTask {
            kind: TaskKind::AsrLike,
            seed: 11,
            count: 12,
        })
        .unwrap();
        for item in &d.items {
            assert!((3..=8).contains(&item.bins.len()));
            let dur = item.wave.duration_s();
            let k = item.bins.len() as f64;
            assert!(dur >= 0.2 * k - 1e-6 && dur <= 0.5 * k + 1e-6);
        }
    }

    fn micro_model() -> Model<f32> {
        let cfg = ModelConfig {
            encoder: crate::config::EncoderConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                ff_dim: 32,
                ..Default::default()
            },
            decoder: crate::config::DecoderConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                ff_dim: 32,
                vocab: 259,
                max_seq: 128,
            },
            ..Default::default()
        };
        Model::init(&cfg, 99).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut model = micro_model();
        let data = synth_dataset(&SynthTask {
            kind: TaskKind::CaptionLike,
            seed: 3,
            count: 2,
        })
        .unwrap();
        let mut before = Vec::new();
        model.visit_params(&mut |_, t| before.push(t.data().to_vec()));
        let cfg = StageConfig::defaults(Stage::Align);
        let mut rng = ModelRng::seed_from_u64(0);
        let batch: Vec<&SynthItem> = data.items.iter().collect();
        let loss = train_step(&mut model, &batch, &cfg, 0.0, &mut rng).unwrap();
        assert!(loss.is_finite());
        let mut i = 0;
        model.visit_params(&mut |_, t| {
            assert_eq!(t.data(), before[i].as_slice());
            i += 1;
        });
    }

    #[test]
    fn lora_only_stage_keeps_base_bytes_invariant() {
        let mut model = micro_model();
        let data = synth_dataset(&SynthTask {
            kind: TaskKind::CaptionLike,
            seed: 3,
            count: 4,
        })
        .unwrap();
        let cfg = StageConfig {
            total_steps: 3,
            batch_size: 2,
            ..StageConfig::defaults(Stage::Pretrain)
        };
        // Snapshot base params (everything except adapters).
        let mut before = Vec::new();
        model.visit_params(&mut |n, t| {
            if !n.starts_with("lora.") {
                before.push((n.to_string(), t.data().to_vec()));
            }
        });
        run_stage(&mut model, &cfg, &data).unwrap();
        let mut after = Vec::new();
        model.visit_params(&mut |n, t| {
            if !n.starts_with("lora.") {
                after.push((n.to_string(), t.data().to_vec()));
            }
        });
        assert_eq!(before.len(), after.len());
        for ((n1, d1), (n2, d2)) in before.iter().zip(after.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(d1, d2, "{n1} changed in a lora-only stage");
        }
        // And the adapters did move.
        let adapter = model.decoder.adapter.as_ref().unwrap();
        assert!(adapter
            .entries
            .iter()
            .any(|(_, p)| p.b.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn qv_stage_touches_only_qv_adapters() {
        let mut model = micro_model();
        let data = synth_dataset(&SynthTask {
            kind: TaskKind::CaptionLike,
            seed: 3,
            count: 4,
        })
        .unwrap();
        let cfg = StageConfig {
            total_steps: 2,
            batch_size: 2,
            ..StageConfig::defaults(Stage::Pretrain)
        };
        run_stage(&mut model, &cfg, &data).unwrap();
        let adapter = model.decoder.adapter.as_ref().unwrap();
        for (name, _) in &adapter.entries {
            assert!(
                name.ends_with(".attn.q") || name.ends_with(".attn.v"),
                "unexpected adapter {name}"
            );
        }
    }

    #[test]
    fn descent_on_a_fixed_batch() {
        let mut model = micro_model();
        let data = synth_dataset(&SynthTask {
            kind: TaskKind::CaptionLike,
            seed: 8,
            count: 4,
        })
        .unwrap();
        let cfg = StageConfig::defaults(Stage::Align);
        let mut rng = ModelRng::seed_from_u64(0);
        let batch: Vec<&SynthItem> = data.items.iter().collect();
        let first = train_step(&mut model, &batch, &cfg, 0.2, &mut rng).unwrap();
        let second = train_step(&mut model, &batch, &cfg, 0.2, &mut rng).unwrap();
        assert!(second < first, "no descent: {first} -> {second}");
    }

    #[test]
    fn run_stage_reports_one_row_per_step() {
        let mut model = micro_model();
        let data = synth_dataset(&SynthTask {
            kind: TaskKind::CaptionLike,
            seed: 5,
            count: 3,
        })
        .unwrap();
        let cfg = StageConfig {
            total_steps: 5,
            batch_size: 2,
            ..StageConfig::defaults(Stage::Align)
        };
        let report = run_stage(&mut model, &cfg, &data).unwrap();
        assert_eq!(report.rows.len(), 5);
        let csv = report.to_csv();
        assert!(csv.starts_with("step,loss,lr\n"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn sft_stage_adapts_every_block_linear() {
        let mut model = micro_model();
        let data = synth_dataset(&SynthTask {
            kind: TaskKind::CaptionLike,
            seed: 5,
            count: 3,
        })
        .unwrap();
        let cfg = StageConfig {
            total_steps: 1,
            batch_size: 2,
            ..StageConfig::defaults(Stage::Sft)
        };
        run_stage(&mut model, &cfg, &data).unwrap();
        let adapter = model.decoder.adapter.as_ref().unwrap();
        let maps = crate::lora::decoder_linear_maps(&model.cfg.decoder);
        assert_eq!(adapter.entries.len(), maps.len());
        for (name, _, _) in maps {
            assert!(adapter.get(&name).is_some(), "missing adapter for {name}");
        }
    }
}
