//! Analytic compute model plus measurement harnesses.
//!
//! The MAC model counts matmul multiply-adds only: attention projections,
//! score/context products, MLP matmuls and the logit projection. Softmax,
//! norms, activations and embedding lookups are free, and the mel frontend
//! contains no matmuls at all. The same convention is instrumented in the
//! kernels, so analytic numbers and `MacCounter` readings must agree as
//! exact integers.
//!
//! Timing: monotonic clock, configurable warmups discarded, median of the
//! remaining repetitions.

use std::sync::Arc;
use std::time::Instant;

use crate::audio::{MelExtractor, Waveform, HOP, N_MELS, TARGET_SAMPLE_RATE};
use crate::config::ModelConfig;
use crate::decoder::{argmax, KvCache, LockstepDecoder, PrefixSequence};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::MacCounter;
use crate::projector::tokens_from_samples;

pub const FIXED_PAD_S: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadPolicy {
    /// Process the audio at its natural length.
    Variable,
    /// Zero-pad the waveform to 30 s first (fixed-context baseline).
    Fixed30,
}

impl PadPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            PadPolicy::Variable => "variable",
            PadPolicy::Fixed30 => "fixed30",
        }
    }
}

// ── Analytic MAC formulas ──────────────────────────────────────────────

pub fn macs_matmul(m: usize, k: usize, n: usize) -> u64 {
    (m * k * n) as u64
}

/// One attention op over L positions: Q,K,V,O projections plus the
/// score and context products.
pub fn macs_attention(len: usize, d: usize) -> u64 {
    (4 * len * d * d + 2 * len * len * d) as u64
}

pub fn macs_block(len: usize, d: usize, ff: usize) -> u64 {
    macs_attention(len, d) + (2 * len * d * ff) as u64
}

/// `layers * (4 L d^2 + 2 L^2 d + 2 L d ff)`.
pub fn gmacs_transformer(len: usize, d: usize, ff: usize, layers: usize) -> u64 {
    layers as u64 * macs_block(len, d, ff)
}

/// The quadratic attention score/context term alone, summed over layers.
pub fn prefill_attention_term(len: usize, d: usize, layers: usize) -> u64 {
    layers as u64 * (2 * len * len * d) as u64
}

/// Encoder cost over all windows of a clip: patch projection plus blocks.
pub fn encoder_macs(total_frames: usize, cfg: &ModelConfig) -> u64 {
    let enc = &cfg.encoder;
    let mut macs = 0u64;
    let mut remaining = total_frames;
    while remaining > 0 {
        let len = remaining.min(enc.max_window_frames);
        let rows = len.div_ceil(enc.time_patch);
        macs += macs_matmul(rows, enc.time_patch * N_MELS, enc.d_model);
        macs += gmacs_transformer(rows, enc.d_model, enc.ff_dim, enc.n_layers);
        remaining -= len;
    }
    macs
}

/// Projector cost: two MLP matmuls over ceil(F/stack) rows.
pub fn projector_macs(features: usize, cfg: &ModelConfig) -> u64 {
    let stack = cfg.projector.stack_factor;
    let rows = features.div_ceil(stack);
    let hidden = cfg.projector.hidden(cfg.decoder.d_model);
    macs_matmul(rows, stack * cfg.encoder.d_model, hidden)
        + macs_matmul(rows, hidden, cfg.decoder.d_model)
}

/// Prefill: causal blocks over the prefix plus one logit row.
pub fn prefill_macs(prefix_len: usize, cfg: &ModelConfig) -> u64 {
    let dec = &cfg.decoder;
    gmacs_transformer(prefix_len, dec.d_model, dec.ff_dim, dec.n_layers)
        + macs_matmul(1, dec.d_model, dec.vocab)
}

/// Incremental steps for tokens 2..=out_tokens. The t-th token attends
/// over prefix + t - 1 cached positions.
pub fn decode_macs(prefix_len: usize, out_tokens: usize, cfg: &ModelConfig) -> u64 {
    let dec = &cfg.decoder;
    let d = dec.d_model;
    let mut macs = 0u64;
    for t in 2..=out_tokens {
        let cache_len = prefix_len + t - 1;
        macs += dec.n_layers as u64
            * (4 * d * d + 2 * d * cache_len + 2 * d * dec.ff_dim) as u64;
        macs += macs_matmul(1, d, dec.vocab);
    }
    macs
}

/// Per-phase MAC accounting for one request (frontend excluded).
#[derive(Debug, Clone)]
pub struct CostReport {
    pub policy: PadPolicy,
    pub duration_s: f64,
    pub prompt_len: usize,
    pub out_tokens: usize,
    pub audio_tokens: usize,
    pub prefix_len: usize,
    pub encoder_macs: u64,
    pub projector_macs: u64,
    pub prefill_macs: u64,
    pub decode_macs: u64,
    pub config: ModelConfig,
}

impl CostReport {
    pub fn total_macs(&self) -> u64 {
        self.encoder_macs + self.projector_macs + self.prefill_macs + self.decode_macs
    }

    /// Rows as `phase,macs`.
    pub fn to_csv(&self) -> String {
        format!(
            "phase,macs\nencoder,{}\nprojector,{}\ndecoder_prefill,{}\ndecoder_decode,{}\ntotal,{}\n",
            self.encoder_macs,
            self.projector_macs,
            self.prefill_macs,
            self.decode_macs,
            self.total_macs()
        )
    }
}

pub fn gmacs_pipeline(
    duration_s: f64,
    prompt_len: usize,
    out_tokens: usize,
    cfg: &ModelConfig,
    policy: PadPolicy,
) -> Result<CostReport> {
    if !(duration_s > 0.0) {
        return Err(Error::InvalidArgument("duration must be positive".to_string()));
    }
    if policy == PadPolicy::Fixed30 && duration_s > FIXED_PAD_S + 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "duration {duration_s} s exceeds the fixed 30 s pad"
        )));
    }
    if out_tokens == 0 {
        return Err(Error::InvalidArgument("out_tokens must be >= 1".to_string()));
    }
    let effective = match policy {
        PadPolicy::Variable => duration_s,
        PadPolicy::Fixed30 => FIXED_PAD_S,
    };
    let samples = (effective * TARGET_SAMPLE_RATE as f64).round().max(1.0) as usize;
    let frames = samples.div_ceil(HOP);
    let features = crate::encoder::feature_count(frames, &cfg.encoder);
    let audio_tokens = tokens_from_samples(samples, &cfg.encoder, cfg.projector.stack_factor);
    let prefix_len = audio_tokens + prompt_len;
    Ok(CostReport {
        policy,
        duration_s,
        prompt_len,
        out_tokens,
        audio_tokens,
        prefix_len,
        encoder_macs: encoder_macs(frames, cfg),
        projector_macs: projector_macs(features, cfg),
        prefill_macs: prefill_macs(prefix_len, cfg),
        decode_macs: decode_macs(prefix_len, out_tokens, cfg),
        config: cfg.clone(),
    })
}

// ── Instrumented oracle ────────────────────────────────────────────────

/// MAC readings from actually running the pipeline phases under the
/// counter. Token values are irrelevant; only shapes count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseMacs {
    pub encoder: u64,
    pub projector: u64,
    pub prefill: u64,
    pub decode: u64,
}

pub fn measured_pipeline_macs(
    model: &Model<f32>,
    duration_s: f64,
    prompt_len: usize,
    out_tokens: usize,
    policy: PadPolicy,
) -> Result<PhaseMacs> {
    let extractor = MelExtractor::new();
    let wave = bench_wave(duration_s, policy)?;
    let counter = MacCounter::start();
    let mel = extractor.log_mel(&wave)?;
    debug_assert_eq!(counter.count(), 0, "frontend must not run matmuls");
    counter.take();

    let features = model.encoder.encode(&mel)?;
    let enc = counter.take();
    let tokens = model.projector.forward(&features)?;
    let proj = counter.take();

    let prompt: Vec<u32> = (0..prompt_len).map(|i| (i % 200) as u32).collect();
    let seq = model.decoder.build_prefix(tokens, &prompt, &[])?;
    counter.take();
    let mut cache = KvCache::new(model.cfg.decoder.n_layers, model.cfg.decoder.d_model);
    let mut logits = model.decoder.prefill(&seq.embedded, &mut cache)?;
    let prefill = counter.take();

    let mut pos = seq.total_len();
    for _ in 1..out_tokens {
        let next = argmax(logits.row(0));
        let x = model.decoder.token_embedding(next, pos)?;
        logits = model.decoder.decode_step(&x, &mut cache)?;
        pos += 1;
    }
    let decode = counter.take();
    Ok(PhaseMacs {
        encoder: enc,
        projector: proj,
        prefill,
        decode,
    })
}

// ── Sessions and timing ────────────────────────────────────────────────

/// A loaded model shared by measurement workers.
pub struct Session {
    pub model: Arc<Model<f32>>,
    pub prompt: Vec<u32>,
}

impl Session {
    pub fn new(model: Model<f32>, prompt: Vec<u32>) -> Session {
        Session {
            model: Arc::new(model),
            prompt,
        }
    }

    /// Frontend + encode + project + prefill + first-token argmax; returns
    /// the first generated token so the work cannot be optimized away.
    fn first_token(&self, extractor: &MelExtractor, wave: &Waveform) -> Result<u32> {
        let (tokens, _) = self.model.audio_tokens(extractor, wave)?;
        let seq = self.model.decoder.build_prefix(tokens, &self.prompt, &[])?;
        let mut cache = KvCache::new(
            self.model.cfg.decoder.n_layers,
            self.model.cfg.decoder.d_model,
        );
        let logits = self.model.decoder.prefill(&seq.embedded, &mut cache)?;
        Ok(argmax(logits.row(0)))
    }
}

/// Synthetic benchmark input of a given duration; `Fixed30` pads to 30 s.
pub fn bench_wave(duration_s: f64, policy: PadPolicy) -> Result<Waveform> {
    if !(duration_s > 0.0) {
        return Err(Error::InvalidArgument("duration must be positive".to_string()));
    }
    if policy == PadPolicy::Fixed30 && duration_s > FIXED_PAD_S + 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "duration {duration_s} s exceeds the fixed 30 s pad"
        )));
    }
    let mut samples = crate::audio::sine(440.0, duration_s, 0.4, TARGET_SAMPLE_RATE);
    if policy == PadPolicy::Fixed30 {
        samples.resize((FIXED_PAD_S * TARGET_SAMPLE_RATE as f64) as usize, 0.0);
    }
    Waveform::new(samples, TARGET_SAMPLE_RATE)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[derive(Debug, Clone)]
pub struct TtftRow {
    pub policy: PadPolicy,
    pub duration_s: f64,
    pub ttft_s: f64,
    pub reps: usize,
}

/// Median wall time from request submission to first-token availability.
pub fn measure_ttft(
    session: &Session,
    duration_s: f64,
    policy: PadPolicy,
    reps: usize,
    warmups: usize,
) -> Result<TtftRow> {
    let reps = reps.max(1);
    let extractor = MelExtractor::new();
    let wave = bench_wave(duration_s, PadPolicy::Variable)?;
    let mut times = Vec::with_capacity(reps);
    for i in 0..warmups + reps {
        let start = Instant::now();
        let input = match policy {
            PadPolicy::Variable => wave.clone(),
            PadPolicy::Fixed30 => {
                let mut s = wave.samples.clone();
                s.resize((FIXED_PAD_S * TARGET_SAMPLE_RATE as f64) as usize, 0.0);
                Waveform::new(s, TARGET_SAMPLE_RATE)?
            }
        };
        let token = session.first_token(&extractor, &input)?;
        let elapsed = start.elapsed().as_secs_f64();
        std::hint::black_box(token);
        if i >= warmups {
            times.push(elapsed);
        }
    }
    Ok(TtftRow {
        policy,
        duration_s,
        ttft_s: median(times),
        reps,
    })
}

/// The TTFT suite: for each duration, repetitions of the two policies are
/// interleaved so clock drift and background load hit both medians alike.
pub fn ttft_table(
    session: &Session,
    durations: &[f64],
    reps: usize,
    warmups: usize,
) -> Result<Vec<TtftRow>> {
    let reps = reps.max(1);
    let extractor = MelExtractor::new();
    let mut rows = Vec::new();
    for &duration in durations {
        let wave = bench_wave(duration, PadPolicy::Variable)?;
        let padded = {
            let mut s = wave.samples.clone();
            s.resize((FIXED_PAD_S * TARGET_SAMPLE_RATE as f64) as usize, 0.0);
            Waveform::new(s, TARGET_SAMPLE_RATE)?
        };
        for _ in 0..warmups {
            std::hint::black_box(session.first_token(&extractor, &wave)?);
            std::hint::black_box(session.first_token(&extractor, &padded)?);
        }
        let mut var_times = Vec::with_capacity(reps);
        let mut fix_times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            std::hint::black_box(session.first_token(&extractor, &wave)?);
            var_times.push(t0.elapsed().as_secs_f64());
            let t1 = Instant::now();
            std::hint::black_box(session.first_token(&extractor, &padded)?);
            fix_times.push(t1.elapsed().as_secs_f64());
        }
        rows.push(TtftRow {
            policy: PadPolicy::Variable,
            duration_s: duration,
            ttft_s: median(var_times),
            reps,
        });
        rows.push(TtftRow {
            policy: PadPolicy::Fixed30,
            duration_s: duration,
            ttft_s: median(fix_times),
            reps,
        });
    }
    Ok(rows)
}

pub fn ttft_csv(rows: &[TtftRow]) -> String {
    let mut out = String::from("policy,duration_s,ttft_ms,reps\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.3},{}\n",
            r.policy.name(),
            r.duration_s,
            r.ttft_s * 1000.0,
            r.reps
        ));
    }
    out
}

// ── Throughput ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ThroughputRow {
    pub batch: usize,
    pub samples_per_s: Option<f64>,
    pub status: &'static str,
}

/// Worker cap: MDLM_THREADS when set, else the machine's parallelism.
pub fn worker_cap() -> usize {
    if let Ok(v) = std::env::var("MDLM_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Documented memory estimate for admission control: parameter bytes plus
/// per-sequence KV cache and activation workspace. The throughput suite
/// compares this against the configured cap to report OOM outcomes.
pub fn estimated_bytes(
    model: &Model<f32>,
    batch: usize,
    prefix_len: usize,
    out_tokens: usize,
) -> u64 {
    let dec = &model.cfg.decoder;
    let total_len = prefix_len + out_tokens;
    let kv = 2 * dec.n_layers * total_len * dec.d_model;
    let activations = prefix_len * dec.d_model + 4 * (dec.d_model + dec.ff_dim + dec.vocab);
    (model.param_count() as u64 + (batch * (kv + activations)) as u64) * 4
}

/// Samples per wall-second for one batch size: full pipeline per sample,
/// lockstep batched decode, workers capped by [`worker_cap`]. Median over
/// `rounds` timed rounds after one warmup round.
pub fn measure_throughput(
    session: &Session,
    batch: usize,
    duration_s: f64,
    out_tokens: usize,
    rounds: usize,
    mem_cap_bytes: Option<u64>,
) -> Result<ThroughputRow> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be >= 1".to_string()));
    }
    let rounds = rounds.max(1);
    let model = &session.model;
    let prefix_len = tokens_from_samples(
        (duration_s * TARGET_SAMPLE_RATE as f64).round() as usize,
        &model.cfg.encoder,
        model.cfg.projector.stack_factor,
    ) + session.prompt.len();
    if let Some(cap) = mem_cap_bytes {
        let need = estimated_bytes(model, batch, prefix_len, out_tokens);
        if need > cap {
            return Ok(ThroughputRow {
                batch,
                samples_per_s: None,
                status: "OOM",
            });
        }
    }

    let wave = bench_wave(duration_s, PadPolicy::Variable)?;
    let workers = worker_cap().min(batch);
    // Chunk indices round-robin across workers.
    let chunks: Vec<Vec<usize>> = (0..workers)
        .map(|w| (0..batch).filter(|i| i % workers == w).collect())
        .collect();

    let run_round = || -> Result<f64> {
        let start = Instant::now();
        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            for chunk in &chunks {
                let wave = &wave;
                let session = &session;
                handles.push(scope.spawn(move || -> Result<()> {
                    let extractor = MelExtractor::new();
                    let mut prefixes: Vec<PrefixSequence<f32>> =
                        Vec::with_capacity(chunk.len());
                    for _ in chunk {
                        let (tokens, _) = session.model.audio_tokens(&extractor, wave)?;
                        prefixes.push(
                            session
                                .model
                                .decoder
                                .build_prefix(tokens, &session.prompt, &[])?,
                        );
                    }
                    let mut lock = LockstepDecoder::new(&session.model.decoder, &prefixes)?;
                    lock.run_to(out_tokens)?;
                    std::hint::black_box(lock.tokens());
                    Ok(())
                }));
            }
            for h in handles {
                h.join().expect("worker panicked")?;
            }
            Ok(())
        })?;
        Ok(start.elapsed().as_secs_f64())
    };

    run_round()?; // warmup
    let mut rates = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let elapsed = run_round()?;
        rates.push(batch as f64 / elapsed);
    }
    Ok(ThroughputRow {
        batch,
        samples_per_s: Some(median(rates)),
        status: "ok",
    })
}

pub fn throughput_csv(rows: &[ThroughputRow]) -> String {
    let mut out = String::from("batch,samples_per_s,status\n");
    for r in rows {
        match r.samples_per_s {
            Some(v) => out.push_str(&format!("{},{:.4},{}\n", r.batch, v, r.status)),
            None => out.push_str(&format!("{},,{}\n", r.batch, r.status)),
        }
    }
    out
}
