//! Implementations behind the `mdlm` command-line tool.
//!
//! Exit codes are fixed for scripting: 0 ok, 2 bad input file, 3 checkpoint
//! failure, 4 numeric failure (NaN loss), 5 config rejection; anything else
//! reports 1.

use std::path::{Path, PathBuf};

use crate::audio::{read_wav, MelExtractor};
use crate::batching::{
    padding_waste, plan_fixed, plan_sorted_buckets, plan_to_csv, training_length_distribution,
    DEFAULT_FIXED_PAD_S,
};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::perf::{
    gmacs_pipeline, measured_pipeline_macs, measure_throughput, ttft_csv, ttft_table,
    throughput_csv, PadPolicy, Session, ThroughputRow,
};
use crate::tokenizer;
use crate::training::{
    self, run_stage, synth_dataset, Stage, StageConfig, SynthTask, TaskKind,
};

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Audio(_) | Error::Io(_) => 2,
        Error::Checkpoint(_) => 3,
        Error::NonFinite { .. } => 4,
        Error::Config(_) => 5,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_path(p),
        None => Ok(RunConfig::default()),
    }
}

/// `mdlm init`: write a seeded random checkpoint for the configured model.
pub fn cmd_init(config: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let cfg = load_config(config)?;
    let model: Model<f32> = Model::init(&cfg.model, seed)?;
    checkpoint::save(&model, out)?;
    println!(
        "wrote {} ({} parameters, seed {})",
        out.display(),
        model.param_count(),
        seed
    );
    Ok(())
}

/// `mdlm caption`: transcribe/caption one WAV file with a checkpoint.
pub fn cmd_caption(
    model_path: &Path,
    audio_path: &Path,
    prompt: &str,
    max_new: usize,
) -> Result<()> {
    let model = checkpoint::load(model_path)?;
    let wave = read_wav(audio_path)?;
    let extractor = MelExtractor::new();
    let (tokens, lens) = model.audio_tokens(&extractor, &wave)?;
    eprintln!(
        "info: audio_tokens={} frames={} features={} samples={} duration_s={:.3}",
        lens.audio_tokens,
        lens.frames,
        lens.features,
        lens.samples,
        lens.samples as f64 / crate::audio::TARGET_SAMPLE_RATE as f64
    );
    let mut prompt_ids = vec![tokenizer::BOS];
    prompt_ids.extend(tokenizer::encode_text(prompt));
    let generated = model.decoder.generate(&tokens, &prompt_ids, max_new)?;
    println!("{}", tokenizer::decode_bytes(&generated));
    println!("tokens: {}", generated.len());
    Ok(())
}

fn stage_task(stage: Stage, cfg: &RunConfig) -> Result<SynthTask> {
    let kind = match cfg.stage.task.as_deref() {
        None => TaskKind::CaptionLike,
        Some("caption_like") => TaskKind::CaptionLike,
        Some("asr_like") => TaskKind::AsrLike,
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown task {other:?} (expected asr_like or caption_like)"
            )))
        }
    };
    let _ = stage;
    Ok(SynthTask {
        kind,
        seed: 0,
        count: cfg.stage.dataset_size.unwrap_or(200),
    })
}

fn stage_config(stage: Stage, cfg: &RunConfig, seed: u64) -> StageConfig {
    let mut sc = StageConfig::defaults(stage);
    sc.seed = seed;
    if let Some(v) = cfg.stage.peak_lr {
        sc.peak_lr = v;
    }
    if let Some(v) = cfg.stage.weight_decay {
        sc.weight_decay = v;
    }
    if let Some(v) = cfg.stage.batch_size {
        sc.batch_size = v;
    }
    if let Some(v) = cfg.stage.total_steps {
        sc.total_steps = v;
    }
    sc
}

/// `mdlm train`: run one stage, write checkpoint + per-step loss CSV.
pub fn cmd_train(
    stage: Stage,
    config: Option<&Path>,
    out: &Path,
    init: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let cfg = load_config(config)?;
    let sc = stage_config(stage, &cfg, seed);
    let init_path: Option<PathBuf> = init
        .map(Path::to_path_buf)
        .or_else(|| cfg.stage.init_checkpoint.as_ref().map(PathBuf::from));

    let mut model = match (&init_path, stage) {
        (Some(p), _) => checkpoint::load(p)?,
        (None, Stage::Align) => Model::init(&cfg.model, seed)?,
        (None, _) => {
            return Err(Error::Config(format!(
                "stage {} requires an input checkpoint (--init or stage.init_checkpoint)",
                stage.name()
            )))
        }
    };

    let mut task = stage_task(stage, &cfg)?;
    task.seed = seed;
    let data = synth_dataset(&task)?;
    let report = run_stage(&mut model, &sc, &data)?;

    checkpoint::save(&model, out)?;
    let csv_path = loss_csv_path(out);
    report.write_csv(&csv_path)?;
    println!(
        "stage={} steps={} final_loss={:.4} final_window_mean={:.4}",
        stage.name(),
        report.rows.len(),
        report.rows.last().map(|r| r.loss).unwrap_or(f64::NAN),
        report.final_window_mean(100)
    );
    println!("checkpoint: {}", out.display());
    println!("loss_csv: {}", csv_path.display());
    Ok(())
}

pub fn loss_csv_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".loss.csv");
    out.with_file_name(name)
}

pub enum BenchSuite {
    Ttft,
    Throughput,
    Gmacs,
    Padding,
}

pub struct BenchArgs {
    pub suite: BenchSuite,
    pub model: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub duration_s: Option<f64>,
    pub samples: Option<usize>,
    pub batch_size: Option<usize>,
    pub verify: bool,
    pub seed: u64,
}

fn bench_model(args: &BenchArgs) -> Result<Model<f32>> {
    match &args.model {
        Some(p) => checkpoint::load(p),
        None => Err(Error::Config(
            "this suite needs --model (create one with `mdlm init` or `mdlm train`)".to_string(),
        )),
    }
}

/// `mdlm bench`: run one suite, write its CSVs into --out-dir.
pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    std::fs::create_dir_all(&args.out_dir)?;
    match args.suite {
        BenchSuite::Gmacs => {
            let duration = args.duration_s.unwrap_or(30.0);
            let prompt_len = 1 + cfg.bench.prompt.len();
            let model_cfg = match &args.model {
                Some(p) => checkpoint::load(p)?.cfg,
                None => cfg.model.clone(),
            };
            let report = gmacs_pipeline(
                duration,
                prompt_len,
                cfg.bench.out_tokens,
                &model_cfg,
                PadPolicy::Variable,
            )?;
            let path = args.out_dir.join("gmacs.csv");
            std::fs::write(&path, report.to_csv())?;
            println!(
                "duration_s={} audio_tokens={} prefix={} total_macs={}",
                duration,
                report.audio_tokens,
                report.prefix_len,
                report.total_macs()
            );
            if args.verify {
                let model: Model<f32> = match &args.model {
                    Some(p) => checkpoint::load(p)?,
                    None => Model::init(&model_cfg, args.seed)?,
                };
                let measured = measured_pipeline_macs(
                    &model,
                    duration,
                    prompt_len,
                    cfg.bench.out_tokens,
                    PadPolicy::Variable,
                )?;
                let ok = measured.encoder == report.encoder_macs
                    && measured.projector == report.projector_macs
                    && measured.prefill == report.prefill_macs
                    && measured.decode == report.decode_macs;
                println!(
                    "verify: instrumented {{encoder:{}, projector:{}, prefill:{}, decode:{}}} -> {}",
                    measured.encoder,
                    measured.projector,
                    measured.prefill,
                    measured.decode,
                    if ok { "match" } else { "MISMATCH" }
                );
                if !ok {
                    return Err(Error::InvalidArgument(
                        "instrumented MACs disagree with the analytic model".to_string(),
                    ));
                }
            }
            println!("gmacs_csv: {}", path.display());
        }
        BenchSuite::Ttft => {
            let model = bench_model(args)?;
            let mut prompt = vec![tokenizer::BOS];
            prompt.extend(tokenizer::encode_text(&cfg.bench.prompt));
            let session = Session::new(model, prompt);
            let rows = ttft_table(
                &session,
                &cfg.bench.durations_s,
                cfg.bench.reps,
                cfg.bench.warmups,
            )?;
            for r in &rows {
                println!(
                    "policy={} duration_s={} ttft_ms={:.2} reps={}",
                    r.policy.name(),
                    r.duration_s,
                    r.ttft_s * 1000.0,
                    r.reps
                );
            }
            let path = args.out_dir.join("ttft.csv");
            std::fs::write(&path, ttft_csv(&rows))?;
            println!("ttft_csv: {}", path.display());
        }
        BenchSuite::Throughput => {
            let model = bench_model(args)?;
            let mut prompt = vec![tokenizer::BOS];
            prompt.extend(tokenizer::encode_text(&cfg.bench.prompt));
            let session = Session::new(model, prompt);
            let duration = args.duration_s.unwrap_or(30.0);
            let cap = cfg.bench.mem_cap_mb.map(|mb| mb * 1024 * 1024);
            let mut rows: Vec<ThroughputRow> = Vec::new();
            for &batch in &cfg.bench.batch_sizes {
                let row = measure_throughput(
                    &session,
                    batch,
                    duration,
                    cfg.bench.out_tokens,
                    cfg.bench.rounds,
                    cap,
                )?;
                match row.samples_per_s {
                    Some(v) => println!("batch={} samples_per_s={:.4} status={}", batch, v, row.status),
                    None => println!("batch={} status={}", batch, row.status),
                }
                rows.push(row);
            }
            let path = args.out_dir.join("throughput.csv");
            std::fs::write(&path, throughput_csv(&rows))?;
            println!("throughput_csv: {}", path.display());
        }
        BenchSuite::Padding => {
            let n = args.samples.unwrap_or(1000);
            let batch = args.batch_size.unwrap_or(8);
            let dist = training_length_distribution(n, args.seed);
            let fixed = plan_fixed(&dist, batch, DEFAULT_FIXED_PAD_S)?;
            let sorted = plan_sorted_buckets(&dist, batch)?;
            let wf = padding_waste(&fixed)?;
            let ws = padding_waste(&sorted)?;
            println!("fixed_pad_waste={:.6}", wf);
            println!("sorted_bucket_waste={:.6}", ws);
            println!("waste_ratio={:.2}", wf / ws);
            std::fs::write(args.out_dir.join("fixed_plan.csv"), plan_to_csv(&fixed))?;
            std::fs::write(args.out_dir.join("sorted_plan.csv"), plan_to_csv(&sorted))?;
            let summary = format!(
                "policy,waste\nfixed_pad,{wf}\nsorted_bucket,{ws}\n"
            );
            std::fs::write(args.out_dir.join("padding.csv"), summary)?;
            println!("plans: {}", args.out_dir.display());
        }
    }
    Ok(())
}

/// `mdlm exp-align`: train the same model on transcript-style vs caption
/// targets over identical audio and compare the loss curves.
pub fn cmd_exp_align(
    steps: usize,
    seed: u64,
    count: usize,
    config: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    std::fs::create_dir_all(out_dir)?;
    let mut sc = stage_config(Stage::Align, &cfg, seed);
    sc.total_steps = steps;
    let result = training::exp_align_compare(&cfg.model, &sc, count)?;
    let asr_path = out_dir.join("exp_asr.csv");
    let cap_path = out_dir.join("exp_caption.csv");
    result.asr.write_csv(&asr_path)?;
    result.caption.write_csv(&cap_path)?;
    let window = (steps / 10).max(1);
    let asr_final = result.asr.final_window_mean(window);
    let cap_final = result.caption.final_window_mean(window);
    let lower = if asr_final < cap_final {
        "asr_like"
    } else {
        "caption_like"
    };
    println!(
        "summary: asr_like_final={:.4} caption_like_final={:.4} lower={}",
        asr_final, cap_final, lower
    );
    println!("curves: {} {}", asr_path.display(), cap_path.display());
    Ok(())
}
