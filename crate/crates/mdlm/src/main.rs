//! Thin CLI over the library's command implementations.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mdlm::commands::{self, BenchArgs, BenchSuite};
use mdlm::training::Stage;

#[derive(Parser)]
#[command(
    name = "mdlm",
    about = "Desk-scale audio-language pipeline: caption audio, run staged training, benchmark inference cost"
)]
struct Cli {
    /// Seed for anything randomized (init, data synthesis, experiments).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Align,
    Pretrain,
    Sft,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Align => Stage::Align,
            StageArg::Pretrain => Stage::Pretrain,
            StageArg::Sft => Stage::Sft,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Ttft,
    Throughput,
    Gmacs,
    Padding,
}

impl From<SuiteArg> for BenchSuite {
    fn from(s: SuiteArg) -> BenchSuite {
        match s {
            SuiteArg::Ttft => BenchSuite::Ttft,
            SuiteArg::Throughput => BenchSuite::Throughput,
            SuiteArg::Gmacs => BenchSuite::Gmacs,
            SuiteArg::Padding => BenchSuite::Padding,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded random checkpoint for the configured model.
    Init {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption a WAV file with a checkpoint.
    Caption {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long, default_value = "caption:")]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
    },
    /// Run one training stage and write checkpoint + loss CSV.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Input checkpoint for stage chaining (pretrain/sft).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Benchmark suites writing CSV reports.
    Bench {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Audio duration for gmacs/throughput suites (seconds).
        #[arg(long)]
        duration: Option<f64>,
        /// Sample count for the padding suite.
        #[arg(long)]
        samples: Option<usize>,
        /// Batch size for the padding suite.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Cross-check analytic MACs against instrumented kernels.
        #[arg(long, default_value_t = false)]
        verify: bool,
    },
    /// Transcript-style vs caption-style pretraining loss comparison.
    ExpAlign {
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 160)]
        count: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Init { config, out } => commands::cmd_init(config.as_deref(), &out, cli.seed),
        Cmd::Caption {
            model,
            audio,
            prompt,
            max_new,
        } => commands::cmd_caption(&model, &audio, &prompt, max_new),
        Cmd::Train {
            stage,
            config,
            out,
            init,
        } => commands::cmd_train(stage.into(), config.as_deref(), &out, init.as_deref(), cli.seed),
        Cmd::Bench {
            suite,
            model,
            config,
            out_dir,
            duration,
            samples,
            batch_size,
            verify,
        } => commands::cmd_bench(&BenchArgs {
            suite: suite.into(),
            model,
            config,
            out_dir,
            duration_s: duration,
            samples,
            batch_size,
            verify,
            seed: cli.seed,
        }),
        Cmd::ExpAlign {
            steps,
            count,
            config,
            out_dir,
        } => commands::cmd_exp_align(steps, cli.seed, count, config.as_deref(), &out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(commands::exit_code_for(&err) as u8)
        }
    }
}
