// Scratch probe for tuning the synthetic alignment experiment.

use mdlm::config::ModelConfig;
use mdlm::model::Model;
use mdlm::training::{
    run_stage_streaming, Stage, StageConfig, SynthTask, TaskKind,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind = match args.get(1).map(String::as_str) {
        Some("caption") => TaskKind::CaptionLike,
        _ => TaskKind::AsrLike,
    };
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let layers: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2);
    let epochs: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let seed: u64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0);

    let mut cfg = ModelConfig::default();
    cfg.decoder.n_layers = layers;
    let mut model: Model<f32> = Model::init(&cfg, seed).unwrap();
    let mut sc = StageConfig::defaults(Stage::Align);
    sc.peak_lr = lr;
    sc.total_steps = steps;
    sc.seed = seed;
    let count = ((steps * sc.batch_size) as f64 / epochs).round() as usize;
    let task = SynthTask {
        kind,
        seed,
        count,
    };
    let report = run_stage_streaming(&mut model, &sc, &task).unwrap();
    for (i, chunk) in report.rows.chunks(100).enumerate() {
        let mean: f64 = chunk.iter().map(|r| r.loss).sum::<f64>() / chunk.len() as f64;
        println!("steps {:4}..{:4}: mean {:.4}", i * 100, i * 100 + chunk.len(), mean);
    }
}
