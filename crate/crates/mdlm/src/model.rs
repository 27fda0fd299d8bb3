//! The assembled pipeline: frontend constants + encoder + projector +
//! decoder, with named access to every parameter tensor.
//!
//! Parameter names are canonical: they are the keys used by checkpoints,
//! gradient maps and the optimizer, and they match what `bind` registers
//! on a tape.

use crate::audio::{resample, MelExtractor, Waveform};
use crate::config::ModelConfig;
use crate::decoder::DecoderParams;
use crate::encoder::EncoderParams;
use crate::error::Result;
use crate::nn::layers::{BlockParams, Linear};
use crate::nn::rng::ModelRng;
use crate::nn::tensor::{Scalar, Tensor};
use crate::projector::{AudioTokens, ProjectorParams};

#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    pub cfg: ModelConfig,
    pub encoder: EncoderParams<T>,
    pub projector: ProjectorParams<T>,
    pub decoder: DecoderParams<T>,
}

/// Stage lengths observed while turning audio into tokens.
#[derive(Debug, Clone, Copy)]
pub struct PipelineLens {
    pub samples: usize,
    pub frames: usize,
    pub features: usize,
    pub audio_tokens: usize,
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization; the draw order is fixed so one seed pins
    /// every weight.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
        cfg.validate()?;
        let mut rng = ModelRng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&cfg.encoder, &mut rng)?;
        let projector = ProjectorParams::init(
            &cfg.projector,
            cfg.encoder.d_model,
            cfg.decoder.d_model,
            &mut rng,
        )?;
        let decoder = DecoderParams::init(&cfg.decoder, &mut rng)?;
        Ok(Model {
            cfg: cfg.clone(),
            encoder,
            projector,
            decoder,
        })
    }

    /// Full frontend path: resample -> log-mel -> encode -> project.
    pub fn audio_tokens(
        &self,
        extractor: &MelExtractor,
        wave: &Waveform,
    ) -> Result<(AudioTokens<T>, PipelineLens)> {
        let wave16 = resample(wave)?;
        let mel = extractor.log_mel(&wave16)?;
        let features = self.encoder.encode(&mel)?;
        let tokens = self.projector.forward(&features)?;
        let lens = PipelineLens {
            samples: wave16.samples.len(),
            frames: mel.num_frames(),
            features: features.len(),
            audio_tokens: tokens.len(),
        };
        Ok((tokens, lens))
    }

    pub fn to_f64(&self) -> Model<f64> {
        fn lin<T: Scalar>(l: &Linear<T>) -> Linear<f64> {
            Linear {
                w: l.w.to_f64(),
                b: l.b.to_f64(),
            }
        }
        Model {
            cfg: self.cfg.clone(),
            encoder: EncoderParams {
                cfg: self.encoder.cfg.clone(),
                patch: lin(&self.encoder.patch),
                pos: self.encoder.pos.to_f64(),
                blocks: self
                    .encoder
                    .blocks
                    .iter()
                    .map(block_to_f64)
                    .collect(),
                ln_f: crate::nn::layers::LayerNormParams {
                    gamma: self.encoder.ln_f.gamma.to_f64(),
                    beta: self.encoder.ln_f.beta.to_f64(),
                },
            },
            projector: ProjectorParams {
                cfg: self.projector.cfg.clone(),
                fc1: lin(&self.projector.fc1),
                fc2: lin(&self.projector.fc2),
            },
            decoder: self.decoder.to_f64(),
        }
    }

    /// Visit every parameter in canonical order (adapters last).
    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Tensor<T>)) {
        visit_linear(&self.encoder.patch, "encoder.patch_embed", &mut |n, t| f(n, t));
        f("encoder.pos_embed", &self.encoder.pos);
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            visit_block(b, &format!("encoder.blocks.{i}"), &mut |n, t| f(n, t));
        }
        f("encoder.ln_f.gamma", &self.encoder.ln_f.gamma);
        f("encoder.ln_f.beta", &self.encoder.ln_f.beta);

        visit_linear(&self.projector.fc1, "projector.fc1", &mut |n, t| f(n, t));
        visit_linear(&self.projector.fc2, "projector.fc2", &mut |n, t| f(n, t));

        f("decoder.embed", &self.decoder.embed);
        f("decoder.pos_embed", &self.decoder.pos);
        for (i, b) in self.decoder.blocks.iter().enumerate() {
            visit_block(b, &format!("decoder.blocks.{i}"), &mut |n, t| f(n, t));
        }
        f("decoder.ln_f.gamma", &self.decoder.ln_f.gamma);
        f("decoder.ln_f.beta", &self.decoder.ln_f.beta);
        visit_linear(&self.decoder.lm_head, "decoder.lm_head", &mut |n, t| f(n, t));

        if let Some(adapter) = &self.decoder.adapter {
            for (target, pair) in &adapter.entries {
                f(&format!("lora.{target}.a"), &pair.a);
                f(&format!("lora.{target}.b"), &pair.b);
            }
        }
    }

    /// Mutable visit, same order and names as [`Model::visit_params`].
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        visit_linear_mut(&mut self.encoder.patch, "encoder.patch_embed", &mut |n, t| f(n, t));
        f("encoder.pos_embed", &mut self.encoder.pos);
        for (i, b) in self.encoder.blocks.iter_mut().enumerate() {
            visit_block_mut(b, &format!("encoder.blocks.{i}"), &mut |n, t| f(n, t));
        }
        f("encoder.ln_f.gamma", &mut self.encoder.ln_f.gamma);
        f("encoder.ln_f.beta", &mut self.encoder.ln_f.beta);

        visit_linear_mut(&mut self.projector.fc1, "projector.fc1", &mut |n, t| f(n, t));
        visit_linear_mut(&mut self.projector.fc2, "projector.fc2", &mut |n, t| f(n, t));

        f("decoder.embed", &mut self.decoder.embed);
        f("decoder.pos_embed", &mut self.decoder.pos);
        for (i, b) in self.decoder.blocks.iter_mut().enumerate() {
            visit_block_mut(b, &format!("decoder.blocks.{i}"), &mut |n, t| f(n, t));
        }
        f("decoder.ln_f.gamma", &mut self.decoder.ln_f.gamma);
        f("decoder.ln_f.beta", &mut self.decoder.ln_f.beta);
        visit_linear_mut(&mut self.decoder.lm_head, "decoder.lm_head", &mut |n, t| f(n, t));

        if let Some(adapter) = &mut self.decoder.adapter {
            for (target, pair) in &mut adapter.entries {
                f(&format!("lora.{target}.a"), &mut pair.a);
                f(&format!("lora.{target}.b"), &mut pair.b);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }
}

fn block_to_f64<T: Scalar>(b: &BlockParams<T>) -> BlockParams<f64> {
    use crate::nn::layers::{AttentionParams, LayerNormParams, MlpParams};
    fn lin<T: Scalar>(l: &Linear<T>) -> Linear<f64> {
        Linear {
            w: l.w.to_f64(),
            b: l.b.to_f64(),
        }
    }
    BlockParams {
        ln1: LayerNormParams {
            gamma: b.ln1.gamma.to_f64(),
            beta: b.ln1.beta.to_f64(),
        },
        attn: AttentionParams {
            q: lin(&b.attn.q),
            k: lin(&b.attn.k),
            v: lin(&b.attn.v),
            o: lin(&b.attn.o),
            n_heads: b.attn.n_heads,
        },
        ln2: LayerNormParams {
            gamma: b.ln2.gamma.to_f64(),
            beta: b.ln2.beta.to_f64(),
        },
        mlp: MlpParams {
            fc1: lin(&b.mlp.fc1),
            fc2: lin(&b.mlp.fc2),
        },
    }
}

fn visit_linear<T: Scalar>(l: &Linear<T>, name: &str, f: &mut impl FnMut(&str, &Tensor<T>)) {
    f(&format!("{name}.w"), &l.w);
    f(&format!("{name}.b"), &l.b);
}

fn visit_linear_mut<T: Scalar>(
    l: &mut Linear<T>,
    name: &str,
    f: &mut impl FnMut(&str, &mut Tensor<T>),
) {
    f(&format!("{name}.w"), &mut l.w);
    f(&format!("{name}.b"), &mut l.b);
}

fn visit_block<T: Scalar>(b: &BlockParams<T>, name: &str, f: &mut impl FnMut(&str, &Tensor<T>)) {
    f(&format!("{name}.ln1.gamma"), &b.ln1.gamma);
    f(&format!("{name}.ln1.beta"), &b.ln1.beta);
    visit_linear(&b.attn.q, &format!("{name}.attn.q"), f);
    visit_linear(&b.attn.k, &format!("{name}.attn.k"), f);
    visit_linear(&b.attn.v, &format!("{name}.attn.v"), f);
    visit_linear(&b.attn.o, &format!("{name}.attn.o"), f);
    f(&format!("{name}.ln2.gamma"), &b.ln2.gamma);
    f(&format!("{name}.ln2.beta"), &b.ln2.beta);
    visit_linear(&b.mlp.fc1, &format!("{name}.mlp.fc1"), f);
    visit_linear(&b.mlp.fc2, &format!("{name}.mlp.fc2"), f);
}

fn visit_block_mut<T: Scalar>(
    b: &mut BlockParams<T>,
    name: &str,
    f: &mut impl FnMut(&str, &mut Tensor<T>),
) {
    f(&format!("{name}.ln1.gamma"), &mut b.ln1.gamma);
    f(&format!("{name}.ln1.beta"), &mut b.ln1.beta);
    visit_linear_mut(&mut b.attn.q, &format!("{name}.attn.q"), f);
    visit_linear_mut(&mut b.attn.k, &format!("{name}.attn.k"), f);
    visit_linear_mut(&mut b.attn.v, &format!("{name}.attn.v"), f);
    visit_linear_mut(&mut b.attn.o, &format!("{name}.attn.o"), f);
    f(&format!("{name}.ln2.gamma"), &mut b.ln2.gamma);
    f(&format!("{name}.ln2.beta"), &mut b.ln2.beta);
    visit_linear_mut(&mut b.mlp.fc1, &format!("{name}.mlp.fc1"), f);
    visit_linear_mut(&mut b.mlp.fc2, &format!("{name}.mlp.fc2"), f);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{sine, TARGET_SAMPLE_RATE};

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::default();
        let a: Model<f32> = Model::init(&cfg, 7).unwrap();
        let b: Model<f32> = Model::init(&cfg, 7).unwrap();
        let c: Model<f32> = Model::init(&cfg, 8).unwrap();
        let mut identical = true;
        a.visit_params(&mut |name, t| {
            let mut other = None;
            b.visit_params(&mut |n2, t2| {
                if n2 == name {
                    other = Some(t2.clone());
                }
            });
            if other.unwrap().data() != t.data() {
                identical = false;
            }
        });
        assert!(identical);
        let mut any_diff = false;
        a.visit_params(&mut |name, t| {
            let mut other = None;
            c.visit_params(&mut |n2, t2| {
                if n2 == name {
                    other = Some(t2.clone());
                }
            });
            if other.unwrap().data() != t.data() {
                any_diff = true;
            }
        });
        assert!(any_diff);
    }

    #[test]
    fn visit_names_are_unique_and_mut_matches() {
        let cfg = ModelConfig::default();
        let mut m: Model<f32> = Model::init(&cfg, 1).unwrap();
        let mut names = Vec::new();
        m.visit_params(&mut |n, _| names.push(n.to_string()));
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        let mut mut_names = Vec::new();
        m.visit_params_mut(&mut |n, _| mut_names.push(n.to_string()));
        assert_eq!(names, mut_names);
    }

    #[test]
    fn pipeline_token_counts_match_length_law() {
        let cfg = ModelConfig::default();
        let m: Model<f32> = Model::init(&cfg, 3).unwrap();
        let ex = MelExtractor::new();
        let w = Waveform::new(sine(440.0, 1.0, 0.5, TARGET_SAMPLE_RATE), TARGET_SAMPLE_RATE)
            .unwrap();
        let (tokens, lens) = m.audio_tokens(&ex, &w).unwrap();
        assert_eq!(lens.frames, 100);
        assert_eq!(lens.features, 25);
        assert_eq!(tokens.len(), 5);
        assert_eq!(lens.audio_tokens, 5);
    }

    #[test]
    fn audio_token_count_agrees_with_actual_pipeline() {
        let cfg = ModelConfig {
            encoder: crate::config::EncoderConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                ff_dim: 32,
                ..Default::default()
            },
            ..Default::default()
        };
        let m: Model<f32> = Model::init(&cfg, 5).unwrap();
        let ex = MelExtractor::new();
        let mut rng = ModelRng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.range_inclusive(1, 200_000);
            let w = Waveform::new(vec![0.1; n], TARGET_SAMPLE_RATE).unwrap();
            let (tokens, _) = m.audio_tokens(&ex, &w).unwrap();
            let predicted = crate::projector::audio_token_count(
                n as f64 / TARGET_SAMPLE_RATE as f64,
                &cfg.encoder,
                cfg.projector.stack_factor,
            )
            .unwrap();
            assert_eq!(tokens.len(), predicted, "n={}", n);
        }
    }
}
