//! 25 Hz frame features -> 5 Hz audio tokens in decoder space.
//!
//! Five consecutive feature vectors are concatenated (tail zero-padded) and
//! passed through a two-layer MLP into the decoder embedding space, giving
//! one token per 200 ms of audio.

use crate::audio::HOP;
use crate::config::{EncoderConfig, ProjectorConfig};
use crate::encoder::{feature_count, FrameFeatures};
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::layers::{linear_tape, Linear, LinearNodes, TapeDropout};
use crate::nn::rng::ModelRng;
use crate::nn::tensor::{Scalar, Tensor};

/// Projected audio tokens, one per 200 ms.
#[derive(Debug, Clone)]
pub struct AudioTokens<T: Scalar = f32> {
    /// K x decoder_dim
    pub tokens: Tensor<T>,
}

impl<T: Scalar> AudioTokens<T> {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn seconds_per_token(&self) -> f64 {
        0.2
    }

    pub fn empty(decoder_dim: usize) -> AudioTokens<T> {
        AudioTokens {
            tokens: Tensor::zeros(&[0, decoder_dim]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProjectorParams<T: Scalar = f32> {
    pub cfg: ProjectorConfig,
    /// (stack_factor * encoder_d) x hidden
    pub fc1: Linear<T>,
    /// hidden x decoder_d
    pub fc2: Linear<T>,
}

impl<T: Scalar> ProjectorParams<T> {
    pub fn init(
        cfg: &ProjectorConfig,
        encoder_d: usize,
        decoder_d: usize,
        rng: &mut ModelRng,
    ) -> Result<ProjectorParams<T>> {
        cfg.validate()?;
        let hidden = cfg.hidden(decoder_d);
        Ok(ProjectorParams {
            cfg: cfg.clone(),
            fc1: Linear::init(rng, cfg.stack_factor * encoder_d, hidden),
            fc2: Linear::init(rng, hidden, decoder_d),
        })
    }

    /// Concatenate groups of `stack_factor` consecutive feature vectors;
    /// the final partial group is zero-padded.
    pub fn downsample_stack(&self, f: &FrameFeatures<T>) -> Result<Tensor<T>> {
        if f.is_empty() {
            return Err(Error::InvalidArgument("empty frame features".to_string()));
        }
        let d = f.features.cols();
        let k = f.len().div_ceil(self.cfg.stack_factor);
        f.features
            .pad_rows(k * self.cfg.stack_factor)?
            .reshape(&[k, self.cfg.stack_factor * d])
    }

    /// Two-layer MLP with GELU, row count preserved.
    pub fn project(&self, stacked: &Tensor<T>) -> Result<AudioTokens<T>> {
        if stacked.cols() != self.fc1.in_dim() {
            return Err(Error::shape(
                "project",
                format!("row width {} vs expected {}", stacked.cols(), self.fc1.in_dim()),
            ));
        }
        let h = stacked
            .matmul(&self.fc1.w)?
            .add_bias(&self.fc1.b)?
            .map(crate::nn::tensor::gelu);
        let tokens = h.matmul(&self.fc2.w)?.add_bias(&self.fc2.b)?;
        tokens.check_finite("project")?;
        Ok(AudioTokens { tokens })
    }

    pub fn forward(&self, f: &FrameFeatures<T>) -> Result<AudioTokens<T>> {
        let stacked = self.downsample_stack(f)?;
        self.project(&stacked)
    }
}

/// Audio tokens produced for `n` samples of 16 kHz audio: the exact
/// frontend -> encoder -> projector length law.
pub fn tokens_from_samples(n: usize, enc: &EncoderConfig, stack_factor: usize) -> usize {
    let frames = n.div_ceil(HOP);
    feature_count(frames, enc).div_ceil(stack_factor)
}

/// Length law from a duration in seconds.
///
/// The duration is first converted to a whole sample count (round, as the
/// resampler does); the remaining arithmetic is exact integer ceil work.
pub fn audio_token_count(
    duration_s: f64,
    enc: &EncoderConfig,
    stack_factor: usize,
) -> Result<usize> {
    if !(duration_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    let samples = (duration_s * crate::audio::TARGET_SAMPLE_RATE as f64).round() as usize;
    Ok(tokens_from_samples(samples.max(1), enc, stack_factor))
}

// ── Tape path ──────────────────────────────────────────────────────────

pub struct ProjectorNodes {
    pub fc1: LinearNodes,
    pub fc2: LinearNodes,
}

impl<T: Scalar> ProjectorParams<T> {
    pub fn bind(&self, g: &mut Graph<T>, name: &str) -> ProjectorNodes {
        ProjectorNodes {
            fc1: self.fc1.bind(g, &format!("{name}.fc1")),
            fc2: self.fc2.bind(g, &format!("{name}.fc2")),
        }
    }

    /// Recorded stack + MLP over encoder features already on the tape.
    pub fn forward_tape(
        &self,
        g: &mut Graph<T>,
        nodes: &ProjectorNodes,
        features: NodeId,
    ) -> Result<NodeId> {
        let rows = g.value(features).rows();
        if rows == 0 {
            return Err(Error::InvalidArgument("empty frame features".to_string()));
        }
        let d = g.value(features).cols();
        let k = rows.div_ceil(self.cfg.stack_factor);
        let padded = g.pad_rows(features, k * self.cfg.stack_factor)?;
        let stacked = g.reshape(padded, &[k, self.cfg.stack_factor * d])?;
        let h1 = linear_tape(g, stacked, &nodes.fc1, None, &mut TapeDropout::Off)?;
        let act = g.gelu(h1)?;
        linear_tape(g, act, &nodes.fc2, None, &mut TapeDropout::Off)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(stack: usize) -> ProjectorParams<f32> {
        let cfg = ProjectorConfig {
            stack_factor: stack,
            hidden_dim: Some(24),
        };
        let mut rng = ModelRng::seed_from_u64(21);
        ProjectorParams::init(&cfg, 16, 12, &mut rng).unwrap()
    }

    fn feats(n: usize) -> FrameFeatures<f32> {
        let mut rng = ModelRng::seed_from_u64(n as u64);
        FrameFeatures {
            features: rng.normal(&[n, 16], 1.0),
            source_frames: n * 4,
        }
    }

    #[test]
    fn stack_row_counts() {
        let p = params(5);
        assert_eq!(p.downsample_stack(&feats(750)).unwrap().rows(), 150);
        assert_eq!(p.downsample_stack(&feats(5)).unwrap().rows(), 1);
        assert_eq!(p.downsample_stack(&feats(6)).unwrap().rows(), 2);
    }

    #[test]
    fn stack_concatenates_in_order_and_pads_tail() {
        let p = params(5);
        let f = feats(6);
        let stacked = p.downsample_stack(&f).unwrap();
        assert_eq!(stacked.shape(), &[2, 80]);
        // First row == features 0..5 concatenated.
        let flat: Vec<f32> = f.features.data()[..80].to_vec();
        assert_eq!(&stacked.data()[..80], flat.as_slice());
        // Second row: one real vector then zeros.
        assert_eq!(&stacked.data()[80..96], &f.features.data()[80..96]);
        assert!(stacked.data()[96..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn project_zero_weights_gives_zero_tokens() {
        let mut p = params(5);
        p.fc2.w = Tensor::zeros(&[24, 12]);
        p.fc2.b = Tensor::zeros(&[12]);
        let out = p.forward(&feats(10)).unwrap();
        assert!(out.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn project_preserves_row_count() {
        let p = params(5);
        let out = p.forward(&feats(750)).unwrap();
        assert_eq!(out.len(), 150);
    }

    #[test]
    fn project_rejects_wrong_width() {
        let p = params(5);
        let bad = Tensor::<f32>::zeros(&[3, 17]);
        assert!(p.project(&bad).is_err());
    }

    #[test]
    fn project_matches_f64_reference() {
        let p = params(5);
        let f = feats(23);
        let out32 = p.forward(&f).unwrap();
        let p64 = ProjectorParams::<f64> {
            cfg: p.cfg.clone(),
            fc1: Linear { w: p.fc1.w.to_f64(), b: p.fc1.b.to_f64() },
            fc2: Linear { w: p.fc2.w.to_f64(), b: p.fc2.b.to_f64() },
        };
        let f64s = FrameFeatures {
            features: f.features.to_f64(),
            source_frames: f.source_frames,
        };
        let out64 = p64.forward(&f64s).unwrap();
        for (a, b) in out32.tokens.data().iter().zip(out64.tokens.data().iter()) {
            assert!(((*a as f64) - b).abs() < 1e-5);
        }
    }

    #[test]
    fn token_count_examples() {
        let enc = EncoderConfig::default();
        assert_eq!(audio_token_count(30.0, &enc, 5).unwrap(), 150);
        assert_eq!(audio_token_count(1.0, &enc, 5).unwrap(), 5);
        assert_eq!(audio_token_count(0.01, &enc, 5).unwrap(), 1);
        assert_eq!(audio_token_count(10.08, &enc, 5).unwrap(), 51);
        assert!(audio_token_count(0.0, &enc, 5).is_err());
        assert!(audio_token_count(-3.0, &enc, 5).is_err());
    }

    #[test]
    fn token_rate_law_over_random_durations() {
        let enc = EncoderConfig::default();
        let mut rng = ModelRng::seed_from_u64(77);
        for _ in 0..1000 {
            let d = rng.uniform(1e-3, 60.0);
            let tokens = audio_token_count(d, &enc, 5).unwrap() as f64;
            assert!(
                (tokens - 5.0 * d).abs() <= 2.0,
                "duration {} gave {} tokens",
                d,
                tokens
            );
        }
        // Window-and-stack aligned durations (multiples of 5 windows,
        // 50.4 s) are exactly 5 tokens per second.
        for k in [5usize, 10, 15] {
            let d = 10.08 * k as f64;
            let n = (d * 16000.0).round() as usize;
            assert_eq!(tokens_from_samples(n, &enc, 5) as f64, d * 5.0);
        }
    }

    #[test]
    fn tape_matches_eval() {
        let p = params(5);
        let p64 = ProjectorParams::<f64> {
            cfg: p.cfg.clone(),
            fc1: Linear { w: p.fc1.w.to_f64(), b: p.fc1.b.to_f64() },
            fc2: Linear { w: p.fc2.w.to_f64(), b: p.fc2.b.to_f64() },
        };
        let f = feats(13);
        let f64s = FrameFeatures {
            features: f.features.to_f64(),
            source_frames: f.source_frames,
        };
        let eval = p64.forward(&f64s).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let nodes = p64.bind(&mut g, "projector");
        let fid = g.constant(f64s.features.clone());
        let out = p64.forward_tape(&mut g, &nodes, fid).unwrap();
        assert_eq!(g.value(out).data(), eval.tokens.data());
    }
}
