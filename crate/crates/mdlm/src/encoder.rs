//! Frame-level transformer encoder over mel frames.
//!
//! Each group of `time_patch` consecutive frames is linearly embedded, so a
//! window of T frames becomes ceil(T/4) positions (40 ms steps, 25 Hz).
//! Windows are capped at 1008 frames; longer inputs are split into
//! non-overlapping windows that are encoded independently and concatenated,
//! with position embeddings restarting in every window.

use crate::audio::{MelSpectrogram, N_MELS};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::layers::{
    self, BlockDeltaNodes, BlockNodes, BlockParams, LayerNormNodes, LayerNormParams, Linear,
    LinearNodes, TapeDropout,
};
use crate::nn::rng::{ModelRng, INIT_STD};
use crate::nn::tensor::{Scalar, Tensor};

/// Encoder outputs at 40 ms intervals.
#[derive(Debug, Clone)]
pub struct FrameFeatures<T: Scalar = f32> {
    /// F x d_model
    pub features: Tensor<T>,
    /// Mel frames that produced them.
    pub source_frames: usize,
}

impl<T: Scalar> FrameFeatures<T> {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams<T: Scalar = f32> {
    pub cfg: EncoderConfig,
    /// (time_patch * 64) x d_model
    pub patch: Linear<T>,
    /// max_positions x d_model, per-window learned positions
    pub pos: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub ln_f: LayerNormParams<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn init(cfg: &EncoderConfig, rng: &mut ModelRng) -> Result<EncoderParams<T>> {
        cfg.validate()?;
        let in_dim = cfg.time_patch * N_MELS;
        Ok(EncoderParams {
            cfg: cfg.clone(),
            patch: Linear::init(rng, in_dim, cfg.d_model),
            pos: rng.normal(&[cfg.max_positions(), cfg.d_model], INIT_STD),
            blocks: (0..cfg.n_layers)
                .map(|_| BlockParams::init(rng, cfg.d_model, cfg.n_heads, cfg.ff_dim))
                .collect(),
            ln_f: LayerNormParams::identity(cfg.d_model),
        })
    }

    /// Number of patch positions for a window of `frames` mel frames.
    pub fn window_positions(&self, frames: usize) -> usize {
        frames.div_ceil(self.cfg.time_patch)
    }

    fn check_window(&self, frames: usize) -> Result<()> {
        if frames == 0 {
            return Err(Error::InvalidArgument("empty encoder window".to_string()));
        }
        if frames > self.cfg.max_window_frames {
            return Err(Error::InvalidArgument(format!(
                "window of {} frames exceeds the {}-frame cap; split into windows first",
                frames, self.cfg.max_window_frames
            )));
        }
        Ok(())
    }

    /// Group frames by `time_patch`, embed linearly, add position embeddings.
    /// The tail is zero-padded to a full group.
    pub fn patch_embed(&self, window: &Tensor<T>) -> Result<Tensor<T>> {
        let frames = window.rows();
        self.check_window(frames)?;
        let positions = self.window_positions(frames);
        let stacked = window
            .pad_rows(positions * self.cfg.time_patch)?
            .reshape(&[positions, self.cfg.time_patch * N_MELS])?;
        let embedded = stacked.matmul(&self.patch.w)?.add_bias(&self.patch.b)?;
        embedded.add(&self.pos.narrow_rows(0, positions)?)
    }

    /// Patch embedding followed by the non-causal block stack.
    pub fn encode_window(&self, window: &Tensor<T>) -> Result<FrameFeatures<T>> {
        let mut h = self.patch_embed(window)?;
        for block in &self.blocks {
            h = layers::transformer_block(&h, block, false)?;
        }
        let features = crate::nn::graph::layer_norm_forward(&h, &self.ln_f.gamma, &self.ln_f.beta)?;
        features.check_finite("encode_window")?;
        Ok(FrameFeatures {
            features,
            source_frames: window.rows(),
        })
    }

    /// Split into consecutive windows of at most `max_window_frames`, encode
    /// each independently, and concatenate the features in order.
    pub fn encode(&self, mel: &MelSpectrogram) -> Result<FrameFeatures<T>>
    where
        T: Scalar,
    {
        let frames32 = &mel.frames;
        let total = frames32.rows();
        if total == 0 {
            return Err(Error::InvalidArgument("empty mel spectrogram".to_string()));
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < total {
            let len = (total - start).min(self.cfg.max_window_frames);
            let window32 = frames32.narrow_rows(start, len)?;
            let window = convert::<T>(&window32);
            parts.push(self.encode_window(&window)?.features);
            start += len;
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(FrameFeatures {
            features: Tensor::concat_rows(&refs)?,
            source_frames: total,
        })
    }
}

fn convert<T: Scalar>(t: &Tensor<f32>) -> Tensor<T> {
    Tensor::from_vec(
        t.shape(),
        t.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
    .expect("same shape")
}

/// Feature count law: sum of ceil(window/time_patch) over 1008-frame windows.
pub fn feature_count(total_frames: usize, cfg: &EncoderConfig) -> usize {
    let mut count = 0;
    let mut remaining = total_frames;
    while remaining > 0 {
        let len = remaining.min(cfg.max_window_frames);
        count += len.div_ceil(cfg.time_patch);
        remaining -= len;
    }
    count
}

// ── Tape path ──────────────────────────────────────────────────────────

pub struct EncoderNodes {
    pub patch: LinearNodes,
    pub pos: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub ln_f: LayerNormNodes,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn bind(&self, g: &mut Graph<T>, name: &str) -> EncoderNodes {
        EncoderNodes {
            patch: self.patch.bind(g, &format!("{name}.patch_embed")),
            pos: g.param(&format!("{name}.pos_embed"), self.pos.clone()),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.bind(g, &format!("{name}.blocks.{i}")))
                .collect(),
            ln_f: self.ln_f.bind(g, &format!("{name}.ln_f")),
        }
    }

    /// Recorded version of [`EncoderParams::encode`]. The mel input enters
    /// the graph as a constant (no gradient flows into features).
    pub fn encode_tape(
        &self,
        g: &mut Graph<T>,
        nodes: &EncoderNodes,
        mel: &MelSpectrogram,
    ) -> Result<NodeId> {
        let total = mel.frames.rows();
        if total == 0 {
            return Err(Error::InvalidArgument("empty mel spectrogram".to_string()));
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < total {
            let len = (total - start).min(self.cfg.max_window_frames);
            let window = convert::<T>(&mel.frames.narrow_rows(start, len)?);
            let positions = self.window_positions(len);
            let win = g.constant(window);
            let padded = g.pad_rows(win, positions * self.cfg.time_patch)?;
            let stacked = g.reshape(padded, &[positions, self.cfg.time_patch * N_MELS])?;
            let proj = g.matmul(stacked, nodes.patch.w)?;
            let embedded = g.add_bias(proj, nodes.patch.b)?;
            let pos = g.narrow_rows(nodes.pos, 0, positions)?;
            let mut h = g.add(embedded, pos)?;
            for block in &nodes.blocks {
                h = layers::transformer_block_tape(
                    g,
                    h,
                    block,
                    false,
                    &BlockDeltaNodes::default(),
                    &mut TapeDropout::Off,
                )?;
            }
            parts.push(g.layer_norm(h, nodes.ln_f.gamma, nodes.ln_f.beta)?);
            start += len;
        }
        g.concat_rows(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{MelExtractor, Waveform, TARGET_SAMPLE_RATE};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ff_dim: 32,
            ..EncoderConfig::default()
        }
    }

    fn mel_of_frames(t: usize) -> MelSpectrogram {
        let mut rng = ModelRng::seed_from_u64(t as u64 + 17);
        MelSpectrogram {
            frames: rng.normal(&[t, N_MELS], 1.0),
        }
    }

    #[test]
    fn patch_embed_position_counts() {
        let mut rng = ModelRng::seed_from_u64(0);
        let enc: EncoderParams<f32> = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        assert_eq!(enc.patch_embed(&mel_of_frames(1008).frames).unwrap().rows(), 252);
        assert_eq!(enc.patch_embed(&mel_of_frames(4).frames).unwrap().rows(), 1);
        assert_eq!(enc.patch_embed(&mel_of_frames(5).frames).unwrap().rows(), 2);
        assert!(enc.patch_embed(&mel_of_frames(1009).frames).is_err());
    }

    #[test]
    fn tail_padding_is_zeros_not_garbage() {
        // T=5 and T=8 with identical first 5 frames: first output position
        // must agree; the second row of T=5 sees zero-padded frames 6..8.
        let mut rng = ModelRng::seed_from_u64(0);
        let enc: EncoderParams<f32> = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        let base = mel_of_frames(8);
        let five = MelSpectrogram {
            frames: base.frames.narrow_rows(0, 5).unwrap(),
        };
        let mut padded = base.frames.narrow_rows(0, 5).unwrap().pad_rows(8).unwrap();
        // Sanity: padded rows equal explicit zero rows.
        for i in 5 * N_MELS..8 * N_MELS {
            assert_eq!(padded.data()[i], 0.0);
        }
        let a = enc.patch_embed(&five.frames).unwrap();
        let b = enc.patch_embed(&mut padded).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn encode_window_lengths() {
        let mut rng = ModelRng::seed_from_u64(1);
        let enc: EncoderParams<f32> = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        assert_eq!(enc.encode_window(&mel_of_frames(100).frames).unwrap().len(), 25);
        assert_eq!(enc.encode_window(&mel_of_frames(1).frames).unwrap().len(), 1);
    }

    #[test]
    fn encode_window_is_deterministic() {
        let mut rng = ModelRng::seed_from_u64(2);
        let enc: EncoderParams<f32> = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        let mel = mel_of_frames(500);
        let a = enc.encode_window(&mel.frames).unwrap();
        let b = enc.encode_window(&mel.frames).unwrap();
        assert_eq!(a.features.data(), b.features.data());
    }

    #[test]
    fn encode_splits_windows_and_concatenates() {
        let mut rng = ModelRng::seed_from_u64(3);
        let enc: EncoderParams<f32> = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        let mel = mel_of_frames(3000);
        let out = enc.encode(&mel).unwrap();
        assert_eq!(out.len(), 252 + 252 + 246);

        let mel1009 = mel_of_frames(1009);
        assert_eq!(enc.encode(&mel1009).unwrap().len(), 253);
        assert_eq!(enc.encode(&mel_of_frames(1008)).unwrap().len(), 252);
    }

    #[test]
    fn window_concatenation_identity_is_bit_exact() {
        let mut rng = ModelRng::seed_from_u64(4);
        let enc: EncoderParams<f32> = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        let mel = mel_of_frames(2500); // windows: 1008, 1008, 484
        let whole = enc.encode(&mel).unwrap();

        let first = MelSpectrogram {
            frames: mel.frames.narrow_rows(0, 2016).unwrap(),
        };
        let rest = MelSpectrogram {
            frames: mel.frames.narrow_rows(2016, 484).unwrap(),
        };
        let a = enc.encode(&first).unwrap();
        let b = enc.encode(&rest).unwrap();
        let glued = Tensor::concat_rows(&[&a.features, &b.features]).unwrap();
        assert_eq!(whole.features.data(), glued.data());
    }

    #[test]
    fn features_do_not_depend_on_window_offset() {
        let mut rng = ModelRng::seed_from_u64(5);
        let enc: EncoderParams<f32> = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        let content = mel_of_frames(400);
        // Same content as window 0 vs window 1 (after 1008 frames of noise).
        let lead = mel_of_frames(1008);
        let shifted = MelSpectrogram {
            frames: Tensor::concat_rows(&[&lead.frames, &content.frames]).unwrap(),
        };
        let solo = enc.encode(&content).unwrap();
        let moved = enc.encode(&shifted).unwrap();
        let tail = moved.features.narrow_rows(252, 100).unwrap();
        assert_eq!(solo.features.data(), tail.data());
    }

    #[test]
    fn feature_count_law_random_lengths() {
        let cfg = tiny_cfg();
        let mut rng = ModelRng::seed_from_u64(6);
        let enc: EncoderParams<f32> = EncoderParams::init(&cfg, &mut rng).unwrap();
        for _ in 0..500 {
            let t = rng.range_inclusive(1, 5000);
            let mut want = 0;
            let mut left = t;
            while left > 0 {
                let len = left.min(cfg.max_window_frames);
                want += len.div_ceil(cfg.time_patch);
                left -= len;
            }
            assert_eq!(feature_count(t, &cfg), want);
            // Full encode checked on a subsample to keep the test quick.
            if t % 97 == 0 {
                assert_eq!(enc.encode(&mel_of_frames(t)).unwrap().len(), want);
            }
        }
    }

    #[test]
    fn tape_encode_matches_eval() {
        let mut rng = ModelRng::seed_from_u64(7);
        let enc: EncoderParams<f64> = EncoderParams::init(&tiny_cfg(), &mut rng).unwrap();
        let ex = MelExtractor::new();
        let w = Waveform::new(
            crate::audio::sine(440.0, 1.3, 0.5, TARGET_SAMPLE_RATE),
            TARGET_SAMPLE_RATE,
        )
        .unwrap();
        let mel = ex.log_mel(&w).unwrap();
        let eval = enc.encode(&mel).unwrap();

        let mut g: Graph<f64> = Graph::new();
        let nodes = enc.bind(&mut g, "encoder");
        let out = enc.encode_tape(&mut g, &nodes, &mel).unwrap();
        assert_eq!(g.value(out).data(), eval.features.data());
    }
}
