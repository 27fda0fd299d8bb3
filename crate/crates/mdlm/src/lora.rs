//! Low-rank adapters for the decoder's linear maps.
//!
//! An adapter pair (A: r x in, B: out x r) adds `(alpha/r) * B . A` to the
//! effective weight of its target. B starts at zero, so a fresh adapter is
//! an exact no-op. Targets are either the attention query/value projections
//! or every linear map inside the decoder blocks.

use serde::{Deserialize, Serialize};

use crate::config::DecoderConfig;
use crate::error::{Error, Result};
use crate::nn::rng::{ModelRng, INIT_STD};
use crate::nn::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Qv,
    AllLinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub target: LoraTarget,
}

impl LoraConfig {
    pub fn new(target: LoraTarget) -> LoraConfig {
        LoraConfig {
            rank: 8,
            alpha: 32.0,
            dropout: 0.1,
            target,
        }
    }

    /// alpha / r; 4.0 at the default rank 8 / alpha 32.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone)]
pub struct LoraPair<T: Scalar = f32> {
    /// r x in_dim
    pub a: Tensor<T>,
    /// out_dim x r
    pub b: Tensor<T>,
}

/// Adapter set attached to a decoder; entry names identify target linear
/// maps relative to the decoder, e.g. `blocks.0.attn.q`.
#[derive(Debug, Clone)]
pub struct LoraAdapter<T: Scalar = f32> {
    pub cfg: LoraConfig,
    pub entries: Vec<(String, LoraPair<T>)>,
}

/// Names and (in, out) shapes of the decoder's per-block linear maps, in
/// canonical order. This is the enumeration "all_linear" adapts; the output
/// head is a separate projection and is not included.
pub fn decoder_linear_maps(cfg: &DecoderConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.d_model;
    let ff = cfg.ff_dim;
    let mut out = Vec::new();
    for i in 0..cfg.n_layers {
        for name in ["q", "k", "v", "o"] {
            out.push((format!("blocks.{i}.attn.{name}"), d, d));
        }
        out.push((format!("blocks.{i}.mlp.fc1"), d, ff));
        out.push((format!("blocks.{i}.mlp.fc2"), ff, d));
    }
    out
}

fn is_qv(name: &str) -> bool {
    name.ends_with(".attn.q") || name.ends_with(".attn.v")
}

impl<T: Scalar> LoraAdapter<T> {
    /// Fresh adapter for every targeted map: A ~ N(0, 0.02), B = 0.
    pub fn init(cfg: LoraConfig, dec: &DecoderConfig, rng: &mut ModelRng) -> LoraAdapter<T> {
        let entries = decoder_linear_maps(dec)
            .into_iter()
            .filter(|(name, _, _)| match cfg.target {
                LoraTarget::AllLinear => true,
                LoraTarget::Qv => is_qv(name),
            })
            .map(|(name, in_dim, out_dim)| {
                let pair = LoraPair {
                    a: rng.normal(&[cfg.rank, in_dim], INIT_STD),
                    b: Tensor::zeros(&[out_dim, cfg.rank]),
                };
                (name, pair)
            })
            .collect();
        LoraAdapter { cfg, entries }
    }

    pub fn get(&self, name: &str) -> Option<&LoraPair<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }

    /// Shape-check every entry against the decoder it will attach to.
    pub fn validate(&self, dec: &DecoderConfig) -> Result<()> {
        let maps = decoder_linear_maps(dec);
        for (name, pair) in &self.entries {
            let (_, in_dim, out_dim) = maps
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("adapter targets unknown map {name}"))
                })?;
            let want_a = [self.cfg.rank, *in_dim];
            let want_b = [*out_dim, self.cfg.rank];
            if pair.a.shape() != want_a || pair.b.shape() != want_b {
                return Err(Error::shape(
                    "apply_lora",
                    format!(
                        "{name}: A {:?} (want {:?}), B {:?} (want {:?})",
                        pair.a.shape(),
                        want_a,
                        pair.b.shape(),
                        want_b
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn to_f64(&self) -> LoraAdapter<f64> {
        LoraAdapter {
            cfg: self.cfg.clone(),
            entries: self
                .entries
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        LoraPair {
                            a: p.a.to_f64(),
                            b: p.b.to_f64(),
                        },
                    )
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_is_alpha_over_rank() {
        let cfg = LoraConfig::new(LoraTarget::Qv);
        assert_eq!(cfg.scaling(), 4.0);
        let doubled = LoraConfig {
            alpha: 64.0,
            ..cfg
        };
        assert_eq!(doubled.scaling(), 8.0);
    }

    #[test]
    fn qv_targets_only_query_and_value() {
        let dec = DecoderConfig::default();
        let mut rng = ModelRng::seed_from_u64(0);
        let ad: LoraAdapter<f32> = LoraAdapter::init(LoraConfig::new(LoraTarget::Qv), &dec, &mut rng);
        assert_eq!(ad.entries.len(), 2 * dec.n_layers);
        for (name, _) in &ad.entries {
            assert!(is_qv(name), "{name}");
        }
    }

    #[test]
    fn all_linear_covers_every_block_map() {
        let dec = DecoderConfig::default();
        let mut rng = ModelRng::seed_from_u64(0);
        let ad: LoraAdapter<f32> =
            LoraAdapter::init(LoraConfig::new(LoraTarget::AllLinear), &dec, &mut rng);
        assert_eq!(ad.entries.len(), decoder_linear_maps(&dec).len());
        assert_eq!(ad.entries.len(), 6 * dec.n_layers);
    }

    #[test]
    fn fresh_adapter_has_zero_b() {
        let dec = DecoderConfig::default();
        let mut rng = ModelRng::seed_from_u64(0);
        let ad: LoraAdapter<f32> = LoraAdapter::init(LoraConfig::new(LoraTarget::Qv), &dec, &mut rng);
        for (_, pair) in &ad.entries {
            assert!(pair.b.data().iter().all(|&v| v == 0.0));
            assert!(pair.a.data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn validate_rejects_wrong_shapes() {
        let dec = DecoderConfig::default();
        let mut rng = ModelRng::seed_from_u64(0);
        let mut ad: LoraAdapter<f32> =
            LoraAdapter::init(LoraConfig::new(LoraTarget::Qv), &dec, &mut rng);
        ad.validate(&dec).unwrap();
        ad.entries[0].1.a = Tensor::zeros(&[8, 63]);
        assert!(ad.validate(&dec).is_err());
    }
}
