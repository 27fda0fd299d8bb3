//! Transformer building blocks shared by the audio encoder and the decoder.
//!
//! Every layer exists in two forms: a direct evaluation over tensors
//! (inference path) and a tape-recorded form over graph nodes (training
//! path). Both compose the same kernels, so a forward pass produces the
//! same values either way.

use crate::error::{Error, Result};
use crate::nn::graph::{layer_norm_forward, Graph, NodeId};
use crate::nn::rng::{ModelRng, INIT_STD};
use crate::nn::tensor::{gelu, Scalar, Tensor};

// ── Parameters ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Linear<T: Scalar = f32> {
    /// in_dim x out_dim
    pub w: Tensor<T>,
    /// out_dim
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init(rng: &mut ModelRng, in_dim: usize, out_dim: usize) -> Linear<T> {
        Linear {
            w: rng.normal(&[in_dim, out_dim], INIT_STD),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn identity(dim: usize) -> LayerNormParams<T> {
        LayerNormParams {
            gamma: Tensor::from_vec(&[dim], vec![T::one(); dim]).expect("shape"),
            beta: Tensor::zeros(&[dim]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams<T: Scalar = f32> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub n_heads: usize,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn init(rng: &mut ModelRng, d_model: usize, n_heads: usize) -> AttentionParams<T> {
        AttentionParams {
            q: Linear::init(rng, d_model, d_model),
            k: Linear::init(rng, d_model, d_model),
            v: Linear::init(rng, d_model, d_model),
            o: Linear::init(rng, d_model, d_model),
            n_heads,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpParams<T: Scalar = f32> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> MlpParams<T> {
    pub fn init(rng: &mut ModelRng, d_model: usize, ff_dim: usize) -> MlpParams<T> {
        MlpParams {
            fc1: Linear::init(rng, d_model, ff_dim),
            fc2: Linear::init(rng, ff_dim, d_model),
        }
    }
}

/// Pre-norm block: LN -> attention -> residual, LN -> MLP -> residual.
#[derive(Debug, Clone)]
pub struct BlockParams<T: Scalar = f32> {
    pub ln1: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub ln2: LayerNormParams<T>,
    pub mlp: MlpParams<T>,
}

impl<T: Scalar> BlockParams<T> {
    pub fn init(
        rng: &mut ModelRng,
        d_model: usize,
        n_heads: usize,
        ff_dim: usize,
    ) -> BlockParams<T> {
        BlockParams {
            ln1: LayerNormParams::identity(d_model),
            attn: AttentionParams::init(rng, d_model, n_heads),
            ln2: LayerNormParams::identity(d_model),
            mlp: MlpParams::init(rng, d_model, ff_dim),
        }
    }
}

// ── LoRA deltas (optional additive low-rank terms on linear maps) ──────

/// Reference to one adapter pair applied to a linear map:
/// `y += scale * (x . a^T) . b^T`.
pub struct Delta<'a, T: Scalar> {
    /// r x in_dim
    pub a: &'a Tensor<T>,
    /// out_dim x r
    pub b: &'a Tensor<T>,
    pub scale: f64,
}

#[derive(Default)]
pub struct AttnDeltas<'a, T: Scalar> {
    pub q: Option<Delta<'a, T>>,
    pub k: Option<Delta<'a, T>>,
    pub v: Option<Delta<'a, T>>,
    pub o: Option<Delta<'a, T>>,
}

#[derive(Default)]
pub struct BlockDeltas<'a, T: Scalar> {
    pub attn: AttnDeltas<'a, T>,
    pub fc1: Option<Delta<'a, T>>,
    pub fc2: Option<Delta<'a, T>>,
}

impl<'a, T: Scalar> AttnDeltas<'a, T> {
    pub fn none() -> Self {
        AttnDeltas {
            q: None,
            k: None,
            v: None,
            o: None,
        }
    }
}

impl<'a, T: Scalar> BlockDeltas<'a, T> {
    pub fn none() -> Self {
        BlockDeltas {
            attn: AttnDeltas::none(),
            fc1: None,
            fc2: None,
        }
    }
}

// ── Direct evaluation ──────────────────────────────────────────────────

pub fn linear_fwd<T: Scalar>(
    x: &Tensor<T>,
    lin: &Linear<T>,
    delta: Option<&Delta<T>>,
) -> Result<Tensor<T>> {
    let mut y = x.matmul(&lin.w)?.add_bias(&lin.b)?;
    if let Some(d) = delta {
        let low = x.matmul(&d.a.transpose())?;
        let add = low.matmul(&d.b.transpose())?.scale(T::from_f64(d.scale));
        y = y.add(&add)?;
    }
    Ok(y)
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, p: &LayerNormParams<T>) -> Result<Tensor<T>> {
    layer_norm_forward(x, &p.gamma, &p.beta)
}

fn check_heads<T: Scalar>(x: &Tensor<T>, p: &AttentionParams<T>) -> Result<usize> {
    let d = x.cols();
    if p.n_heads == 0 || d % p.n_heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("d_model {} not divisible by {} heads", d, p.n_heads),
        ));
    }
    Ok(d / p.n_heads)
}

/// Multi-head scaled dot-product self-attention over an (L x d) sequence.
pub fn attention_with_deltas<T: Scalar>(
    x: &Tensor<T>,
    p: &AttentionParams<T>,
    causal: bool,
    deltas: &AttnDeltas<T>,
) -> Result<Tensor<T>> {
    let head_dim = check_heads(x, p)?;
    let q = linear_fwd(x, &p.q, deltas.q.as_ref())?;
    let k = linear_fwd(x, &p.k, deltas.k.as_ref())?;
    let v = linear_fwd(x, &p.v, deltas.v.as_ref())?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let qh = q.narrow_cols(h * head_dim, head_dim)?;
        let kh = k.narrow_cols(h * head_dim, head_dim)?;
        let vh = v.narrow_cols(h * head_dim, head_dim)?;
        let scores = qh.matmul(&kh.transpose())?.scale(T::from_f64(scale));
        let probs = scores.softmax_rows(causal)?;
        heads.push(probs.matmul(&vh)?);
    }
    let refs: Vec<&Tensor<T>> = heads.iter().collect();
    let ctx = Tensor::concat_cols(&refs)?;
    linear_fwd(&ctx, &p.o, deltas.o.as_ref())
}

/// Attention without adapters (the common case).
pub fn attention<T: Scalar>(
    x: &Tensor<T>,
    p: &AttentionParams<T>,
    causal: bool,
) -> Result<Tensor<T>> {
    attention_with_deltas(x, p, causal, &AttnDeltas::none())
}

pub fn mlp<T: Scalar>(
    x: &Tensor<T>,
    p: &MlpParams<T>,
    fc1_delta: Option<&Delta<T>>,
    fc2_delta: Option<&Delta<T>>,
) -> Result<Tensor<T>> {
    let h = linear_fwd(x, &p.fc1, fc1_delta)?.map(gelu);
    linear_fwd(&h, &p.fc2, fc2_delta)
}

pub fn transformer_block_with_deltas<T: Scalar>(
    x: &Tensor<T>,
    p: &BlockParams<T>,
    causal: bool,
    deltas: &BlockDeltas<T>,
) -> Result<Tensor<T>> {
    let h = layer_norm(x, &p.ln1)?;
    let a = attention_with_deltas(&h, &p.attn, causal, &deltas.attn)?;
    let x1 = x.add(&a)?;
    let h2 = layer_norm(&x1, &p.ln2)?;
    let m = mlp(&h2, &p.mlp, deltas.fc1.as_ref(), deltas.fc2.as_ref())?;
    let out = x1.add(&m)?;
    out.check_finite("transformer_block")?;
    Ok(out)
}

pub fn transformer_block<T: Scalar>(
    x: &Tensor<T>,
    p: &BlockParams<T>,
    causal: bool,
) -> Result<Tensor<T>> {
    transformer_block_with_deltas(x, p, causal, &BlockDeltas::none())
}

// ── Tape-recorded evaluation ───────────────────────────────────────────

pub struct LinearNodes {
    pub w: NodeId,
    pub b: NodeId,
}

pub struct LayerNormNodes {
    pub gamma: NodeId,
    pub beta: NodeId,
}

pub struct AttentionNodes {
    pub q: LinearNodes,
    pub k: LinearNodes,
    pub v: LinearNodes,
    pub o: LinearNodes,
    pub n_heads: usize,
}

pub struct MlpNodes {
    pub fc1: LinearNodes,
    pub fc2: LinearNodes,
}

pub struct BlockNodes {
    pub ln1: LayerNormNodes,
    pub attn: AttentionNodes,
    pub ln2: LayerNormNodes,
    pub mlp: MlpNodes,
}

pub struct DeltaNodes {
    pub a: NodeId,
    pub b: NodeId,
    pub scale: f64,
}

#[derive(Default)]
pub struct BlockDeltaNodes {
    pub q: Option<DeltaNodes>,
    pub k: Option<DeltaNodes>,
    pub v: Option<DeltaNodes>,
    pub o: Option<DeltaNodes>,
    pub fc1: Option<DeltaNodes>,
    pub fc2: Option<DeltaNodes>,
}

/// Dropout applied to adapter inputs while training; off at evaluation.
pub enum TapeDropout<'r> {
    Off,
    On { rate: f64, rng: &'r mut ModelRng },
}

impl<'r> TapeDropout<'r> {
    fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        match self {
            TapeDropout::Off => Ok(x),
            TapeDropout::On { rate, rng } => {
                let keep = 1.0 - *rate;
                let shape = g.value(x).shape().to_vec();
                let n: usize = shape.iter().product();
                let inv = T::from_f64(1.0 / keep);
                let data = (0..n)
                    .map(|_| if rng.coin(keep) { inv } else { T::zero() })
                    .collect();
                let mask = Tensor::from_vec(&shape, data)?;
                g.mul_mask(x, mask)
            }
        }
    }
}

impl<T: Scalar> Linear<T> {
    pub fn bind(&self, g: &mut Graph<T>, name: &str) -> LinearNodes {
        self.bind_as(g, name, true)
    }

    pub fn bind_as(&self, g: &mut Graph<T>, name: &str, trainable: bool) -> LinearNodes {
        LinearNodes {
            w: g.leaf(&format!("{name}.w"), self.w.clone(), trainable),
            b: g.leaf(&format!("{name}.b"), self.b.clone(), trainable),
        }
    }
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn bind(&self, g: &mut Graph<T>, name: &str) -> LayerNormNodes {
        self.bind_as(g, name, true)
    }

    pub fn bind_as(&self, g: &mut Graph<T>, name: &str, trainable: bool) -> LayerNormNodes {
        LayerNormNodes {
            gamma: g.leaf(&format!("{name}.gamma"), self.gamma.clone(), trainable),
            beta: g.leaf(&format!("{name}.beta"), self.beta.clone(), trainable),
        }
    }
}

impl<T: Scalar> AttentionParams<T> {
    pub fn bind(&self, g: &mut Graph<T>, name: &str) -> AttentionNodes {
        self.bind_as(g, name, true)
    }

    pub fn bind_as(&self, g: &mut Graph<T>, name: &str, trainable: bool) -> AttentionNodes {
        AttentionNodes {
            q: self.q.bind_as(g, &format!("{name}.q"), trainable),
            k: self.k.bind_as(g, &format!("{name}.k"), trainable),
            v: self.v.bind_as(g, &format!("{name}.v"), trainable),
            o: self.o.bind_as(g, &format!("{name}.o"), trainable),
            n_heads: self.n_heads,
        }
    }
}

impl<T: Scalar> MlpParams<T> {
    pub fn bind(&self, g: &mut Graph<T>, name: &str) -> MlpNodes {
        self.bind_as(g, name, true)
    }

    pub fn bind_as(&self, g: &mut Graph<T>, name: &str, trainable: bool) -> MlpNodes {
        MlpNodes {
            fc1: self.fc1.bind_as(g, &format!("{name}.fc1"), trainable),
            fc2: self.fc2.bind_as(g, &format!("{name}.fc2"), trainable),
        }
    }
}

impl<T: Scalar> BlockParams<T> {
    pub fn bind(&self, g: &mut Graph<T>, name: &str) -> BlockNodes {
        self.bind_as(g, name, true)
    }

    pub fn bind_as(&self, g: &mut Graph<T>, name: &str, trainable: bool) -> BlockNodes {
        BlockNodes {
            ln1: self.ln1.bind_as(g, &format!("{name}.ln1"), trainable),
            attn: self.attn.bind_as(g, &format!("{name}.attn"), trainable),
            ln2: self.ln2.bind_as(g, &format!("{name}.ln2"), trainable),
            mlp: self.mlp.bind_as(g, &format!("{name}.mlp"), trainable),
        }
    }
}

pub fn linear_tape<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    lin: &LinearNodes,
    delta: Option<&DeltaNodes>,
    dropout: &mut TapeDropout,
) -> Result<NodeId> {
    let wx = g.matmul(x, lin.w)?;
    let mut y = g.add_bias(wx, lin.b)?;
    if let Some(d) = delta {
        let xd = dropout.apply(g, x)?;
        let at = g.transpose(d.a)?;
        let low = g.matmul(xd, at)?;
        let bt = g.transpose(d.b)?;
        let up = g.matmul(low, bt)?;
        let scaled = g.scale(up, d.scale)?;
        y = g.add(y, scaled)?;
    }
    Ok(y)
}

pub fn attention_tape<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &AttentionNodes,
    causal: bool,
    deltas: &BlockDeltaNodes,
    dropout: &mut TapeDropout,
) -> Result<NodeId> {
    let d = g.value(x).cols();
    if p.n_heads == 0 || d % p.n_heads != 0 {
        return Err(Error::shape(
            "attention_tape",
            format!("d_model {} not divisible by {} heads", d, p.n_heads),
        ));
    }
    let head_dim = d / p.n_heads;
    let q = linear_tape(g, x, &p.q, deltas.q.as_ref(), dropout)?;
    let k = linear_tape(g, x, &p.k, deltas.k.as_ref(), dropout)?;
    let v = linear_tape(g, x, &p.v, deltas.v.as_ref(), dropout)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let qh = g.narrow_cols(q, h * head_dim, head_dim)?;
        let kh = g.narrow_cols(k, h * head_dim, head_dim)?;
        let vh = g.narrow_cols(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale)?;
        let probs = g.softmax_rows(scaled, causal)?;
        heads.push(g.matmul(probs, vh)?);
    }
    let ctx = g.concat_cols(&heads)?;
    linear_tape(g, ctx, &p.o, deltas.o.as_ref(), dropout)
}

pub fn transformer_block_tape<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &BlockNodes,
    causal: bool,
    deltas: &BlockDeltaNodes,
    dropout: &mut TapeDropout,
) -> Result<NodeId> {
    let h = g.layer_norm(x, p.ln1.gamma, p.ln1.beta)?;
    let a = attention_tape(g, h, &p.attn, causal, deltas, dropout)?;
    let x1 = g.add(x, a)?;
    let h2 = g.layer_norm(x1, p.ln2.gamma, p.ln2.beta)?;
    let m1 = linear_tape(g, h2, &p.mlp.fc1, deltas.fc1.as_ref(), dropout)?;
    let act = g.gelu(m1)?;
    let m2 = linear_tape(g, act, &p.mlp.fc2, deltas.fc2.as_ref(), dropout)?;
    g.add(x1, m2)
}
