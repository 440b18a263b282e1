//! Conformer-lite encoder.
//!
//! Front-end: two stride-2 kernel-3 convolutions (ReLU between) and a linear
//! projection, then scaled sinusoidal position encoding. Each block is
//! pre-norm:
//!
//! ```text
//! x = x + 0.5 * FFN(LN(x))            (Swish)
//! x = x + MHSA(LN(x), mask)
//! x = x + ConvModule(LN(x))           (pointwise-GLU, causal depthwise, LN, Swish, pointwise)
//! x = x + 0.5 * FFN(LN(x))
//! x = LN(x)
//! ```
//!
//! The depthwise convolution is causal in both modes; the attention mask is
//! the only thing that distinguishes streaming from full context.

use crate::error::Result;
use crate::masking::{selection_mask, ChunkSelection};
use crate::model::params::BoundParams;
use crate::model::{sub_len, ModelConfig};
use crate::tensor::{lit, Graph, NodeId, PadMode, Scalar, Tensor};

/// Receptive field of the subsampling front-end: one output frame sees this
/// many input frames.
pub const SUBSAMPLE_RECEPTIVE_FIELD: usize = 7;
/// Input frames consumed per output frame step.
pub const SUBSAMPLE_STRIDE: usize = 4;

/// Absolute sinusoidal position encoding, `[t, d]`.
pub fn positional_encoding<S: Scalar>(t: usize, d: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); t * d];
    for pos in 0..t {
        for i in 0..d / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = lit(rate.sin());
            data[pos * d + 2 * i + 1] = lit(rate.cos());
        }
    }
    Tensor::new(vec![t, d], data).expect("pe shape")
}

pub(crate) fn linear<S: Scalar>(
    g: &mut Graph<S>,
    p: &BoundParams,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let y = g.matmul(x, p.id(&format!("{name}.w")))?;
    g.add_bias(y, p.id(&format!("{name}.b")))
}

pub(crate) fn layer_norm<S: Scalar>(
    g: &mut Graph<S>,
    p: &BoundParams,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    g.layer_norm(x, p.id(&format!("{name}.g")), p.id(&format!("{name}.b")))
}

/// Multi-head attention with `wq/wk/wv/wo` projections under `prefix`.
/// `mask` is a row-major `[Tq, Tk]` boolean buffer (true = may attend).
pub(crate) fn multi_head_attention<S: Scalar>(
    g: &mut Graph<S>,
    p: &BoundParams,
    prefix: &str,
    queries: NodeId,
    keys_values: NodeId,
    mask: &[bool],
    n_heads: usize,
) -> Result<NodeId> {
    let d = g.value(queries).dims2()?.1;
    let dk = d / n_heads;
    let q = linear(g, p, &format!("{prefix}.wq"), queries)?;
    let k = linear(g, p, &format!("{prefix}.wk"), keys_values)?;
    let v = linear(g, p, &format!("{prefix}.wv"), keys_values)?;
    let scale = lit::<S>(1.0 / (dk as f64).sqrt());

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.narrow_cols(q, h * dk, dk)?;
        let kh = g.narrow_cols(k, h * dk, dk)?;
        let vh = g.narrow_cols(v, h * dk, dk)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let probs = g.masked_softmax(scores, mask)?;
        heads.push(g.matmul(probs, vh)?);
    }
    let ctx = g.concat_cols(&heads)?;
    linear(g, p, &format!("{prefix}.wo"), ctx)
}

fn half_ffn<S: Scalar>(
    g: &mut Graph<S>,
    p: &BoundParams,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let h = layer_norm(g, p, &format!("{prefix}.norm"), x)?;
    let h = linear(g, p, &format!("{prefix}.w1"), h)?;
    let h = g.swish(h)?;
    let h = linear(g, p, &format!("{prefix}.w2"), h)?;
    let h = g.scale(h, lit::<S>(0.5))?;
    g.add(x, h)
}

fn conv_module<S: Scalar>(
    g: &mut Graph<S>,
    p: &BoundParams,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let h = layer_norm(g, p, &format!("{prefix}.norm"), x)?;
    let h = linear(g, p, &format!("{prefix}.pw1"), h)?;
    let h = g.glu(h)?;
    let h = g.depthwise_conv1d(h, p.id(&format!("{prefix}.dw.w")))?;
    let h = g.add_bias(h, p.id(&format!("{prefix}.dw.b")))?;
    let h = layer_norm(g, p, &format!("{prefix}.mid_norm"), h)?;
    let h = g.swish(h)?;
    let h = linear(g, p, &format!("{prefix}.pw2"), h)?;
    g.add(x, h)
}

fn conformer_block<S: Scalar>(
    g: &mut Graph<S>,
    p: &BoundParams,
    prefix: &str,
    x: NodeId,
    mask: &[bool],
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let x = half_ffn(g, p, &format!("{prefix}.ffn1"), x)?;
    let attn_in = layer_norm(g, p, &format!("{prefix}.attn.norm"), x)?;
    let attn = multi_head_attention(g, p, &format!("{prefix}.attn"), attn_in, attn_in, mask, cfg.n_heads)?;
    let x = g.add(x, attn)?;
    let x = conv_module(g, p, &format!("{prefix}.conv"), x)?;
    let x = half_ffn(g, p, &format!("{prefix}.ffn2"), x)?;
    layer_norm(g, p, &format!("{prefix}.final_norm"), x)
}

/// Run the encoder over `frames` (`[T, F]`, already recorded in the graph)
/// under the given context selection. Output is the top-layer hidden
/// representation, `[sub_len(T), d_model]`.
pub fn encode<S: Scalar>(
    g: &mut Graph<S>,
    p: &BoundParams,
    frames: NodeId,
    sel: ChunkSelection,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let t_in = g.value(frames).dims2()?.0;
    let t_sub = sub_len(t_in)?;

    let h = g.conv1d(frames, p.id("enc.sub.conv1.w"), 2, PadMode::None)?;
    let h = g.add_bias(h, p.id("enc.sub.conv1.b"))?;
    let h = g.relu(h)?;
    let h = g.conv1d(h, p.id("enc.sub.conv2.w"), 2, PadMode::None)?;
    let h = g.add_bias(h, p.id("enc.sub.conv2.b"))?;
    let h = g.relu(h)?;
    let h = linear(g, p, "enc.sub.proj", h)?;
    debug_assert_eq!(g.value(h).dims2()?.0, t_sub);

    let h = g.scale(h, lit::<S>((cfg.d_model as f64).sqrt()))?;
    let pe = g.leaf(positional_encoding::<S>(t_sub, cfg.d_model))?;
    let mut h = g.add(h, pe)?;

    let mask = selection_mask(t_sub, sel);
    for i in 0..cfg.n_enc_layers {
        h = conformer_block(g, p, &format!("enc.{i}"), h, mask.bits(), cfg)?;
    }
    Ok(h)
}
