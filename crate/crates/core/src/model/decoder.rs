//! Transformer-lite decoder and the CTC projection head.

use crate::error::{Error, Result};
use crate::masking::chunk_mask;
use crate::model::encoder::{layer_norm, linear, multi_head_attention, positional_encoding};
use crate::model::params::BoundParams;
use crate::model::ModelConfig;
use crate::tensor::{lit, Graph, NodeId, Scalar};

/// Linear projection + log-softmax over `vocab_size + 1` classes (tokens +
/// blank). Rows are valid log-distributions.
pub fn ctc_head<S: Scalar>(g: &mut Graph<S>, p: &BoundParams, enc_h: NodeId) -> Result<NodeId> {
    let logits = linear(g, p, "ctc", enc_h)?;
    g.log_softmax(logits)
}

fn ffn<S: Scalar>(g: &mut Graph<S>, p: &BoundParams, prefix: &str, x: NodeId) -> Result<NodeId> {
    let h = layer_norm(g, p, &format!("{prefix}.norm"), x)?;
    let h = linear(g, p, &format!("{prefix}.w1"), h)?;
    let h = g.relu(h)?;
    let h = linear(g, p, &format!("{prefix}.w2"), h)?;
    g.add(x, h)
}

/// Teacher-forced decoder pass. `prev_tokens` must start with the sos/eos
/// symbol; output logits are `[len, vocab_size + 2]` and position `t`
/// depends only on `prev_tokens[..=t]` (and all of the encoder output).
pub fn decoder_forward<S: Scalar>(
    g: &mut Graph<S>,
    p: &BoundParams,
    enc_h: NodeId,
    prev_tokens: &[usize],
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let vocab = cfg.vocab();
    if prev_tokens.first() != Some(&vocab.sos_eos_id()) {
        return Err(Error::invalid("decoder input must start with sos"));
    }
    let len = prev_tokens.len();
    let t_enc = g.value(enc_h).dims2()?.0;

    let emb = g.embedding(p.id("dec.embed"), prev_tokens)?;
    let emb = g.scale(emb, lit::<S>((cfg.d_model as f64).sqrt()))?;
    let pe = g.leaf(positional_encoding::<S>(len, cfg.d_model))?;
    let mut x = g.add(emb, pe)?;

    let causal = chunk_mask(len, 1);
    let cross_mask = vec![true; len * t_enc];
    for i in 0..cfg.n_dec_layers {
        let prefix = format!("dec.{i}");
        let sa_in = layer_norm(g, p, &format!("{prefix}.self.norm"), x)?;
        let sa = multi_head_attention(g, p, &format!("{prefix}.self"), sa_in, sa_in, causal.bits(), cfg.n_heads)?;
        x = g.add(x, sa)?;
        let ca_in = layer_norm(g, p, &format!("{prefix}.cross.norm"), x)?;
        let ca = multi_head_attention(g, p, &format!("{prefix}.cross"), ca_in, enc_h, &cross_mask, cfg.n_heads)?;
        x = g.add(x, ca)?;
        x = ffn(g, p, &format!("{prefix}.ffn"), x)?;
    }
    let x = layer_norm(g, p, "dec.norm", x)?;
    linear(g, p, "dec.out", x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::ChunkSelection;
    use crate::model::{bind_params, encode, init_params};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn setup(cfg: &ModelConfig, seed: u64, t: usize) -> (Graph<f64>, BoundParams, NodeId) {
        let params = init_params(seed, cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let frames = Tensor::<f64>::new(
            vec![t, cfg.feat_dim],
            (0..t * cfg.feat_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut g = Graph::<f64>::new();
        let p = bind_params(&mut g, &params, false).unwrap();
        let f = g.leaf(frames).unwrap();
        let h = encode(&mut g, &p, f, ChunkSelection::Full, cfg).unwrap();
        (g, p, h)
    }

    #[test]
    fn ctc_head_rows_normalize() {
        let cfg = ModelConfig::default();
        let (mut g, p, h) = setup(&cfg, 4, 30);
        let lp = ctc_head(&mut g, &p, h).unwrap();
        let t = g.value(lp);
        assert_eq!(t.shape()[1], cfg.vocab().ctc_classes());
        for i in 0..t.shape()[0] {
            let sum: f64 = t.row(i).iter().map(|v| v.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_ctc_weights_give_uniform_rows() {
        let cfg = ModelConfig::default();
        let mut params = init_params(4, &cfg).unwrap();
        let classes = cfg.vocab().ctc_classes();
        for v in params.get_mut("ctc.w").unwrap().data_mut() {
            *v = 0.0;
        }
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let frames = Tensor::<f64>::new(
            vec![20, cfg.feat_dim],
            (0..20 * cfg.feat_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut g = Graph::<f64>::new();
        let p = bind_params(&mut g, &params, false).unwrap();
        let f = g.leaf(frames).unwrap();
        let h = encode(&mut g, &p, f, ChunkSelection::Full, &cfg).unwrap();
        let lp = ctc_head(&mut g, &p, h).unwrap();
        let expect = -(classes as f64).ln();
        for &v in g.value(lp).data() {
            assert!((v - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn sos_only_input_gives_one_row() {
        let cfg = ModelConfig::default();
        let (mut g, p, h) = setup(&cfg, 5, 16);
        let logits = decoder_forward(&mut g, &p, h, &[cfg.vocab().sos_eos_id()], &cfg).unwrap();
        assert_eq!(g.value(logits).shape(), &[1, cfg.vocab().decoder_classes()]);
    }

    #[test]
    fn input_must_start_with_sos() {
        let cfg = ModelConfig::default();
        let (mut g, p, h) = setup(&cfg, 5, 16);
        assert!(decoder_forward(&mut g, &p, h, &[0, 1], &cfg).is_err());
    }

    #[test]
    fn out_of_range_token_rejected() {
        let cfg = ModelConfig::default();
        let (mut g, p, h) = setup(&cfg, 5, 16);
        let sos = cfg.vocab().sos_eos_id();
        assert!(decoder_forward(&mut g, &p, h, &[sos, sos + 1], &cfg).is_err());
    }

    #[test]
    fn prefix_causality_is_exact() {
        let cfg = ModelConfig::default();
        let sos = cfg.vocab().sos_eos_id();
        let tokens = [sos, 1, 5, 2, 7, 0];
        let run = |toks: &[usize]| {
            let (mut g, p, h) = setup(&cfg, 6, 24);
            let logits = decoder_forward(&mut g, &p, h, toks, &cfg).unwrap();
            g.value(logits).data().to_vec()
        };
        let base = run(&tokens);
        let classes = cfg.vocab().decoder_classes();
        for k in 1..tokens.len() {
            let mut alt = tokens.to_vec();
            alt[k] = (alt[k] + 3) % cfg.vocab_size;
            let out = run(&alt);
            for pos in 0..k {
                for c in 0..classes {
                    assert_eq!(
                        base[pos * classes + c],
                        out[pos * classes + c],
                        "leak at pos {pos} after editing {k}"
                    );
                }
            }
        }
    }
}
