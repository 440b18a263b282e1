//! CTC loss via the forward-backward algorithm in log space.
//!
//! The loss is recorded on the graph as a fused scalar op: both the value and
//! the gradient w.r.t. the input log-probabilities are computed here (always
//! in f64), using
//!
//! ```text
//! dL/du[t][k] = -exp( LSE_{s: l'[s]=k}( alpha[t][s] + beta[t][s] - u[t][l'[s]] ) - logP )
//! ```
//!
//! where `l'` is the blank-interleaved target and both alpha and beta include
//! the emission term at their own time step.

use crate::error::{Error, Result};
use crate::tensor::{lit, Graph, NodeId, Scalar};

fn lse(values: impl IntoIterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.into_iter().collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Negative log probability of all blank-augmented alignments collapsing to
/// `target`. `logprobs` is `[T, C]` with `blank < C`; target tokens must be
/// valid non-blank classes. Differentiable through `logprobs`.
pub fn ctc_loss<S: Scalar>(
    g: &mut Graph<S>,
    logprobs: NodeId,
    target: &[usize],
    blank: usize,
) -> Result<NodeId> {
    let (t_len, classes) = g.value(logprobs).dims2()?;
    if blank >= classes {
        return Err(Error::invalid(format!("blank {blank} outside {classes} classes")));
    }
    if let Some(&bad) = target.iter().find(|&&v| v >= classes || v == blank) {
        return Err(Error::invalid(format!("target symbol {bad} invalid for CTC")));
    }
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    let needed = target.len() + repeats;
    if needed > t_len {
        return Err(Error::CtcInfeasible { needed, got: t_len });
    }

    let u: Vec<f64> = g.value(logprobs).to_f64_vec();
    let at = |t: usize, k: usize| u[t * classes + k];

    // Blank-interleaved target.
    let s_len = 2 * target.len() + 1;
    let lab = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            target[(s - 1) / 2]
        }
    };
    let skip_ok = |s: usize| -> bool {
        // alpha transition s-2 -> s allowed when l'[s] is a token different
        // from l'[s-2]
        s >= 2 && lab(s) != blank && lab(s) != lab(s - 2)
    };

    const NEG: f64 = f64::NEG_INFINITY;
    let mut alpha = vec![NEG; t_len * s_len];
    alpha[0] = at(0, lab(0));
    if s_len > 1 {
        alpha[1] = at(0, lab(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut terms = vec![alpha[(t - 1) * s_len + s]];
            if s >= 1 {
                terms.push(alpha[(t - 1) * s_len + s - 1]);
            }
            if skip_ok(s) {
                terms.push(alpha[(t - 1) * s_len + s - 2]);
            }
            let inbound = lse(terms);
            alpha[t * s_len + s] = if inbound == NEG { NEG } else { inbound + at(t, lab(s)) };
        }
    }
    let mut finals = vec![alpha[(t_len - 1) * s_len + s_len - 1]];
    if s_len >= 2 {
        finals.push(alpha[(t_len - 1) * s_len + s_len - 2]);
    }
    let log_p = lse(finals);
    if log_p == NEG || !log_p.is_finite() {
        return Err(Error::NonFinite { op: "ctc_loss" });
    }

    let mut beta = vec![NEG; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = at(t_len - 1, lab(s_len - 1));
    if s_len >= 2 {
        beta[(t_len - 1) * s_len + s_len - 2] = at(t_len - 1, lab(s_len - 2));
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut terms = vec![beta[(t + 1) * s_len + s]];
            if s + 1 < s_len {
                terms.push(beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                terms.push(beta[(t + 1) * s_len + s + 2]);
            }
            let outbound = lse(terms);
            beta[t * s_len + s] = if outbound == NEG { NEG } else { outbound + at(t, lab(s)) };
        }
    }

    let mut grad = vec![S::zero(); t_len * classes];
    for t in 0..t_len {
        for k in 0..classes {
            let mass = lse((0..s_len).filter(|&s| lab(s) == k).map(|s| {
                alpha[t * s_len + s] + beta[t * s_len + s] - at(t, lab(s))
            }));
            if mass != NEG {
                grad[t * classes + k] = lit(-((mass - log_p).exp()));
            }
        }
    }

    g.custom_scalar("ctc_loss", logprobs, lit(-log_p), grad)
}

/// Exhaustive CTC probability by path enumeration: sums the product
/// probability of every length-T label path that collapses to `target`.
/// Only usable for tiny `C^T`; this is the independent oracle for tests.
pub fn ctc_prob_bruteforce(probs: &[Vec<f64>], target: &[usize], blank: usize) -> f64 {
    fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = None;
        for &p in path {
            if Some(p) != prev && p != blank {
                out.push(p);
            }
            prev = Some(p);
        }
        out
    }
    let t_len = probs.len();
    let classes = probs[0].len();
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    loop {
        if collapse(&path, blank) == target {
            total += path.iter().enumerate().map(|(t, &k)| probs[t][k]).product::<f64>();
        }
        // next path in lexicographic order
        let mut pos = 0;
        loop {
            if pos == t_len {
                return total;
            }
            path[pos] += 1;
            if path[pos] < classes {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_multi, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn logprob_rows(rows: Vec<Vec<f64>>) -> Tensor<f64> {
        Tensor::matrix(rows.into_iter().map(|r| r.into_iter().map(f64::ln).collect()).collect())
            .unwrap()
    }

    #[test]
    fn single_alignment() {
        // T=1, target [a] with a=0, blank=2, p(a)=0.4
        let mut g = Graph::<f64>::new();
        let lp = g.leaf(logprob_rows(vec![vec![0.4, 0.3, 0.3]])).unwrap();
        let loss = ctc_loss(&mut g, lp, &[0], 2).unwrap();
        assert!((g.value(loss).item() - (-(0.4f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn all_blank_path() {
        // T=2, empty target, p(blank)=0.6 per frame -> -ln 0.36
        let mut g = Graph::<f64>::new();
        let lp = g.leaf(logprob_rows(vec![vec![0.2, 0.2, 0.6], vec![0.2, 0.2, 0.6]])).unwrap();
        let loss = ctc_loss(&mut g, lp, &[], 2).unwrap();
        assert!((g.value(loss).item() - (-(0.36f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn three_path_uniform_case() {
        // T=2, target [a], uniform over {a, b, blank}: paths aa, a-, -a
        let mut g = Graph::<f64>::new();
        let third = 1.0 / 3.0;
        let lp = g
            .leaf(logprob_rows(vec![vec![third; 3], vec![third; 3]]))
            .unwrap();
        let loss = ctc_loss(&mut g, lp, &[0], 2).unwrap();
        assert!((g.value(loss).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_rejected() {
        let mut g = Graph::<f64>::new();
        let lp = g.leaf(logprob_rows(vec![vec![0.5, 0.25, 0.25]; 2])).unwrap();
        // [a, a] needs 3 frames (blank between repeats)
        assert!(matches!(
            ctc_loss(&mut g, lp, &[0, 0], 2).unwrap_err(),
            Error::CtcInfeasible { needed: 3, got: 2 }
        ));
    }

    #[test]
    fn blank_in_target_rejected() {
        let mut g = Graph::<f64>::new();
        let lp = g.leaf(logprob_rows(vec![vec![0.5, 0.25, 0.25]; 2])).unwrap();
        assert!(ctc_loss(&mut g, lp, &[2], 2).is_err());
    }

    #[test]
    fn matches_bruteforce_enumeration() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..40 {
            let t_len = rng.random_range(1..=5);
            let classes = rng.random_range(2..=4);
            let blank = classes - 1;
            let probs: Vec<Vec<f64>> = (0..t_len)
                .map(|_| {
                    let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
                    let sum: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / sum).collect()
                })
                .collect();
            let max_target = t_len.min(3);
            let target_len = rng.random_range(0..=max_target);
            let mut target = Vec::new();
            for _ in 0..target_len {
                target.push(rng.random_range(0..blank));
            }
            let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
            if target.len() + repeats > t_len {
                continue;
            }
            let expected = ctc_prob_bruteforce(&probs, &target, blank);
            let mut g = Graph::<f64>::new();
            let lp = g.leaf(logprob_rows(probs)).unwrap();
            let loss = ctc_loss(&mut g, lp, &target, blank).unwrap();
            assert!(
                (g.value(loss).item() - (-expected.ln())).abs() < 1e-8,
                "target {target:?}: {} vs {}",
                g.value(loss).item(),
                -expected.ln()
            );
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for case in 0..8 {
            let t_len = rng.random_range(3..=6);
            let classes = 4;
            let raw: Vec<f64> = (0..t_len * classes).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Tensor::new(vec![t_len, classes], raw).unwrap();
            let target: Vec<usize> = vec![0, 2];
            // check both directly on scores and through a log-softmax
            let err = grad_check_multi(
                |g, ids| ctc_loss(g, ids[0], &target, classes - 1),
                &[x.clone()],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-7, "case {case}: raw-input rel err {err}");
            let err = grad_check_multi(
                |g, ids| {
                    let lp = g.log_softmax(ids[0])?;
                    ctc_loss(g, lp, &target, classes - 1)
                },
                &[x],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-7, "case {case}: log-softmax rel err {err}");
        }
    }
}
