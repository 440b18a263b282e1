//! Training objectives: CTC, label-smoothed attention loss, the
//! representation-bridging terms (frame-level contrastive / L2), and their
//! joint combination
//!
//! ```text
//! L = L_asr_s + L_asr_ns + bridge
//! L_asr_* = lambda * ctc_* + (1 - lambda) * aed_*
//! ```

mod contrastive;
mod ctc;

pub use contrastive::{contrastive_frame_loss, contrastive_loss, cosine_similarity};
pub use ctc::ctc_loss;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{lit, Graph, NodeId, Scalar, Tensor};

/// Which (if any) term bridges the streaming and non-streaming encoder
/// representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BridgeKind {
    None,
    L2,
    Contrastive,
}

impl std::fmt::Display for BridgeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BridgeKind::None => write!(f, "none"),
            BridgeKind::L2 => write!(f, "l2"),
            BridgeKind::Contrastive => write!(f, "contrastive"),
        }
    }
}

impl std::str::FromStr for BridgeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BridgeKind::None),
            "l2" => Ok(BridgeKind::L2),
            "contrastive" => Ok(BridgeKind::Contrastive),
            other => Err(Error::invalid(format!(
                "unknown bridge '{other}' (expected none|l2|contrastive)"
            ))),
        }
    }
}

/// Bridge-term configuration. `stop_gradient` freezes the full-context
/// (teacher) side; the contrastive default lets gradients flow into both
/// branches while the L2 ablation follows its knowledge-distillation framing
/// and stops the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    pub kind: BridgeKind,
    /// Contrastive temperature.
    pub tau: f64,
    /// Distractor budget N; clamped to n-1 for short utterances.
    pub num_distractors: usize,
    pub stop_gradient: bool,
    /// Weight of the bridge term inside the total loss.
    pub weight: f64,
}

impl BridgeConfig {
    pub fn none() -> Self {
        BridgeConfig {
            kind: BridgeKind::None,
            tau: 0.4,
            num_distractors: 16,
            stop_gradient: false,
            weight: 1.0,
        }
    }

    pub fn l2() -> Self {
        BridgeConfig {
            kind: BridgeKind::L2,
            stop_gradient: true,
            ..Self::none()
        }
    }

    pub fn contrastive() -> Self {
        BridgeConfig {
            kind: BridgeKind::Contrastive,
            ..Self::none()
        }
    }

    pub fn with_kind(kind: BridgeKind) -> Self {
        match kind {
            BridgeKind::None => Self::none(),
            BridgeKind::L2 => Self::l2(),
            BridgeKind::Contrastive => Self::contrastive(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::invalid("tau must be positive"));
        }
        if self.kind == BridgeKind::Contrastive && self.num_distractors < 1 {
            return Err(Error::invalid("contrastive bridge needs at least one distractor"));
        }
        if self.weight < 0.0 {
            return Err(Error::invalid("bridge weight must be non-negative"));
        }
        Ok(())
    }
}

/// Per-batch mean loss components. `bridge` is the weighted term that enters
/// the total (zero when the bridge is disabled).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ctc_s: f64,
    pub aed_s: f64,
    pub ctc_ns: f64,
    pub aed_ns: f64,
    pub bridge: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The total recomputed from the components.
    pub fn recompute_total(&self, lambda: f64) -> f64 {
        lambda * self.ctc_s
            + (1.0 - lambda) * self.aed_s
            + lambda * self.ctc_ns
            + (1.0 - lambda) * self.aed_ns
            + self.bridge
    }
}

/// Combine per-branch CTC/AED means and a bridge term.
pub fn joint_loss(
    ctc_s: f64,
    aed_s: f64,
    ctc_ns: f64,
    aed_ns: f64,
    bridge_term: f64,
    lambda: f64,
) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("lambda must be in [0, 1]"));
    }
    let asr_s = lambda * ctc_s + (1.0 - lambda) * aed_s;
    let asr_ns = lambda * ctc_ns + (1.0 - lambda) * aed_ns;
    Ok(LossBreakdown {
        ctc_s,
        aed_s,
        ctc_ns,
        aed_ns,
        bridge: bridge_term,
        total: asr_s + asr_ns + bridge_term,
    })
}

/// Label-smoothed attention loss: mean over positions of the KL divergence
/// between the smoothed one-hot target (1-eps on gold, eps/(C-1) elsewhere)
/// and the predicted distribution.
pub fn aed_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    targets: &[usize],
    epsilon: f64,
) -> Result<NodeId> {
    let (len, classes) = g.value(logits).dims2()?;
    if targets.len() != len {
        return Err(Error::shape(
            "aed_loss",
            format!("{} targets for {len} logit rows", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::invalid(format!("target {bad} outside {classes} classes")));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid("label smoothing must be in [0, 1)"));
    }

    let off = epsilon / (classes - 1) as f64;
    let mut q = vec![lit::<S>(off); len * classes];
    for (pos, &t) in targets.iter().enumerate() {
        q[pos * classes + t] = lit(1.0 - epsilon);
    }
    let q = g.leaf(Tensor::new(vec![len, classes], q)?)?;

    let logp = g.log_softmax(logits)?;
    let weighted = g.mul(q, logp)?;
    let s = g.sum_all(weighted)?;
    let ce = g.scale(s, lit::<S>(-1.0 / len as f64))?;

    // Constant entropy of the smoothed target (0 * ln 0 = 0 at eps = 0).
    let mut entropy = 0.0;
    if epsilon > 0.0 {
        entropy += epsilon * off.ln();
    }
    if 1.0 - epsilon > 0.0 {
        entropy += (1.0 - epsilon) * (1.0 - epsilon).ln();
    }
    let h = g.scalar_const(lit::<S>(entropy))?;
    g.add(ce, h)
}

/// Mean over frames of the squared Euclidean distance between paired rows.
/// With `stop_gradient` the second argument is treated as a fixed teacher.
pub fn l2_bridge_loss<S: Scalar>(
    g: &mut Graph<S>,
    h_s: NodeId,
    h_ns: NodeId,
    stop_gradient: bool,
) -> Result<NodeId> {
    let (n, d) = g.value(h_s).dims2()?;
    let (n2, d2) = g.value(h_ns).dims2()?;
    if (n, d) != (n2, d2) {
        return Err(Error::shape("l2_bridge_loss", format!("[{n},{d}] vs [{n2},{d2}]")));
    }
    let teacher = if stop_gradient { g.detach(h_ns)? } else { h_ns };
    let diff = g.sub(h_s, teacher)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum_all(sq)?;
    g.scale(s, lit::<S>(1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_multi;

    #[test]
    fn joint_loss_arithmetic() {
        let b = joint_loss(1.0, 2.0, 0.0, 0.0, 0.0, 0.3).unwrap();
        assert!((0.3 * 1.0 + 0.7 * 2.0 - (b.total)).abs() < 1e-12);
        assert!((b.recompute_total(0.3) - b.total).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_symmetric_branches() {
        let b = joint_loss(1.2, 0.8, 1.2, 0.8, 0.0, 0.3).unwrap();
        let one_branch = 0.3 * 1.2 + 0.7 * 0.8;
        assert!((b.total - 2.0 * one_branch).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_lambda_one_ignores_aed() {
        let b = joint_loss(1.5, 99.0, 2.5, -7.0, 0.0, 1.0).unwrap();
        assert!((b.total - 4.0).abs() < 1e-12);
        assert!(joint_loss(0.0, 0.0, 0.0, 0.0, 0.0, 1.5).is_err());
    }

    #[test]
    fn aed_perfect_prediction_is_near_zero() {
        let mut g = Graph::<f64>::new();
        // gold class logit 25, others 0: margin >= 20
        let logits = g
            .leaf(Tensor::matrix(vec![vec![25.0, 0.0, 0.0, 0.0], vec![0.0, 25.0, 0.0, 0.0]]).unwrap())
            .unwrap();
        let loss = aed_loss(&mut g, logits, &[0, 1], 0.0).unwrap();
        assert!(g.value(loss).item() <= 1e-6);
    }

    #[test]
    fn aed_uniform_prediction_is_log_classes() {
        let mut g = Graph::<f64>::new();
        let classes = 5;
        let logits = g.leaf(Tensor::zeros(vec![3, classes])).unwrap();
        let loss = aed_loss(&mut g, logits, &[0, 2, 4], 0.0).unwrap();
        assert!((g.value(loss).item() - (classes as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn aed_smoothed_single_position_matches_direct_formula() {
        // V=3 tokens -> 5 decoder classes; one position, gold = 2.
        let eps = 0.1;
        let classes = 5;
        let logits_row = [0.3, -0.7, 1.1, 0.2, -0.4];
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::matrix(vec![logits_row.to_vec()]).unwrap()).unwrap();
        let loss = aed_loss(&mut g, logits, &[2], eps).unwrap();

        let max = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits_row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let mut expect = 0.0;
        for (c, &z) in logits_row.iter().enumerate() {
            let q = if c == 2 { 1.0 - eps } else { eps / (classes - 1) as f64 };
            expect += q * (q.ln() - (z - lse));
        }
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn aed_length_mismatch_errors() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::zeros(vec![2, 4])).unwrap();
        assert!(aed_loss(&mut g, logits, &[0], 0.0).is_err());
    }

    #[test]
    fn aed_gradient_matches_central_differences() {
        let logits = Tensor::matrix(vec![
            vec![0.2, -0.5, 0.9, 0.1],
            vec![-1.1, 0.3, 0.0, 0.7],
            vec![0.4, 0.4, -0.2, -0.9],
        ])
        .unwrap();
        let err = grad_check_multi(
            |g, ids| aed_loss(g, ids[0], &[2, 0, 3], 0.1),
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn l2_identity_is_zero() {
        let mut g = Graph::<f64>::new();
        let h = g.leaf(Tensor::matrix(vec![vec![1.0, 2.0], vec![3.0, -4.0]]).unwrap()).unwrap();
        let loss = l2_bridge_loss(&mut g, h, h, true).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn l2_unit_difference_counts_dims() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::matrix(vec![vec![1.0; 4], vec![2.0; 4]]).unwrap()).unwrap();
        let b = g.leaf(Tensor::matrix(vec![vec![0.0; 4], vec![1.0; 4]]).unwrap()).unwrap();
        let loss = l2_bridge_loss(&mut g, a, b, true).unwrap();
        assert!((g.value(loss).item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn l2_matches_double_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(8);
        let (n, d) = (5, 7);
        let av: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let bv: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut expect = 0.0;
        for i in 0..n {
            for j in 0..d {
                let diff = av[i * d + j] - bv[i * d + j];
                expect += diff * diff;
            }
        }
        expect /= n as f64;
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![n, d], av).unwrap()).unwrap();
        let b = g.leaf(Tensor::new(vec![n, d], bv).unwrap()).unwrap();
        let loss = l2_bridge_loss(&mut g, a, b, true).unwrap();
        assert!((g.value(loss).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn l2_stop_gradient_freezes_teacher() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::matrix(vec![vec![1.0, 2.0]]).unwrap()).unwrap();
        let b = g.param(Tensor::matrix(vec![vec![0.5, -1.0]]).unwrap()).unwrap();
        let loss = l2_bridge_loss(&mut g, a, b, true).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(a).is_some());
        assert!(g.grad(b).is_none(), "teacher side must receive no gradient");
    }

    #[test]
    fn l2_without_stop_gradient_reaches_both() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::matrix(vec![vec![1.0, 2.0]]).unwrap()).unwrap();
        let b = g.param(Tensor::matrix(vec![vec![0.5, -1.0]]).unwrap()).unwrap();
        let loss = l2_bridge_loss(&mut g, a, b, false).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(a).is_some());
        assert!(g.grad(b).is_some());
    }
}
