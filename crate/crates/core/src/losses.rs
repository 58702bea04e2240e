//! Task and SVAE losses, one scalar per batch sample.
//!
//! Every function returns a rank-1 node of length B on the caller's tape.
//! Multi-label losses reduce by class mean, pixel losses by pixel mean,
//! so both tasks produce per-sample values on comparable scales.

use serde::{Deserialize, Serialize};

use crate::tensor::{NodeId, Result, Tape, TensorError};

/// Sign convention for the Gaussian term inside the composite SVAE loss.
///
/// `Standard` is the ELBO-derived penalty `0.5 * sum(mu^2 + s^2 - log s^2 - 1)`,
/// which is non-negative and keeps the posterior near the prior. `Literal`
/// negates it, matching a printed form that rewards unbounded variance; it
/// exists for comparison runs only and breaks loss non-negativity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlSign {
    #[default]
    Standard,
    Literal,
}

/// Coefficients for the three terms of the composite SVAE loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvaeLossWeights {
    pub mse: f64,
    pub task: f64,
    pub kl: f64,
}

impl Default for SvaeLossWeights {
    fn default() -> Self {
        SvaeLossWeights {
            mse: 1.0,
            task: 1.0,
            kl: 1.0,
        }
    }
}

/// `log(1 + exp(x))` built from primitives, stable for any finite `x`.
fn softplus(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let pos = tape.relu(x)?;
    let negx = tape.neg(x)?;
    let negpart = tape.relu(negx)?;
    let absx = tape.add(pos, negpart)?;
    let neg_abs = tape.neg(absx)?;
    let e = tape.exp(neg_abs)?;
    let one = ones_like(tape, x)?;
    let one_plus = tape.add(one, e)?;
    let tail = tape.log(one_plus)?;
    tape.add(pos, tail)
}

fn ones_like(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let shape = tape.shape(x).to_vec();
    tape.constant_from(vec![1.0; tape.numel(x)], shape)
}

/// Multiplies a node by a scalar constant.
fn scale(tape: &mut Tape, x: NodeId, c: f64) -> Result<NodeId> {
    let s = tape.scalar_const(c);
    let shape = tape.shape(x).to_vec();
    let wide = tape.broadcast(s, &shape)?;
    tape.mul(x, wide)
}

fn check_per_sample_len(op: &'static str, tape: &Tape, v: NodeId, batch: usize) -> Result<()> {
    if tape.shape(v) != [batch] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: tape.shape(v).to_vec(),
            rhs: vec![batch],
        });
    }
    Ok(())
}

/// Binary cross-entropy from logits for multi-label targets, class-mean
/// per sample. Computed through the softplus identity so saturated
/// logits stay finite.
pub fn bce_multilabel(tape: &mut Tape, logits: NodeId, targets: NodeId) -> Result<NodeId> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || tape.shape(targets) != shape.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "bce_multilabel",
            lhs: shape,
            rhs: tape.shape(targets).to_vec(),
        });
    }
    if tape.value(targets).iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(TensorError::Domain {
            op: "bce_multilabel",
            reason: "targets must be exactly 0 or 1".into(),
        });
    }
    // sign = 2y - 1; per-element loss = softplus(-sign * logit)
    let sign: Vec<f64> = tape.value(targets).iter().map(|&y| 2.0 * y - 1.0).collect();
    let sign = tape.constant_from(sign, shape)?;
    let signed = tape.mul(logits, sign)?;
    let m = tape.neg(signed)?;
    let elems = softplus(tape, m)?;
    tape.mean(elems, Some(1))
}

/// Categorical cross-entropy over pixels, pixel-mean per sample.
///
/// `logits` is `[B, P, C]`; `targets` holds `B*P` class indices in
/// row-major pixel order. The row max is folded in as a constant, which
/// leaves gradients unchanged.
pub fn ce_pixelwise(tape: &mut Tape, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::InvalidShape {
            op: "ce_pixelwise",
            shape,
            reason: "expected [batch, pixels, classes]".into(),
        });
    }
    let (b, p, c) = (shape[0], shape[1], shape[2]);
    if targets.len() != b * p {
        return Err(TensorError::ShapeMismatch {
            op: "ce_pixelwise",
            lhs: vec![targets.len()],
            rhs: vec![b * p],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(TensorError::Domain {
            op: "ce_pixelwise",
            reason: format!("class index {bad} out of range for {c} classes"),
        });
    }
    let values = tape.value(logits);
    let mut row_max = vec![0.0; b * p * c];
    let mut one_hot = vec![0.0; b * p * c];
    for row in 0..b * p {
        let chunk = &values[row * c..(row + 1) * c];
        let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row_max[row * c..(row + 1) * c].fill(m);
        one_hot[row * c + targets[row]] = 1.0;
    }
    let row_max = tape.constant_from(row_max, shape.clone())?;
    let one_hot = tape.constant_from(one_hot, shape)?;
    let shifted = tape.sub(logits, row_max)?;
    let e = tape.exp(shifted)?;
    let z = tape.sum(e, Some(2))?;
    let log_z = tape.log(z)?;
    let picked_terms = tape.mul(shifted, one_hot)?;
    let picked = tape.sum(picked_terms, Some(2))?;
    let pixel_loss = tape.sub(log_z, picked)?;
    tape.mean(pixel_loss, Some(1))
}

/// Focal loss from logits for multi-label targets, class-mean per sample.
///
/// Per element `(1 - p_t)^gamma * -log(p_t)` with the power expressed as
/// `exp(-gamma * softplus(sign * logit))`, so nothing saturates. At
/// `gamma = 0` this reduces to [`bce_multilabel`] exactly.
pub fn focal_multilabel(
    tape: &mut Tape,
    logits: NodeId,
    targets: NodeId,
    gamma: f64,
) -> Result<NodeId> {
    if gamma < 0.0 {
        return Err(TensorError::Domain {
            op: "focal_multilabel",
            reason: format!("gamma must be >= 0, got {gamma}"),
        });
    }
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || tape.shape(targets) != shape.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "focal_multilabel",
            lhs: shape,
            rhs: tape.shape(targets).to_vec(),
        });
    }
    if tape.value(targets).iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(TensorError::Domain {
            op: "focal_multilabel",
            reason: "targets must be exactly 0 or 1".into(),
        });
    }
    let sign: Vec<f64> = tape.value(targets).iter().map(|&y| 2.0 * y - 1.0).collect();
    let sign = tape.constant_from(sign, shape)?;
    let signed = tape.mul(logits, sign)?;
    // -log(p_t) = softplus(-signed); (1-p_t)^gamma = exp(-gamma*softplus(signed))
    let neg_signed = tape.neg(signed)?;
    let base = softplus(tape, neg_signed)?;
    let sp = softplus(tape, signed)?;
    let scaled = scale(tape, sp, -gamma)?;
    let focus = tape.exp(scaled)?;
    let elems = tape.mul(focus, base)?;
    tape.mean(elems, Some(1))
}

/// Mean squared reconstruction error per sample.
///
/// Pass the target features through [`Tape::stop_gradient`] first; this
/// function averages over every non-batch axis.
pub fn mse_features(tape: &mut Tape, reconstructed: NodeId, target: NodeId) -> Result<NodeId> {
    let shape = tape.shape(reconstructed).to_vec();
    if tape.shape(target) != shape.as_slice() || shape.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "mse_features",
            lhs: shape,
            rhs: tape.shape(target).to_vec(),
        });
    }
    let diff = tape.sub(reconstructed, target)?;
    let sq = tape.mul(diff, diff)?;
    let mut reduced = sq;
    for axis in (1..shape.len()).rev() {
        reduced = tape.mean(reduced, Some(axis))?;
    }
    Ok(reduced)
}

/// Gaussian prior penalty `0.5 * sum_j(mu^2 + sigma^2 - log sigma^2 - 1)`
/// per sample, summed over the latent axis. For per-pixel latents
/// (`[B, P, J]`) the per-pixel penalties are averaged over pixels.
pub fn kl_gaussian(tape: &mut Tape, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
    let shape = tape.shape(mu).to_vec();
    if tape.shape(logvar) != shape.as_slice() || shape.len() < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "kl_gaussian",
            lhs: shape,
            rhs: tape.shape(logvar).to_vec(),
        });
    }
    let mu_sq = tape.mul(mu, mu)?;
    let var = tape.exp(logvar)?;
    let a = tape.add(mu_sq, var)?;
    let b = tape.sub(a, logvar)?;
    let one = ones_like(tape, b)?;
    let term = tape.sub(b, one)?;
    let mut reduced = tape.sum(term, Some(shape.len() - 1))?;
    // [B, P] after the latent sum for per-pixel latents
    if shape.len() == 3 {
        reduced = tape.mean(reduced, Some(1))?;
    }
    scale(tape, reduced, 0.5)
}

/// Composite SVAE loss: weighted sum of reconstruction, auxiliary task
/// loss, and the Gaussian penalty (negated under [`KlSign::Literal`]).
pub fn svae_loss(
    tape: &mut Tape,
    mse: NodeId,
    task: NodeId,
    kl: NodeId,
    weights: &SvaeLossWeights,
    kl_sign: KlSign,
) -> Result<NodeId> {
    let batch = tape.numel(mse);
    check_per_sample_len("svae_loss", tape, mse, batch)?;
    check_per_sample_len("svae_loss", tape, task, batch)?;
    check_per_sample_len("svae_loss", tape, kl, batch)?;
    let kl = match kl_sign {
        KlSign::Standard => kl,
        KlSign::Literal => tape.neg(kl)?,
    };
    let mse = scale(tape, mse, weights.mse)?;
    let task = scale(tape, task, weights.task)?;
    let kl = scale(tape, kl, weights.kl)?;
    let partial = tape.add(mse, task)?;
    tape.add(partial, kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn logits_node(tape: &mut Tape, data: Vec<f64>, shape: Vec<usize>) -> NodeId {
        let t = Tensor::param(data, shape).unwrap();
        tape.leaf(&t)
    }

    #[test]
    fn bce_zero_logit_positive_target_is_ln2() {
        let mut tape = Tape::new();
        let logits = logits_node(&mut tape, vec![0.0], vec![1, 1]);
        let targets = tape.constant_from(vec![1.0], vec![1, 1]).unwrap();
        let loss = bce_multilabel(&mut tape, logits, targets).unwrap();
        assert!((tape.value(loss)[0] - LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_saturated_logit_is_tiny_and_finite() {
        let mut tape = Tape::new();
        let logits = logits_node(&mut tape, vec![50.0, -50.0], vec![1, 2]);
        let targets = tape.constant_from(vec![1.0, 0.0], vec![1, 2]).unwrap();
        let loss = bce_multilabel(&mut tape, logits, targets).unwrap();
        let v = tape.value(loss)[0];
        assert!(v.is_finite());
        assert!(v < 1e-20, "saturated loss should vanish, got {v}");
    }

    #[test]
    fn bce_matches_direct_formula_on_moderate_logits() {
        let logits = [1.3, -0.7, 0.2, 2.9, -1.1, 0.05];
        let targets = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut tape = Tape::new();
        let l = logits_node(&mut tape, logits.to_vec(), vec![2, 3]);
        let t = tape.constant_from(targets.to_vec(), vec![2, 3]).unwrap();
        let loss = bce_multilabel(&mut tape, l, t).unwrap();
        for (sample, got) in tape.value(loss).iter().enumerate() {
            let mut want = 0.0;
            for k in 0..3 {
                let x: f64 = logits[sample * 3 + k];
                let y = targets[sample * 3 + k];
                let p = 1.0 / (1.0 + (-x).exp());
                want += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            }
            want /= 3.0;
            assert!(
                (got - want).abs() < 1e-10,
                "sample {sample}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let mut tape = Tape::new();
        let l = logits_node(&mut tape, vec![0.0], vec![1, 1]);
        let t = tape.constant_from(vec![0.5], vec![1, 1]).unwrap();
        assert!(bce_multilabel(&mut tape, l, t).is_err());
    }

    #[test]
    fn ce_uniform_logits_is_ln_c() {
        let mut tape = Tape::new();
        let l = logits_node(&mut tape, vec![0.0; 8], vec![1, 2, 4]);
        let loss = ce_pixelwise(&mut tape, l, &[0, 3]).unwrap();
        assert!((tape.value(loss)[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_confident_correct_logit_vanishes() {
        let mut tape = Tape::new();
        let l = logits_node(&mut tape, vec![50.0, 0.0, 0.0, 0.0], vec![1, 1, 4]);
        let loss = ce_pixelwise(&mut tape, l, &[0]).unwrap();
        assert!(tape.value(loss)[0] < 1e-20);
    }

    #[test]
    fn ce_pixel_mean_contract() {
        // pixel 0 uniform over 4 classes (ln 4), pixel 1 saturated (~0)
        let mut tape = Tape::new();
        let mut data = vec![0.0; 8];
        data[4] = 50.0;
        let l = logits_node(&mut tape, data, vec![1, 2, 4]);
        let loss = ce_pixelwise(&mut tape, l, &[1, 0]).unwrap();
        assert!((tape.value(loss)[0] - 4.0f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_out_of_range_index() {
        let mut tape = Tape::new();
        let l = logits_node(&mut tape, vec![0.0; 4], vec![1, 1, 4]);
        assert!(ce_pixelwise(&mut tape, l, &[4]).is_err());
    }

    #[test]
    fn focal_gamma_zero_equals_bce_exactly() {
        let logits = vec![1.7, -2.4, 0.33, 0.0, 5.5, -5.5];
        let targets = vec![1.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let mut tape = Tape::new();
        let l = logits_node(&mut tape, logits.clone(), vec![2, 3]);
        let t = tape.constant_from(targets.clone(), vec![2, 3]).unwrap();
        let f = focal_multilabel(&mut tape, l, t, 0.0).unwrap();
        let b = bce_multilabel(&mut tape, l, t).unwrap();
        for (x, y) in tape.value(f).iter().zip(tape.value(b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_hand_values() {
        // p = 0.9, y = 1, gamma = 2 -> -(0.1)^2 ln 0.9
        let x = (0.9f64 / 0.1).ln();
        let mut tape = Tape::new();
        let l = logits_node(&mut tape, vec![x], vec![1, 1]);
        let t = tape.constant_from(vec![1.0], vec![1, 1]).unwrap();
        let f = focal_multilabel(&mut tape, l, t, 2.0).unwrap();
        let want = -(0.1f64 * 0.1) * 0.9f64.ln();
        assert!((tape.value(f)[0] - want).abs() < 1e-12);

        // p = 0.5, y = 1, gamma = 2 -> 0.25 ln 2
        let mut tape = Tape::new();
        let l = logits_node(&mut tape, vec![0.0], vec![1, 1]);
        let t = tape.constant_from(vec![1.0], vec![1, 1]).unwrap();
        let f = focal_multilabel(&mut tape, l, t, 2.0).unwrap();
        assert!((tape.value(f)[0] - 0.25 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_rejects_negative_gamma() {
        let mut tape = Tape::new();
        let l = logits_node(&mut tape, vec![0.0], vec![1, 1]);
        let t = tape.constant_from(vec![1.0], vec![1, 1]).unwrap();
        assert!(focal_multilabel(&mut tape, l, t, -0.1).is_err());
    }

    #[test]
    fn mse_basics() {
        let mut tape = Tape::new();
        let a = logits_node(&mut tape, vec![1.0, 2.0, 3.0, 4.0], vec![1, 4]);
        let same = tape.constant_from(vec![1.0, 2.0, 3.0, 4.0], vec![1, 4]).unwrap();
        let zero = mse_features(&mut tape, a, same).unwrap();
        assert_eq!(tape.value(zero), &[0.0]);

        let shifted = tape
            .constant_from(vec![0.0, 1.0, 2.0, 3.0], vec![1, 4])
            .unwrap();
        let one = mse_features(&mut tape, a, shifted).unwrap();
        assert_eq!(tape.value(one), &[1.0]);
    }

    #[test]
    fn mse_matches_formula_oracle() {
        let f_hat = [0.13, -0.9, 2.2, 0.0, 1.0, -1.0];
        let f = [0.1, -1.0, 2.0, 0.5, 0.9, -1.2];
        let mut tape = Tape::new();
        let a = logits_node(&mut tape, f_hat.to_vec(), vec![2, 3]);
        let b = tape.constant_from(f.to_vec(), vec![2, 3]).unwrap();
        let loss = mse_features(&mut tape, a, b).unwrap();
        for (sample, got) in tape.value(loss).iter().enumerate() {
            let want: f64 = (0..3)
                .map(|k| (f_hat[sample * 3 + k] - f[sample * 3 + k]).powi(2))
                .sum::<f64>()
                / 3.0;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_fixed_point_and_hand_values() {
        let mut tape = Tape::new();
        let mu = logits_node(&mut tape, vec![0.0, 0.0], vec![1, 2]);
        let logvar = logits_node(&mut tape, vec![0.0, 0.0], vec![1, 2]);
        let kl = kl_gaussian(&mut tape, mu, logvar).unwrap();
        assert_eq!(tape.value(kl), &[0.0]);

        let mut tape = Tape::new();
        let mu = logits_node(&mut tape, vec![1.0, 0.0], vec![1, 2]);
        let logvar = logits_node(&mut tape, vec![0.0, 0.0], vec![1, 2]);
        let kl = kl_gaussian(&mut tape, mu, logvar).unwrap();
        assert!((tape.value(kl)[0] - 0.5).abs() < 1e-15);

        // mu = 0, sigma^2 = 4: 0.5 * (4 - ln 4 - 1)
        let mut tape = Tape::new();
        let mu = logits_node(&mut tape, vec![0.0], vec![1, 1]);
        let logvar = logits_node(&mut tape, vec![4.0f64.ln()], vec![1, 1]);
        let kl = kl_gaussian(&mut tape, mu, logvar).unwrap();
        let want = 0.5 * (4.0 - 4.0f64.ln() - 1.0);
        assert!((tape.value(kl)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn kl_is_non_negative_on_random_batches() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let b = rng.random_range(1..5);
            let j = rng.random_range(1..6);
            let mu: Vec<f64> = (0..b * j).map(|_| rng.random_range(-3.0..3.0)).collect();
            let lv: Vec<f64> = (0..b * j).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut tape = Tape::new();
            let m = tape.constant_from(mu, vec![b, j]).unwrap();
            let l = tape.constant_from(lv, vec![b, j]).unwrap();
            let kl = kl_gaussian(&mut tape, m, l).unwrap();
            for &v in tape.value(kl) {
                assert!(v >= 0.0, "KL penalty must be non-negative, got {v}");
            }
        }
    }

    #[test]
    fn svae_loss_sums_parts() {
        let mut tape = Tape::new();
        let mse = tape.constant_from(vec![0.5], vec![1]).unwrap();
        let task = tape.constant_from(vec![0.7], vec![1]).unwrap();
        let kl = tape.constant_from(vec![0.3], vec![1]).unwrap();
        let total = svae_loss(
            &mut tape,
            mse,
            task,
            kl,
            &SvaeLossWeights::default(),
            KlSign::Standard,
        )
        .unwrap();
        assert!((tape.value(total)[0] - 1.5).abs() < 1e-15);

        let literal = svae_loss(
            &mut tape,
            mse,
            task,
            kl,
            &SvaeLossWeights::default(),
            KlSign::Literal,
        )
        .unwrap();
        assert!((tape.value(literal)[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn svae_loss_rejects_length_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant_from(vec![0.0; 2], vec![2]).unwrap();
        let b = tape.constant_from(vec![0.0; 3], vec![3]).unwrap();
        assert!(svae_loss(
            &mut tape,
            a,
            b,
            a,
            &SvaeLossWeights::default(),
            KlSign::Standard
        )
        .is_err());
    }
}
