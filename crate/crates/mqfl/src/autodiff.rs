//! Parameter-shift gradients for quantum angles, closed-form gradients for
//! the classical readout, and first-order optimizers.
//!
//! Rotation gates generated by half-turn Paulis admit an exact derivative:
//! `d<O>/dt = [<O>(t + pi/2) - <O>(t - pi/2)] / 2`. [`full_gradient`] chains
//! that rule through any objective exposing per-sample expectations and an
//! analytic tail, costing two circuit evaluations per angle per sample.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

/// Gradient aligned 1:1 with a model's flattened parameter vector
/// (quantum angles first, then readout weights).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
}

impl GradientVector {
    /// Wraps a raw gradient, rejecting non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "gradient entry {i} is not finite: {}",
                values[i]
            )));
        }
        Ok(GradientVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Exact derivative of `eval` with respect to `params[slot]` for half-turn
/// rotation generators: the +-pi/2 two-point rule.
pub fn param_shift_grad<F>(mut eval: F, params: &[f64], slot: usize) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if slot >= params.len() {
        return Err(Error::structural(format!(
            "shift slot {slot} out of range for {} parameters",
            params.len()
        )));
    }
    let mut scratch = params.to_vec();
    scratch[slot] = params[slot] + FRAC_PI_2;
    let plus = eval(&scratch)?;
    scratch[slot] = params[slot] - FRAC_PI_2;
    let minus = eval(&scratch)?;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite evaluation while shifting slot {slot}: {plus} / {minus}"
        )));
    }
    Ok((plus - minus) / 2.0)
}

/// Central finite-difference derivative, the independent check on
/// [`param_shift_grad`]. Approximate; `h` trades truncation for round-off.
pub fn finite_difference_grad<F>(mut eval: F, params: &[f64], slot: usize, h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if slot >= params.len() {
        return Err(Error::structural(format!(
            "difference slot {slot} out of range for {} parameters",
            params.len()
        )));
    }
    let mut scratch = params.to_vec();
    scratch[slot] = params[slot] + h;
    let plus = eval(&scratch)?;
    scratch[slot] = params[slot] - h;
    let minus = eval(&scratch)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy of `logits` against a hard `label`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::structural(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Gradient of softmax cross-entropy with respect to the logits:
/// `softmax(logits) - onehot(label)`.
pub fn softmax_minus_onehot(logits: &[f64], label: usize) -> Vec<f64> {
    let mut probs = softmax(logits);
    probs[label] -= 1.0;
    probs
}

/// What a [`full_gradient`] call needs from a model: per-sample Z-expectations
/// as a function of the angle prefix, the set of angle slots that can reach
/// each sample, and the analytic tail from expectations to the loss.
pub trait ShiftObjective: Sync {
    /// Length of the quantum-angle prefix of the parameter vector.
    fn num_angles(&self) -> usize;
    /// Total trainable parameter count (angles + readout tail).
    fn num_params(&self) -> usize;
    fn num_samples(&self) -> usize;
    /// Expectations for one sample at the given angles.
    fn expectations(&self, sample: usize, angles: &[f64]) -> Result<Vec<f64>>;
    /// Angle slots whose gates execute for this sample; all other angle
    /// slots receive an exactly-zero gradient contribution from it.
    fn active_angle_slots(&self, sample: usize) -> Vec<usize>;
    /// Loss, d(loss)/d(expectations), and the gradient of the readout tail,
    /// all evaluated at `expectations` and the full parameter vector.
    fn tail_backward(
        &self,
        sample: usize,
        expectations: &[f64],
        params: &[f64],
    ) -> Result<(f64, Vec<f64>, Vec<f64>)>;
}

/// Mean loss and mean gradient over every sample of the objective.
///
/// Quantum slots go through the parameter-shift rule chained with the
/// objective's analytic expectation gradient; the readout tail is taken
/// verbatim from the objective. Samples are evaluated in parallel but
/// accumulated in index order, so the result is bitwise reproducible.
pub fn full_gradient<O: ShiftObjective>(obj: &O, params: &[f64]) -> Result<(GradientVector, f64)> {
    let num_params = obj.num_params();
    let num_angles = obj.num_angles();
    let num_samples = obj.num_samples();
    if params.len() != num_params {
        return Err(Error::structural(format!(
            "objective expects {num_params} parameters, got {}",
            params.len()
        )));
    }
    if num_samples == 0 {
        return Err(Error::structural("gradient over an empty batch"));
    }
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::numeric(format!("parameter {i} is not finite")));
    }
    let angles = &params[..num_angles];

    let per_sample: Result<Vec<(Vec<f64>, f64)>> = (0..num_samples)
        .into_par_iter()
        .map(|idx| sample_gradient(obj, idx, angles, params).map_err(|e| e.with_sample(idx)))
        .collect();

    let mut grad = vec![0.0; num_params];
    let mut loss = 0.0;
    for (sample_grad, sample_loss) in per_sample? {
        for (g, s) in grad.iter_mut().zip(&sample_grad) {
            *g += s;
        }
        loss += sample_loss;
    }
    let inv = 1.0 / num_samples as f64;
    for g in grad.iter_mut() {
        *g *= inv;
    }
    Ok((GradientVector::new(grad)?, loss * inv))
}

fn sample_gradient<O: ShiftObjective>(
    obj: &O,
    idx: usize,
    angles: &[f64],
    params: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let num_angles = obj.num_angles();
    let mut grad = vec![0.0; obj.num_params()];

    let base = obj.expectations(idx, angles)?;
    let (loss, expect_grad, tail) = obj.tail_backward(idx, &base, params)?;
    if expect_grad.len() != base.len() {
        return Err(Error::structural(format!(
            "expectation gradient length {} does not match {} expectations",
            expect_grad.len(),
            base.len()
        )));
    }
    let tail_slots = obj.num_params() - num_angles;
    if tail.len() != tail_slots {
        return Err(Error::structural(format!(
            "readout tail gradient has length {}, expected {tail_slots}",
            tail.len()
        )));
    }
    grad[num_angles..].copy_from_slice(&tail);

    let mut scratch = angles.to_vec();
    for slot in obj.active_angle_slots(idx) {
        if slot >= num_angles {
            return Err(Error::structural(format!(
                "active slot {slot} out of range for {num_angles} angles"
            )));
        }
        scratch[slot] = angles[slot] + FRAC_PI_2;
        let plus = obj.expectations(idx, &scratch)?;
        scratch[slot] = angles[slot] - FRAC_PI_2;
        let minus = obj.expectations(idx, &scratch)?;
        scratch[slot] = angles[slot];
        let mut acc = 0.0;
        for q in 0..base.len() {
            acc += expect_grad[q] * (plus[q] - minus[q]) / 2.0;
        }
        grad[slot] = acc;
    }
    Ok((grad, loss))
}

/// Which first-order update rule an [`OptimizerState`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Declarative optimizer choice; [`build`](Self::build) turns it into a
/// fresh [`OptimizerState`] sized for a concrete parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl OptimizerSpec {
    /// Adam at the default learning rate 0.05.
    pub fn default_adam() -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam,
            learning_rate: 0.05,
        }
    }

    pub fn build(&self, num_params: usize) -> Result<OptimizerState> {
        match self.kind {
            OptimizerKind::Sgd => OptimizerState::sgd(self.learning_rate),
            OptimizerKind::Adam => OptimizerState::adam(self.learning_rate, num_params),
        }
    }
}

/// Optimizer with its persistent state. Adam keeps bias-corrected first and
/// second moments; SGD is stateless.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl OptimizerState {
    /// Plain gradient descent. The learning rate may be zero (a frozen
    /// optimizer is useful in tests) but never negative.
    pub fn sgd(learning_rate: f64) -> Result<Self> {
        check_lr(learning_rate)?;
        Ok(OptimizerState {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
        })
    }

    /// Adam with the conventional defaults beta1=0.9, beta2=0.999, eps=1e-8.
    pub fn adam(learning_rate: f64, num_params: usize) -> Result<Self> {
        Self::adam_with(learning_rate, 0.9, 0.999, 1e-8, num_params)
    }

    pub fn adam_with(
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        num_params: usize,
    ) -> Result<Self> {
        check_lr(learning_rate)?;
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::structural(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if epsilon <= 0.0 {
            return Err(Error::structural(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(OptimizerState {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [f64], grad: &GradientVector) -> Result<()> {
        if grad.len() != params.len() {
            return Err(Error::structural(format!(
                "gradient length {} does not match {} parameters",
                grad.len(),
                params.len()
            )));
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad.values()) {
                    *p -= self.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.len() != params.len() {
                    return Err(Error::structural(format!(
                        "adam moments sized for {} parameters, got {}",
                        self.first_moment.len(),
                        params.len()
                    )));
                }
                self.step_count += 1;
                let t = self.step_count as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grad.values()).enumerate() {
                    let m = &mut self.first_moment[i];
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    let v = &mut self.second_moment[i];
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                }
            }
        }
        Ok(())
    }
}

fn check_lr(learning_rate: f64) -> Result<()> {
    if !learning_rate.is_finite() || learning_rate < 0.0 {
        return Err(Error::structural(format!(
            "learning rate must be finite and non-negative, got {learning_rate}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuits::build_modality_pqc;
    use crate::qstate::{GateOp, StateVector};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::{FRAC_PI_2, PI};

    /// <Z> after RY(theta)|0> is cos(theta).
    fn ry_expectation(params: &[f64]) -> Result<f64> {
        let mut state = StateVector::zero(1);
        state.apply_gate(&GateOp::ry(0, 0), params)?;
        state.expect_pauli_z(0)
    }

    #[test]
    fn shift_rule_on_cosine() {
        let g0 = param_shift_grad(ry_expectation, &[0.0], 0).unwrap();
        assert!(g0.abs() < 1e-12, "cos' at 0 should vanish, got {g0}");
        let g = param_shift_grad(ry_expectation, &[FRAC_PI_2], 0).unwrap();
        assert!((g + 1.0).abs() < 1e-12, "cos' at pi/2 should be -1, got {g}");
    }

    #[test]
    fn shift_matches_finite_difference_on_pqc() {
        let circuit = build_modality_pqc(3, 2).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let params: Vec<f64> = (0..circuit.num_params())
            .map(|_| rng.random_range(-PI..PI))
            .collect();
        let eval = |p: &[f64]| -> Result<f64> {
            let mut state = StateVector::zero(3);
            circuit.apply_to(&mut state, p)?;
            // A fixed linear functional of all three expectations.
            Ok(state.expect_pauli_z(0)? + 0.5 * state.expect_pauli_z(1)?
                - 0.25 * state.expect_pauli_z(2)?)
        };
        for slot in 0..params.len() {
            let ps = param_shift_grad(eval, &params, slot).unwrap();
            let fd = finite_difference_grad(eval, &params, slot, 1e-4).unwrap();
            assert!(
                (ps - fd).abs() < 1e-6,
                "slot {slot}: shift {ps} vs difference {fd}"
            );
        }
    }

    #[test]
    fn shift_error_paths() {
        assert!(param_shift_grad(ry_expectation, &[0.0], 3).is_err());
        let bad = |_: &[f64]| -> Result<f64> { Ok(f64::NAN) };
        let err = param_shift_grad(bad, &[0.0], 0).unwrap_err();
        assert!(err.to_string().contains("slot 0"), "{err}");
    }

    #[test]
    fn softmax_basics() {
        let probs = softmax(&[0.0, 0.0, 0.0]);
        for p in &probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let sum: f64 = softmax(&[3.0, -1.0, 0.5, 900.0]).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        assert!((cross_entropy(&[0.0, 0.0], 0).unwrap() - 2.0f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&[0.0; 6], 3).unwrap() - 6.0f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn onehot_gradient_at_zero_logits() {
        let g = softmax_minus_onehot(&[0.0, 0.0], 1);
        assert!((g[0] - 0.5).abs() < 1e-12);
        assert!((g[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn sgd_step_examples() {
        let mut opt = OptimizerState::sgd(0.1).unwrap();
        let mut params = vec![0.0, 0.0];
        let grad = GradientVector::new(vec![1.0, -2.0]).unwrap();
        opt.step(&mut params, &grad).unwrap();
        assert!((params[0] + 0.1).abs() < 1e-15);
        assert!((params[1] - 0.2).abs() < 1e-15);

        let zero = GradientVector::new(vec![0.0, 0.0]).unwrap();
        let before = params.clone();
        opt.step(&mut params, &zero).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_follows_sign() {
        let mut opt = OptimizerState::adam(0.05, 3).unwrap();
        let mut params = vec![0.0; 3];
        let grad = GradientVector::new(vec![0.7, -1.3, 2.0]).unwrap();
        opt.step(&mut params, &grad).unwrap();
        for (p, g) in params.iter().zip(grad.values()) {
            assert!(
                (p + 0.05 * g.signum()).abs() < 1e-6,
                "param {p} for gradient {g}"
            );
        }
    }

    #[test]
    fn optimizer_rejects_bad_shapes_and_rates() {
        assert!(OptimizerState::sgd(-0.1).is_err());
        assert!(OptimizerState::sgd(0.0).is_ok());
        let mut opt = OptimizerState::adam(0.05, 2).unwrap();
        let mut params = vec![0.0; 3];
        let grad = GradientVector::new(vec![1.0; 3]).unwrap();
        assert!(opt.step(&mut params, &grad).is_err());
        let short = GradientVector::new(vec![1.0; 2]).unwrap();
        let mut sgd = OptimizerState::sgd(0.1).unwrap();
        assert!(sgd.step(&mut params, &short).is_err());
    }

    #[test]
    fn gradient_vector_rejects_non_finite() {
        assert!(GradientVector::new(vec![0.0, f64::NAN]).is_err());
    }

    /// Toy objective: one qubit per sample, expectation cos(theta + offset),
    /// squared-error tail against a target of 0.25, no readout parameters.
    struct CosineObjective {
        offsets: Vec<f64>,
        active: Vec<Vec<usize>>,
    }

    impl ShiftObjective for CosineObjective {
        fn num_angles(&self) -> usize {
            1
        }
        fn num_params(&self) -> usize {
            1
        }
        fn num_samples(&self) -> usize {
            self.offsets.len()
        }
        fn expectations(&self, sample: usize, angles: &[f64]) -> Result<Vec<f64>> {
            let mut state = StateVector::zero(1);
            state.apply_gate(&GateOp::ry(0, 0), &[angles[0] + self.offsets[sample]])?;
            Ok(vec![state.expect_pauli_z(0)?])
        }
        fn active_angle_slots(&self, sample: usize) -> Vec<usize> {
            self.active[sample].clone()
        }
        fn tail_backward(
            &self,
            _sample: usize,
            expectations: &[f64],
            _params: &[f64],
        ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
            let e = expectations[0];
            let r = e - 0.25;
            Ok((r * r, vec![2.0 * r], Vec::new()))
        }
    }

    #[test]
    fn engine_matches_analytic_derivative() {
        let obj = CosineObjective {
            offsets: vec![0.0],
            active: vec![vec![0]],
        };
        let theta: f64 = 0.9;
        let (grad, loss) = full_gradient(&obj, &[theta]).unwrap();
        let expect_loss = (theta.cos() - 0.25).powi(2);
        let expect_grad = 2.0 * (theta.cos() - 0.25) * (-theta.sin());
        assert!((loss - expect_loss).abs() < 1e-12);
        assert!((grad.values()[0] - expect_grad).abs() < 1e-10);
    }

    #[test]
    fn engine_duplicated_sample_is_linear() {
        let single = CosineObjective {
            offsets: vec![0.4],
            active: vec![vec![0]],
        };
        let doubled = CosineObjective {
            offsets: vec![0.4, 0.4],
            active: vec![vec![0], vec![0]],
        };
        let (g1, l1) = full_gradient(&single, &[0.3]).unwrap();
        let (g2, l2) = full_gradient(&doubled, &[0.3]).unwrap();
        // The mean over two identical samples equals the single sample, bitwise.
        assert_eq!(g1.values(), g2.values());
        assert_eq!(l1, l2);
    }

    #[test]
    fn engine_zeroes_inactive_slots() {
        let obj = CosineObjective {
            offsets: vec![0.1, 0.7],
            active: vec![vec![], vec![0]],
        };
        let (full, _) = full_gradient(&obj, &[0.5]).unwrap();
        let only_second = CosineObjective {
            offsets: vec![0.7],
            active: vec![vec![0]],
        };
        let (half, _) = full_gradient(&only_second, &[0.5]).unwrap();
        // Sample 0 contributes exactly nothing to the angle slot.
        assert_eq!(full.values()[0], half.values()[0] / 2.0);

        let inert = CosineObjective {
            offsets: vec![0.1],
            active: vec![vec![]],
        };
        let (zero, _) = full_gradient(&inert, &[0.5]).unwrap();
        assert_eq!(zero.values()[0], 0.0);
        assert_eq!(zero.values()[0].to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn engine_rejects_empty_batch_and_bad_params() {
        let obj = CosineObjective {
            offsets: vec![],
            active: vec![],
        };
        assert!(full_gradient(&obj, &[0.0]).is_err());
        let obj = CosineObjective {
            offsets: vec![0.0],
            active: vec![vec![0]],
        };
        assert!(full_gradient(&obj, &[0.0, 1.0]).is_err());
        assert!(full_gradient(&obj, &[f64::NAN]).is_err());
    }
}
