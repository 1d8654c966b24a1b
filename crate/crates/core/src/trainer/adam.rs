use std::ops::Range;

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one entry per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of completed steps.
    pub step: u64,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam step. Each `(range, lr)` group updates its
/// parameter range with its own learning rate; parameters outside every
/// group keep their values but their moments still advance.
///
/// Non-finite gradients abort the step before anything is modified.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut AdamMoments,
    groups: &[(Range<usize>, f64)],
) -> Result<()> {
    if grads.len() != params.len()
        || moments.len() != params.len()
        || moments.v.len() != params.len()
    {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            moments.len()
        )));
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    if let Some((r, _)) = groups.iter().find(|(r, _)| r.end > params.len()) {
        return Err(Error::Shape(format!(
            "group {r:?} exceeds {} params",
            params.len()
        )));
    }
    moments.step += 1;
    let t = moments.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, &g) in grads.iter().enumerate() {
        moments.m[i] = BETA1 * moments.m[i] + (1.0 - BETA1) * g;
        moments.v[i] = BETA2 * moments.v[i] + (1.0 - BETA2) * g * g;
    }
    for (range, lr) in groups {
        for i in range.clone() {
            let m_hat = moments.m[i] / c1;
            let v_hat = moments.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradients_leave_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut m = AdamMoments::zeros(3);
        adam_step(&mut p, &[0.0; 3], &mut m, &[(0..3, 0.1)]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(m.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0, 0.0];
        let mut m = AdamMoments::zeros(2);
        adam_step(
            &mut p,
            &[3.0, -0.25],
            &mut m,
            &[(0..1, 0.01), (1..2, 0.001)],
        )
        .unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.001).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = vec![1.0, 1.0];
        let mut m = AdamMoments::zeros(2);
        let err = adam_step(&mut p, &[0.5, f64::NAN], &mut m, &[(0..2, 0.1)]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 1 }));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(m, AdamMoments::zeros(2));
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0; 3];
        assert!(adam_step(&mut p, &[0.0; 2], &mut AdamMoments::zeros(3), &[]).is_err());
    }

    // Textbook recurrence written out per step with explicit powers.
    fn reference(p0: f64, grads: &[f64], lr: f64) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as f64;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powf(t));
            let v_hat = v / (1.0 - 0.999f64.powf(t));
            p -= lr * m_hat / (v_hat.sqrt() + 1e-8);
        }
        p
    }

    #[test]
    fn ten_steps_match_reference_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 16;
        let seq: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let p0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut p = p0.clone();
        let mut m = AdamMoments::zeros(n);
        for g in &seq {
            adam_step(&mut p, g, &mut m, &[(0..n, 0.01)]).unwrap();
        }
        for i in 0..n {
            let gi: Vec<f64> = seq.iter().map(|g| g[i]).collect();
            assert!((p[i] - reference(p0[i], &gi, 0.01)).abs() < 1e-7);
        }
    }
}
