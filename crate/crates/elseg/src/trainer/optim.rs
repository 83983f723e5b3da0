//! Student optimizer and teacher EMA update.

use crate::error::{Error, Result};

/// SGD with momentum and decoupled-into-gradient weight decay:
/// `v = momentum * v + g + weight_decay * p; p -= lr * v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, param_len: usize) -> Self {
        SgdMomentum {
            lr,
            momentum,
            weight_decay,
            velocity: vec![0.0; param_len],
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.velocity.len() {
            return Err(Error::Model(format!(
                "momentum buffer length {} does not match {}",
                v.len(),
                self.velocity.len()
            )));
        }
        self.velocity.copy_from_slice(v);
        Ok(())
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::Model(format!(
                "optimizer buffers disagree: params {}, grads {}, velocity {}",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.velocity[i] = self.momentum * self.velocity[i] + g;
            params[i] -= self.lr * self.velocity[i];
        }
        Ok(())
    }
}

/// Elementwise `teacher = alpha * teacher + (1 - alpha) * student`.
pub fn ema_update(teacher: &mut [f64], student: &[f64], alpha: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Model(format!(
            "EMA buffers disagree: teacher {}, student {}",
            teacher.len(),
            student.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "EMA alpha must lie in [0,1], got {alpha}"
        )));
    }
    for (t, s) in teacher.iter_mut().zip(student.iter()) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_basic_arithmetic() {
        let mut teacher = vec![1.0];
        ema_update(&mut teacher, &[0.0], 0.99).unwrap();
        assert!((teacher[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn ema_endpoints() {
        let mut teacher = vec![3.0, -1.0];
        ema_update(&mut teacher, &[7.0, 2.0], 1.0).unwrap();
        assert_eq!(teacher, vec![3.0, -1.0]);
        ema_update(&mut teacher, &[7.0, 2.0], 0.0).unwrap();
        assert_eq!(teacher, vec![7.0, 2.0]);
    }

    #[test]
    fn ema_geometric_decay_closed_form() {
        for &alpha in &[0.9, 0.99] {
            let student = vec![0.25, -0.5];
            let initial = vec![1.25, 0.5];
            let mut teacher = initial.clone();
            for k in 1..=100 {
                ema_update(&mut teacher, &student, alpha).unwrap();
                for i in 0..teacher.len() {
                    let expected = alpha.powi(k) * (initial[i] - student[i]);
                    let got = teacher[i] - student[i];
                    assert!(
                        (got - expected).abs() < 1e-6,
                        "alpha={alpha} k={k}: {got} vs {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn ema_length_mismatch_is_an_error() {
        let mut teacher = vec![0.0; 3];
        assert!(ema_update(&mut teacher, &[0.0; 4], 0.9).is_err());
    }

    #[test]
    fn sgd_matches_hand_computed_steps() {
        let mut opt = SgdMomentum::new(0.1, 0.9, 0.0, 1);
        let mut p = vec![1.0];
        opt.step(&mut p, &[2.0]).unwrap(); // v=2, p=1-0.2=0.8
        assert!((p[0] - 0.8).abs() < 1e-15);
        opt.step(&mut p, &[1.0]).unwrap(); // v=2*0.9+1=2.8, p=0.8-0.28=0.52
        assert!((p[0] - 0.52).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_enters_the_gradient() {
        let mut opt = SgdMomentum::new(0.5, 0.0, 0.1, 1);
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0]).unwrap(); // g = 0 + 0.1*2 = 0.2, p = 2 - 0.1 = 1.9
        assert!((p[0] - 1.9).abs() < 1e-15);
    }
}
