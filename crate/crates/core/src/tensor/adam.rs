use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn new(lr: f32) -> Result<Self> {
        let cfg = Self {
            lr,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("Adam eps must be positive"));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { m, v, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update.
///
/// Parameters whose gradient is `None` are left alone, including their
/// moment buffers.
pub fn adam_step(
    params: &mut [&mut Tensor<f32>],
    grads: &[Option<Tensor<f32>>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam_step: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        if g.len() != p.len() || state.m[i].len() != p.len() {
            return Err(Error::shape(format!(
                "adam_step: parameter {i} has {} values but gradient has {}",
                p.len(),
                g.len()
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(p: f32, g: f32, lr: f32, state: &mut AdamState) -> f32 {
        let mut t = Tensor::scalar(p);
        adam_step(
            &mut [&mut t],
            &[Some(Tensor::scalar(g))],
            state,
            &AdamConfig::new(lr).unwrap(),
        )
        .unwrap();
        t.item()
    }

    #[test]
    fn first_step_closed_form() {
        let mut st = AdamState::new([1]);
        let p = scalar_step(1.0, 1.0, 0.1, &mut st);
        assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-7, "{p}");
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut st = AdamState::new([1]);
        assert_eq!(scalar_step(2.5, 0.0, 0.1, &mut st), 2.5);
    }

    #[test]
    fn absent_gradient_is_skipped() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        let mut st = AdamState::new([1, 1]);
        adam_step(
            &mut [&mut a, &mut b],
            &[Some(Tensor::scalar(1.0)), None],
            &mut st,
            &AdamConfig::new(0.1).unwrap(),
        )
        .unwrap();
        assert!(a.item() < 1.0);
        assert_eq!(b.item(), 1.0);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut st = AdamState::new([1]);
        let mut p = 0.0f32;
        for _ in 0..100 {
            let g = 2.0 * (p - 3.0);
            p = scalar_step(p, g, 0.1, &mut st);
        }
        assert!((p - 3.0).abs() < 0.5, "{p}");
    }

    #[test]
    fn rejects_non_positive_lr() {
        assert!(matches!(AdamConfig::new(0.0), Err(Error::Config(_))));
        assert!(matches!(AdamConfig::new(-1e-3), Err(Error::Config(_))));
    }
}
