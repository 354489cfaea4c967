use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Moment accumulators, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        AdamState { config, m, v, t: 0 }
    }
}

/// One bias-corrected Adam update of every parameter in place.
pub fn adam_step<T: Real>(params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam step with {} parameters, {} gradients and {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Contract(format!(
                "parameter {i}: shape {:?}, gradient {:?}, moments {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }
    state.t += 1;
    let c = state.config;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let t = state.t as i32;
    let corr1 = T::of(1.0 - c.beta1.powi(t));
    let corr2 = T::of(1.0 - c.beta2.powi(t));
    let (lr, eps) = (T::of(c.lr), T::of(c.eps));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gk), mk), vk) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mk = b1 * *mk + one_b1 * gk;
            *vk = b2 * *vk + one_b2 * gk * gk;
            let m_hat = *mk / corr1;
            let v_hat = *vk / corr2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = Tensor::from_slice(Shape::new(1, 1, 1, 3), &[1.0, -2.0, 3.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(p.shape());
        let mut s = AdamState::new(AdamConfig::default(), [&p]);
        adam_step(&mut [&mut p], &[&g], &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = scalar(1.0);
        let cfg = AdamConfig::default();
        let mut s = AdamState::new(cfg, [&p]);
        adam_step(&mut [&mut p], &[&scalar(0.5)], &mut s).unwrap();
        // m^ = g and v^ = g^2 after bias correction
        let expected = 1.0 - cfg.lr * 0.5 / (0.5 + cfg.eps);
        assert!((p.item() - expected).abs() < 1e-15);
        assert!((p.item() - (1.0 - cfg.lr)).abs() < 1e-10);
    }

    #[test]
    fn parameters_do_not_interact() {
        let mut a = scalar(0.3);
        let mut b = scalar(0.3);
        let mut s = AdamState::new(AdamConfig::default(), [&a, &b]);
        for step in 0..5 {
            let g = scalar(0.1 * step as f64 - 0.2);
            adam_step(&mut [&mut a, &mut b], &[&g, &g], &mut s).unwrap();
            assert_eq!(a, b);
        }
        assert!(s.v.iter().all(|v| v.data().iter().all(|&x| x >= 0.0)));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut p = scalar(1.0);
        let g = Tensor::zeros(Shape::new(1, 1, 1, 2));
        let mut s = AdamState::new(AdamConfig::default(), [&p]);
        assert!(matches!(adam_step(&mut [&mut p], &[&g], &mut s), Err(Error::Contract(_))));
        assert!(matches!(adam_step(&mut [&mut p], &[], &mut s), Err(Error::Contract(_))));
    }
}
