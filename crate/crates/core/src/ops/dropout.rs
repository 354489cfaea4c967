use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Op, Real, Var};

impl<T: Real> Graph<T> {
    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`. The
    /// mask is a pure function of `seed`.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(self.identity(x));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.shape(x).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= *m;
        }
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn run(rate: f64, mode: Mode, n: usize) -> (Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(Shape::new(1, 1, 1, n), 1.0));
        let y = g.dropout(x, rate, mode, 42).unwrap();
        (g.value(x).clone(), g.value(y).clone())
    }

    #[test]
    fn zero_rate_and_eval_are_identity() {
        let (x, y) = run(0.0, Mode::Train, 100);
        assert_eq!(x, y);
        let (x, y) = run(0.2, Mode::Eval, 100);
        assert_eq!(x, y);
    }

    #[test]
    fn survivor_fraction_and_mean() {
        let n = 100_000;
        let (_, y) = run(0.2, Mode::Train, n);
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((survivors - 0.8).abs() < 0.01, "{survivors}");
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn mask_is_seed_deterministic() {
        assert_eq!(run(0.5, Mode::Train, 64).1, run(0.5, Mode::Train, 64).1);
    }

    #[test]
    fn rate_out_of_range() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        assert!(matches!(
            g.dropout(x, 1.0, Mode::Train, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            g.dropout(x, -0.1, Mode::Train, 0),
            Err(Error::Config(_))
        ));
    }
}
