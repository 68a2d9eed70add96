use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

/// Poly learning-rate policy: `initial_lr * (1 - iter/max_iter)^power`.
pub fn poly_lr(initial_lr: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if max_iter < 1 {
        return Err(arg_err!("max_iter must be >= 1"));
    }
    if iter > max_iter {
        return Err(arg_err!("iter {iter} exceeds max_iter {max_iter}"));
    }
    Ok(initial_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// SGD with momentum and L2 weight decay folded into the gradient.
///
/// `v <- momentum * v + (grad + weight_decay * param)`, then `param <- param - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(shape_err!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(shape_err!("optimizer state tracks {} tensors, got {}", self.velocity.len(), params.len()));
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(shape_err!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()));
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + (gv + self.weight_decay * *pv);
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_examples() {
        assert_eq!(poly_lr(0.02, 0, 1000, 0.9).unwrap(), 0.02);
        assert_eq!(poly_lr(0.02, 1000, 1000, 0.9).unwrap(), 0.0);
        // 0.02 * 0.5^0.9 = 0.0107177346...
        assert!((poly_lr(0.02, 500, 1000, 0.9).unwrap() - 0.010_717_734_625_362_93).abs() < 1e-12);
        assert!(poly_lr(0.02, 1001, 1000, 0.9).is_err());
        assert!(poly_lr(0.02, 0, 0, 0.9).is_err());
    }

    #[test]
    fn vanilla_sgd() {
        let mut p = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(&[2], vec![0.5, 2.0]).unwrap();
        Sgd::new(0.0, 0.0).step([&mut p], &[g], 0.1).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -1.0 - 0.2]);
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let mut opt = Sgd::new(0.9, 0.0);
        for _ in 0..3 {
            opt.step([&mut p], &[Tensor::zeros(&[2])], 0.1).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -1.0]);
    }

    #[test]
    fn momentum_hand_trace() {
        let lr = 0.1;
        let mut p = Tensor::scalar(2.0);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step([&mut p], &[Tensor::scalar(1.0)], lr).unwrap();
        assert_eq!(opt.velocity()[0].data(), &[1.0]);
        assert_eq!(p.data(), &[2.0 - lr]);
        opt.step([&mut p], &[Tensor::scalar(1.0)], lr).unwrap();
        assert_eq!(opt.velocity()[0].data(), &[1.9]);
        assert_eq!(p.data(), &[2.0 - lr - 1.9 * lr]);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = Tensor::scalar(10.0);
        Sgd::new(0.0, 0.0005).step([&mut p], &[Tensor::scalar(0.0)], 1.0).unwrap();
        assert_eq!(p.data(), &[10.0 - 0.005]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut p = Tensor::zeros(&[2]);
        assert!(Sgd::new(0.9, 0.0).step([&mut p], &[Tensor::zeros(&[3])], 0.1).is_err());
    }
}
