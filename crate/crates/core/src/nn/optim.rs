use super::Parameters;
use crate::scalar::Scalar;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P) {
        let grads = grads.tensors();
        let mut params = params.tensors_mut();
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        let step_size = self.lr / bc1;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(&grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * gi * gi;
                let denom = (v[i] / bc2).sqrt() + self.eps;
                p[i] -= step_size * m[i] / denom;
            }
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar, P: Parameters<T>>(grads: &mut P, max_norm: T) -> T {
    let total = grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .fold(T::zero(), |acc, &g| acc + g * g)
        .sqrt();
    if total > max_norm && total > T::zero() {
        let s = max_norm / total;
        for t in grads.tensors_mut() {
            for g in t.iter_mut() {
                *g *= s;
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_fits_a_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = Dense::<f64>::new(3, 1, 1.0, &mut rng);
        let mut opt = Adam::new(0.05);
        let x = Array2::from_shape_vec((4, 3), vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 1., 1., 1.]).unwrap();
        let target = Array2::from_shape_vec((4, 1), vec![2., -1., 0.5, 1.5]).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            let y = layer.forward(&x);
            let diff = &y - &target;
            last = diff.mapv(|d| d * d).sum();
            let mut g = layer.zeros_like();
            layer.backward(&x, &(diff * 2.0), &mut g);
            opt.step(&mut layer, &g);
        }
        assert!(last < 1e-6, "loss {last}");
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Dense::<f64>::new(10, 10, 10.0, &mut rng);
        let before = clip_grad_norm(&mut g, 1.0);
        assert!(before > 1.0);
        let after = clip_grad_norm(&mut g, 1.0);
        assert!((after - 1.0).abs() < 1e-9);
    }
}
