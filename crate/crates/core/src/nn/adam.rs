use super::Parameterized;

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update to every trainable param of `model` from its
    /// accumulated gradients. Gradients are left untouched.
    pub fn step(&mut self, model: &mut dyn Parameterized) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let lr_t = self.learning_rate * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        let eps = self.eps;
        model.visit_params_mut(&mut |_, p| {
            if !p.trainable {
                return;
            }
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + (1.0 - b1) * g;
                p.v[i] = b2 * p.v[i] + (1.0 - b2) * g * g;
                p.value[i] -= lr_t * p.m[i] / (p.v[i].sqrt() + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, Parameterized};

    struct Quadratic(Param);

    impl Parameterized for Quadratic {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
            f("x", &self.0);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
            f("x", &mut self.0);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut q = Quadratic(Param::from_vec(vec![2], vec![1.0, -1.0]));
        q.0.grad = vec![0.3, -5.0];
        let mut adam = Adam::new(1e-3);
        adam.step(&mut q);
        assert!((q.0.value[0] - (1.0 - 1e-3)).abs() < 1e-8);
        assert!((q.0.value[1] - (-1.0 + 1e-3)).abs() < 1e-8);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quadratic(Param::from_vec(vec![1], vec![3.0]));
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            q.0.grad[0] = 2.0 * (q.0.value[0] - 0.5);
            adam.step(&mut q);
        }
        assert!((q.0.value[0] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn frozen_params_are_not_updated() {
        let mut q = Quadratic(Param::from_vec(vec![1], vec![3.0]).frozen());
        q.0.grad[0] = 1.0;
        Adam::new(0.1).step(&mut q);
        assert_eq!(q.0.value[0], 3.0);
    }
}
