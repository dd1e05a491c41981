use serde::{Deserialize, Serialize};

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ v + (g + λ w)`, `w ← w − η v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, shapes: &[usize]) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn num_slots(&self) -> usize {
        self.velocity.len()
    }

    /// `params[i]` and `grads[i]` must match the slot sizes given at construction.
    pub fn step(&mut self, lr: f64, params: Vec<&mut [f64]>, grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.velocity.len(), "parameter slot count changed");
        assert_eq!(grads.len(), self.velocity.len(), "gradient slot count changed");
        for ((w, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            assert_eq!(w.len(), v.len(), "parameter slot size changed");
            for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}
