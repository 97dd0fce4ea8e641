//! Named parameter sets and SGD with momentum.

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push((name.into(), value));
    }

    /// Removes and returns the last entry.
    pub fn pop(&mut self) -> Option<(String, Tensor)> {
        self.entries.pop()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Pushes every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads(
            self.entries
                .iter()
                .map(|(_, t)| vec![0.0; t.numel()])
                .collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
    }
}

/// Flat gradient buffers aligned with a [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    /// Adds the tape gradients of `vars` (as returned by [`Params::bind`]).
    pub fn accumulate_from(&mut self, tape: &Tape, vars: &[Var]) {
        for (buf, v) in self.0.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(*v) {
                for (b, x) in buf.iter_mut().zip(g.data()) {
                    *b += x;
                }
            }
        }
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Plain SGD with classical (heavy-ball) momentum:
/// `buf = momentum * buf + g; p -= lr * buf`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<Grads>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Grads) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::Diverged("non-finite gradient".into()));
        }
        let vel = self.velocity.get_or_insert_with(|| params.zeros_like());
        for (i, (v, g)) in vel.0.iter_mut().zip(&grads.0).enumerate() {
            let p = params.tensor_mut(i).data_mut();
            for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut p = Params::new();
        p.push("w", Tensor::from_vec(vec![1.0]));
        let mut opt = Sgd::new(0.1, 0.9);
        let g = Grads(vec![vec![1.0]]);
        opt.step(&mut p, &g).unwrap();
        assert!((p.tensor(0).data()[0] - 0.9).abs() < 1e-15);
        opt.step(&mut p, &g).unwrap();
        // second velocity = 0.9 + 1 = 1.9
        assert!((p.tensor(0).data()[0] - (0.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = Params::new();
        p.push("w", Tensor::from_vec(vec![1.0, -2.0]));
        let before = p.clone();
        let mut opt = Sgd::new(0.0, 0.9);
        opt.step(&mut p, &Grads(vec![vec![3.0, 4.0]])).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut p = Params::new();
        p.push("w", Tensor::from_vec(vec![1.0]));
        let mut opt = Sgd::new(0.1, 0.9);
        assert!(opt.step(&mut p, &Grads(vec![vec![f64::NAN]])).is_err());
    }
}
