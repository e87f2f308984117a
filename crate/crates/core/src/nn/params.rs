use serde::{Deserialize, Serialize};

use crate::nn::Real;

/// One named slice of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named grouping over a flat parameter vector.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    groups: Vec<ParamGroup>,
    total: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let g = ParamGroup { name: name.into(), offset: self.total, shape: shape.to_vec() };
        self.total += g.len();
        self.groups.push(g);
        self.groups.len() - 1
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, id: usize) -> &ParamGroup {
        &self.groups[id]
    }

    pub fn find(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn slice<'a, T>(&self, params: &'a [T], id: usize) -> &'a [T] {
        &params[self.groups[id].range()]
    }

    pub fn slice_mut<'a, T>(&self, params: &'a mut [T], id: usize) -> &'a mut [T] {
        &mut params[self.groups[id].range()]
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    step: u32,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![T::zero(); len], v: vec![T::zero(); len], step: 0 }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = T::of(self.lr / c1);
        let c2 = T::of(c2);
        let eps = T::of(self.eps);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *p -= lr * *m / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Exponential moving average of a parameter vector.
pub fn ema_update<T: Real>(shadow: &mut [T], params: &[T], decay: f64) {
    let d = T::of(decay);
    let e = T::one() - d;
    for (s, &p) in shadow.iter_mut().zip(params) {
        *s = d * *s + e * p;
    }
}

pub fn first_non_finite<T: Real>(values: &[T]) -> Option<usize> {
    values.iter().position(|v| !v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_offsets_are_contiguous() {
        let mut l = ParamLayout::default();
        let a = l.push("a", &[2, 3]);
        let b = l.push("b", &[4]);
        assert_eq!(l.group(a).range(), 0..6);
        assert_eq!(l.group(b).range(), 6..10);
        assert_eq!(l.total(), 10);
        assert_eq!(l.find("b").unwrap().offset, 6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0f64, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "{p:?}");
    }
}
