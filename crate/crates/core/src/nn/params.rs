use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tape::Gradients;
use super::tensor::Tensor2D;
use crate::error::{Error, Result};

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor2D,
    m: Tensor2D,
    v: Tensor2D,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters plus Adam moment buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor2D) -> ParamId {
        let name = name.into();
        debug_assert!(self.id_of(&name).is_none(), "duplicate parameter name {name}");
        let (r, c) = value.shape();
        self.params.push(Param {
            name,
            value,
            m: Tensor2D::zeros(r, c),
            v: Tensor2D::zeros(r, c),
        });
        ParamId(self.params.len() - 1)
    }

    /// Registers a `rows x cols` parameter drawn from `uniform(-bound, bound)`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor2D::new(rows, cols, data).expect("sized buffer"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor2D {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2D {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor2D)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p.name.as_str(), &p.value))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor2D {
        &self.params[id.0].m
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor2D {
        &self.params[id.0].v
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    /// One bias-corrected Adam update. Parameters without a gradient are
    /// treated as having a zero gradient. Nothing is modified if any gradient
    /// is non-finite or mis-shaped.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        for (id, g) in grads.iter() {
            let p = self
                .params
                .get(id.0)
                .ok_or_else(|| Error::State(format!("gradient for unknown parameter {}", id.0)))?;
            if !g.same_shape(&p.value) {
                return Err(Error::dim(format!(
                    "gradient {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("gradient of parameter {}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in self.params.iter_mut().enumerate() {
            let g = grads.get(ParamId(i));
            let n = p.value.data().len();
            for j in 0..n {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                let m = &mut p.m.data_mut()[j];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gj;
                let mj = *m;
                let v = &mut p.v.data_mut()[j];
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gj * gj;
                let vj = *v;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                p.value.data_mut()[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;

    fn single(value: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor2D::scalar(value));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let (mut s, id) = single(1.5);
        let cfg = AdamConfig::default();
        let mut g = Gradients::default();
        g.insert(id, Tensor2D::scalar(2.0));
        s.adam_step(&g, &cfg).unwrap();
        let before = s.get(id).clone();
        let m_before = s.first_moment(id).get(0, 0);
        let v_before = s.second_moment(id).get(0, 0);

        let mut zero = Gradients::default();
        zero.insert(id, Tensor2D::scalar(0.0));
        s.adam_step(&zero, &cfg).unwrap();
        assert!((s.first_moment(id).get(0, 0) - 0.9 * m_before).abs() < 1e-15);
        assert!((s.second_moment(id).get(0, 0) - 0.999 * v_before).abs() < 1e-15);
        // with zero gradient from the start, nothing moves
        let (mut fresh, fid) = single(1.5);
        fresh.adam_step(&Gradients::default(), &cfg).unwrap();
        assert_eq!(fresh.get(fid).get(0, 0), 1.5);
        assert_eq!(fresh.step(), 1);
        assert!(before.get(0, 0) != 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        for g in [3.0, -0.25] {
            let (mut s, id) = single(0.0);
            let cfg = AdamConfig::default();
            let mut grads = Gradients::default();
            grads.insert(id, Tensor2D::scalar(g));
            s.adam_step(&grads, &cfg).unwrap();
            // m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps)
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((s.get(id).get(0, 0) - expected).abs() < 1e-18);
            assert!((s.get(id).get(0, 0) + cfg.lr * g.signum()).abs() < 1e-10);
        }
    }

    #[test]
    fn quadratic_loss_strictly_decreases() {
        let (mut s, id) = single(4.0);
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let mut tape = Tape::new();
            let w = tape.param(&s, id);
            let sq = tape.mul(w, w).unwrap();
            let loss = tape.sum(sq);
            let value = tape.value(loss).get(0, 0);
            assert!(value < prev, "loss {value} did not decrease from {prev}");
            prev = value;
            let grads = tape.backward(loss).unwrap();
            s.adam_step(&grads, &cfg).unwrap();
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut s, id) = single(1.0);
        let mut g = Gradients::default();
        g.insert(id, Tensor2D::scalar(f64::NAN));
        let err = s.adam_step(&g, &AdamConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains('w')));
        assert_eq!(s.step(), 0);
        assert_eq!(s.get(id).get(0, 0), 1.0);
    }
}
