use std::collections::HashMap;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameter set of one model. Names are unique; ids are dense.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_gradients(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `grads` into the stored gradients; repeated calls accumulate.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, g) in grads.slots.iter().enumerate() {
            if let Some(g) = g {
                self.params[i].grad.add_assign(g);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rounds every value to the nearest f32. Checkpoints store f32, so a
    /// store kept on the f32 grid survives save/load bit for bit.
    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Copies every value whose name (after stripping `prefix` from ours)
    /// exists in `other`. Returns the number of parameters copied.
    pub fn copy_matching(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            let Some(stripped) = p.name.strip_prefix(prefix) else {
                continue;
            };
            if let Some(src) = other.id(stripped) {
                let src = other.value(src);
                if src.shape() != p.value.shape() {
                    return Err(Error::invalid(format!(
                        "parameter {}: shape {:?} does not match source {:?}",
                        p.name,
                        p.value.shape(),
                        src.shape()
                    )));
                }
                p.value = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Gradients produced by one backward pass, indexed by parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub(crate) fn with_len(n: usize) -> Self {
        Gradients { slots: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn add_to(&mut self, id: ParamId, g: Tensor) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Elementwise sum, used to reduce per-example gradients in input order.
    pub fn merge(&mut self, other: Gradients) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (i, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                self.add_to(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }
}

/// Matrix with entries ~ U(±1/√fan_in), where fan_in is the row count.
pub fn uniform_fan_in<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], bound)
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(1.0)).unwrap();
        assert!(s.add("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn accumulate_then_reset() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut g = Gradients::with_len(1);
        g.add_to(id, Tensor::vector(vec![0.5, 0.5]));
        s.accumulate(&g);
        s.accumulate(&g);
        assert_eq!(s.get(id).grad.data(), &[1.0, 1.0]);
        s.zero_gradients();
        assert_eq!(s.get(id).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn copy_matching_strips_prefix() {
        let mut dst = ParamStore::new();
        dst.add("gaze.w", Tensor::scalar(0.0)).unwrap();
        dst.add("enc.w", Tensor::scalar(0.0)).unwrap();
        let mut src = ParamStore::new();
        src.add("w", Tensor::scalar(3.0)).unwrap();
        assert_eq!(dst.copy_matching(&src, "gaze.").unwrap(), 1);
        assert_eq!(dst.value(dst.id("gaze.w").unwrap()).item(), 3.0);
        assert_eq!(dst.value(dst.id("enc.w").unwrap()).item(), 0.0);
    }
}
