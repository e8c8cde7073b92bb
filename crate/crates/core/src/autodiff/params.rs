use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::{name_hash, stream_rng};

/// A named entry of the store. Buffers (running statistics) are saved in
/// checkpoints but never touched by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub trainable: bool,
}

/// Named trainable tensors plus the seed their initial values derive from.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    seed: u64,
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { seed, entries: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(alloc::format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name.to_string(), Param { value, grad: None, trainable });
        Ok(())
    }

    /// Glorot-uniform weight of shape `[fan_in, fan_out]`, drawn from a stream
    /// keyed by the store seed and the parameter name.
    pub fn init_weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let mut rng = stream_rng(self.seed, name_hash(name));
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data)?, true)
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape), true)
    }

    pub fn init_ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::filled(shape, 1.0), true)
    }

    pub fn init_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert(name, value, false)
    }

    /// Inserts or replaces an entry verbatim (checkpoint loading).
    pub fn set_entry(&mut self, name: &str, value: Tensor, trainable: bool) {
        self.entries.insert(name.to_string(), Param { value, grad: None, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        Ok(&mut self.get_mut(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Adds `scale * grad` into the accumulated gradient of `name`.
    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64], scale: f64) -> Result<()> {
        let p = self.get_mut(name)?;
        if grad.len() != p.value.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                detail: alloc::format!("{name}: {} vs {}", grad.len(), p.value.len()),
            });
        }
        let acc = p.grad.get_or_insert_with(|| vec![0.0; grad.len()]);
        for (a, g) in acc.iter_mut().zip(grad) {
            *a += scale * g;
        }
        Ok(())
    }

    /// Marks every trainable parameter as having a zero gradient.
    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut().filter(|p| p.trainable) {
            p.grad = Some(vec![0.0; p.value.len()]);
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Sets every value under `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_pure_and_bounded() {
        let mut a = ParamStore::new(3);
        let mut b = ParamStore::new(3);
        a.init_weight("w", 4, 6).unwrap();
        b.init_weight("w", 4, 6).unwrap();
        assert_eq!(a.value("w").unwrap(), b.value("w").unwrap());
        let bound = libm::sqrt(0.6);
        assert!(a.value("w").unwrap().data().iter().all(|v| v.abs() < bound));
        let mut c = ParamStore::new(4);
        c.init_weight("w", 4, 6).unwrap();
        assert_ne!(a.value("w").unwrap(), c.value("w").unwrap());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(0);
        s.init_zeros("b", &[3]).unwrap();
        assert!(s.init_zeros("b", &[3]).is_err());
    }
}
