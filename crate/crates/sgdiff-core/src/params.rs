//! Named parameter storage and the per-forward binding session.
//!
//! A [`ParamStore`] maps dotted path names to tensors and persists across
//! training steps; it is what checkpoints serialize. A [`Session`] wraps one
//! [`Tape`] plus a store, copying each referenced parameter onto the tape as a
//! grad-requiring leaf exactly once, so gradients can be read back per path
//! after `backward`.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::rng::Prng;
use crate::tensor::{Result, Tape, TensorError, Var};

#[derive(Debug, Clone)]
pub struct Param<E> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
    /// Clamp floor applied after every optimizer step (attention temperature).
    pub lower_bound: Option<f64>,
}

/// Parameters keyed by path; BTreeMap so every iteration order is stable.
#[derive(Debug, Clone)]
pub struct ParamStore<E: Element> {
    map: BTreeMap<String, Param<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, path: &str, shape: Vec<usize>, data: Vec<E>) -> Result<()> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::BadShape { op: "param_insert", shape });
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::BadArgument {
                op: "param_insert",
                message: format!("`{path}`: {} values for shape {shape:?}", data.len()),
            });
        }
        if self.map.contains_key(path) {
            return Err(TensorError::BadArgument {
                op: "param_insert",
                message: format!("`{path}` already registered"),
            });
        }
        self.map.insert(path.to_owned(), Param { shape, data, lower_bound: None });
        Ok(())
    }

    /// Uniform init in (-bound, bound).
    pub fn add_uniform(&mut self, rng: &mut Prng, path: &str, shape: Vec<usize>, bound: f64) -> Result<()> {
        let numel: usize = shape.iter().product();
        let data = rng.uniform_vec(numel, bound);
        self.insert(path, shape, data)
    }

    pub fn add_normal(&mut self, rng: &mut Prng, path: &str, shape: Vec<usize>, sigma: f64) -> Result<()> {
        let numel: usize = shape.iter().product();
        let data: Vec<E> = (0..numel).map(|_| E::from_f64(rng.normal() * sigma)).collect();
        self.insert(path, shape, data)
    }

    pub fn add_zeros(&mut self, path: &str, shape: Vec<usize>) -> Result<()> {
        let numel: usize = shape.iter().product();
        self.insert(path, shape, vec![E::ZERO; numel])
    }

    pub fn add_const(&mut self, path: &str, shape: Vec<usize>, value: f64) -> Result<()> {
        let numel: usize = shape.iter().product();
        self.insert(path, shape, vec![E::from_f64(value); numel])
    }

    pub fn set_lower_bound(&mut self, path: &str, bound: f64) -> Result<()> {
        self.get_mut(path)?.lower_bound = Some(bound);
        Ok(())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Result<&Param<E>> {
        self.map
            .get(path)
            .ok_or_else(|| TensorError::MissingParam { path: path.to_owned() })
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Param<E>> {
        self.map
            .get_mut(path)
            .ok_or_else(|| TensorError::MissingParam { path: path.to_owned() })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<E>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<E>)> {
        self.map.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn total_len(&self) -> usize {
        self.map.values().map(|p| p.data.len()).sum()
    }

    /// Clamp every bounded parameter to its floor.
    pub fn apply_lower_bounds(&mut self) {
        for param in self.map.values_mut() {
            if let Some(bound) = param.lower_bound {
                let b = E::from_f64(bound);
                for v in &mut param.data {
                    *v = v.maximum(b);
                }
            }
        }
    }

    /// Value-level cast, keeping paths, shapes, and bounds.
    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for (path, p) in &self.map {
            out.map.insert(
                path.clone(),
                Param {
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
                    lower_bound: p.lower_bound,
                },
            );
        }
        out
    }
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// One forward/backward pass over a store.
pub struct Session<'a, E: Element> {
    pub tape: Tape<E>,
    store: &'a ParamStore<E>,
    bound: BTreeMap<String, Var>,
}

impl<'a, E: Element> Session<'a, E> {
    pub fn new(store: &'a ParamStore<E>) -> Self {
        Session { tape: Tape::new(), store, bound: BTreeMap::new() }
    }

    /// Bind a parameter onto the tape (cached per path).
    pub fn param(&mut self, path: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(path) {
            return Ok(v);
        }
        let p = self.store.get(path)?;
        let v = self.tape.leaf(p.data.clone(), p.shape.clone(), true)?;
        self.bound.insert(path.to_owned(), v);
        Ok(v)
    }

    pub fn constant(&mut self, data: Vec<E>, shape: Vec<usize>) -> Result<Var> {
        self.tape.constant(data, shape)
    }

    pub fn constant_f64(&mut self, data: &[f64], shape: Vec<usize>) -> Result<Var> {
        let cast: Vec<E> = data.iter().map(|&v| E::from_f64(v)).collect();
        self.tape.constant(cast, shape)
    }

    pub fn scalar(&mut self, c: f64) -> Result<Var> {
        self.tape.scalar(c)
    }

    pub fn value(&self, v: Var) -> &[E] {
        self.tape.value(v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients per bound path; zeros where the loss never reached a param.
    pub fn grads(&self) -> BTreeMap<String, Vec<E>> {
        let mut out = BTreeMap::new();
        for (path, &var) in &self.bound {
            let g = match self.tape.grad(var) {
                Some(g) => g.to_vec(),
                None => vec![E::ZERO; self.tape.value(var).len()],
            };
            out.insert(path.clone(), g);
        }
        out
    }

    pub fn bound_paths(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_is_cached_per_path() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add_const("w", vec![2, 2], 1.0).unwrap();
        let mut sess = Session::new(&store);
        let a = sess.param("w").unwrap();
        let b = sess.param("w").unwrap();
        assert_eq!(a, b);
        assert_eq!(sess.tape.len(), 1);
    }

    #[test]
    fn grads_cover_unreached_params_with_zeros() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add_const("used", vec![2], 2.0).unwrap();
        store.add_const("unused", vec![3], 1.0).unwrap();
        let mut sess = Session::new(&store);
        let u = sess.param("used").unwrap();
        let _nu = sess.param("unused").unwrap();
        let sq = sess.tape.mul(u, u).unwrap();
        let loss = sess.tape.sum_all(sq).unwrap();
        sess.backward(loss).unwrap();
        let grads = sess.grads();
        assert_eq!(grads["used"], vec![4.0, 4.0]);
        assert_eq!(grads["unused"], vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn lower_bound_clamps() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("tau", vec![3], vec![0.5, 0.001, -2.0]).unwrap();
        store.set_lower_bound("tau", 0.01).unwrap();
        store.apply_lower_bounds();
        assert_eq!(store.get("tau").unwrap().data, vec![0.5, 0.01, 0.01]);
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add_zeros("w", vec![2]).unwrap();
        assert!(store.add_zeros("w", vec![2]).is_err());
    }
}
