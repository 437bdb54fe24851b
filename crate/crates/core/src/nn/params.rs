use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Per-parameter gradients. `None` means the parameter took no part in the
/// forward pass.
#[derive(Clone, Debug)]
pub struct Grads<S> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn empty(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.slots[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Add `other` into `self` elementwise.
    pub fn accumulate(&mut self, other: &Grads<S>) {
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x = *x + y),
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
    }

    /// Gradient of `id`, or zeros shaped like the parameter.
    pub fn dense(&self, id: ParamId, store: &ParamStore<S>) -> Tensor<S> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }
}

/// A tape bound to a parameter store. Parameters are lifted onto the tape on
/// first use.
pub struct Graph<'p, S: Scalar> {
    tape: Tape<S>,
    params: &'p ParamStore<S>,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'p, S: Scalar> Graph<'p, S> {
    /// Graph that records parameter gradients.
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            track: true,
        }
    }

    /// Graph for inference: parameters enter as constants.
    pub fn inference(params: &'p ParamStore<S>) -> Self {
        Self {
            track: false,
            ..Self::new(params)
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.params.get(id).clone();
        let v = if self.track {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.tape.constant(t)
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    /// Run the reverse pass and collect gradients of every bound parameter.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<S>> {
        self.tape.backward(loss)?;
        let slots = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v).cloned()))
            .collect();
        Ok(Grads { slots })
    }
}

impl<S: Scalar> Deref for Graph<'_, S> {
    type Target = Tape<S>;

    fn deref(&self) -> &Tape<S> {
        &self.tape
    }
}

impl<S: Scalar> DerefMut for Graph<'_, S> {
    fn deref_mut(&mut self) -> &mut Tape<S> {
        &mut self.tape
    }
}

/// Glorot-uniform matrix `[fan_in, fan_out]`.
pub fn xavier<S: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(shape, bound, rng)
}

pub fn uniform<S: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::of(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Finite-difference check of every parameter in `store`.
///
/// `loss_and_grads` must evaluate the scalar loss and the analytic gradients
/// at the given parameters. Returns the worst per-tensor relative error and
/// the name of the tensor where it occurred.
pub fn check_store_gradients<F>(store: &ParamStore<f64>, h: f64, loss_and_grads: F) -> Result<(f64, String)>
where
    F: Fn(&ParamStore<f64>) -> Result<(f64, Grads<f64>)>,
{
    let (_, grads) = loss_and_grads(store)?;
    let mut work = store.clone();
    let mut worst = (0.0, String::new());
    for id in store.ids() {
        let analytic = grads.dense(id, store).data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, num) in numeric.iter_mut().enumerate() {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = loss_and_grads(&work)?.0;
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = loss_and_grads(&work)?.0;
            work.get_mut(id).data_mut()[i] = orig;
            *num = (up - down) / (2.0 * h);
        }
        let err = crate::tensor::gradcheck::relative_error(&analytic, &numeric);
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, store.name(id).to_string());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.add("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn unused_params_have_no_grad() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::ones(&[2])).unwrap();
        let b = s.add("b", Tensor::ones(&[2])).unwrap();
        let mut g = Graph::new(&s);
        let va = g.param(a);
        let l = g.sum(va);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert!(grads.get(b).is_none());
        assert_eq!(grads.dense(b, &s).data(), &[0.0, 0.0]);
    }
}
