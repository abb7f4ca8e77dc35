use super::{DiffError, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer slots carried by a parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum OptState<T> {
    Empty,
    Adam { first: Tensor<T>, second: Tensor<T> },
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub opt_state: OptState<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            opt_state: OptState::Empty,
        }
    }
}

/// Owns every trainable array of a model, addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId, DiffError> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(DiffError::Graph(format!("duplicate parameter name {name}")));
        }
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill_zero();
        }
    }

    /// Drops optimizer slots, e.g. when switching from Adam to SGD.
    pub fn reset_opt_state(&mut self) {
        for p in &mut self.params {
            p.opt_state = OptState::Empty;
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies all parameter values, for best-epoch snapshots.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) -> Result<(), DiffError> {
        if snapshot.len() != self.params.len() {
            return Err(DiffError::Shape(format!(
                "snapshot has {} tensors, store has {}",
                snapshot.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter().zip(snapshot) {
            if p.value.shape() != v.shape() {
                return Err(DiffError::Shape(format!("snapshot shape mismatch for {}", p.name)));
            }
        }
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = v.clone();
        }
        Ok(())
    }
}
