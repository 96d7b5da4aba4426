//! Named parameter storage, initialization and gradient sets.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly created tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Declared shape and initializer of one named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            rows,
            cols,
            init,
        }
    }
}

/// Ordered collection of named matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Materializes `specs` in order, drawing normal entries from a ChaCha
    /// stream seeded with `seed`.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for spec in specs {
            let n = spec.rows * spec.cols;
            let data = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("valid standard deviation");
                    (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect()
                }
            };
            set.insert(spec.name.clone(), Matrix::from_vec(spec.rows, spec.cols, data));
        }
        set
    }

    /// Appends a tensor; panics on duplicate names.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.id(name).map(|id| &mut self.values[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Matrix<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.values
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Checks that this set holds exactly the tensors described by `specs`,
    /// in any order, and reorders it to match.
    pub fn conform(self, specs: &[ParamSpec]) -> Result<Self> {
        let mut by_name: HashMap<String, Matrix<T>> = self.names.into_iter().zip(self.values).collect();
        let mut out = ParamSet::new();
        for spec in specs {
            let value = by_name.remove(&spec.name).ok_or_else(|| Error::Checkpoint {
                entry: spec.name.clone(),
                message: "missing tensor".into(),
            })?;
            if value.shape() != (spec.rows, spec.cols) {
                return Err(Error::Checkpoint {
                    entry: spec.name.clone(),
                    message: format!(
                        "shape {:?} does not match expected {:?}",
                        value.shape(),
                        (spec.rows, spec.cols)
                    ),
                });
            }
            out.insert(spec.name.clone(), value);
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::Checkpoint {
                entry: extra.clone(),
                message: "unexpected tensor".into(),
            });
        }
        Ok(out)
    }

    /// Places every tensor on `tape` as a borrowed leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>, trainable: bool) -> Bound {
        Bound {
            vars: self.values.iter().map(|m| tape.leaf_ref(m, trainable)).collect(),
        }
    }

    pub fn zeros_like(&self) -> GradSet<T> {
        GradSet {
            grads: self.values.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }
}

/// Tape variables of a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Extracts gradients aligned with the bound set; tensors the loss did
    /// not depend on get exact zeros.
    pub fn collect<T: Scalar>(&self, params: &ParamSet<T>, grads: &mut Gradients<T>) -> Result<GradSet<T>> {
        let mut out = Vec::with_capacity(self.vars.len());
        for (i, &v) in self.vars.iter().enumerate() {
            let g = match grads.take(v) {
                Some(g) => g,
                None => {
                    let m = &params.values[i];
                    Matrix::zeros(m.rows(), m.cols())
                }
            };
            if !g.is_finite() {
                return Err(Error::numeric(format!("gradient of `{}`", params.names[i])));
            }
            out.push(g);
        }
        Ok(GradSet { grads: out })
    }
}

/// One gradient matrix per tensor of a [`ParamSet`], in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet<T> {
    grads: Vec<Matrix<T>>,
}

impl<T: Scalar> GradSet<T> {
    pub fn from_matrices(grads: Vec<Matrix<T>>) -> Self {
        GradSet { grads }
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.grads[id.0]
    }

    pub fn matrices(&self) -> &[Matrix<T>] {
        &self.grads
    }

    pub fn add_assign(&mut self, other: &GradSet<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads.iter().map(Matrix::frobenius_sq).sum::<T>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("a", 2, 3, Init::Normal(1.0)),
            ParamSpec::new("b", 1, 3, Init::Zeros),
            ParamSpec::new("c", 1, 3, Init::Ones),
        ]
    }

    #[test]
    fn initialization_is_seeded() {
        let a: ParamSet<f64> = ParamSet::initialize(&specs(), 9);
        let b: ParamSet<f64> = ParamSet::initialize(&specs(), 9);
        let c: ParamSet<f64> = ParamSet::initialize(&specs(), 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.by_name("b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.by_name("c").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conform_reports_offending_entry() {
        let mut set: ParamSet<f64> = ParamSet::new();
        set.insert("c", Matrix::zeros(1, 3));
        set.insert("a", Matrix::zeros(2, 3));
        set.insert("b", Matrix::zeros(3, 1));
        match set.conform(&specs()) {
            Err(Error::Checkpoint { entry, .. }) => assert_eq!(entry, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conform_reorders() {
        let mut set: ParamSet<f64> = ParamSet::new();
        set.insert("c", Matrix::zeros(1, 3));
        set.insert("b", Matrix::zeros(1, 3));
        set.insert("a", Matrix::zeros(2, 3));
        let set = set.conform(&specs()).unwrap();
        let names: Vec<_> = set.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["a", "b", "c"]);
    }
}
