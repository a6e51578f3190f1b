//! Named parameter tables, their initialization, and graph binding.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Gradients, Var};
use crate::error::{ComaError, Result};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation, resampled outside ±2σ.
    TruncNormal(f64),
    Normal(f64),
}

/// Which half of the autoencoder a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Subject to decoupled weight decay.
    pub decay: bool,
    pub part: Part,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered parameter table. Order follows the descriptors it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    /// Draws every parameter from the `(seed, Init, 0)` stream in table order.
    pub fn init(specs: Vec<ParamSpec>, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let values = specs.iter().map(|s| draw(s, &mut rng)).collect::<Result<Vec<_>>>()?;
        Self::from_parts(specs, values)
    }

    pub fn from_parts(specs: Vec<ParamSpec>, values: Vec<Tensor<T>>) -> Result<Self> {
        if specs.len() != values.len() {
            return Err(ComaError::Invariant("descriptor and value counts differ".into()));
        }
        let mut index = HashMap::with_capacity(specs.len());
        for (i, (s, v)) in specs.iter().zip(&values).enumerate() {
            if s.shape != v.shape() {
                return Err(ComaError::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    v.shape(),
                    s.shape
                )));
            }
            if index.insert(s.name.clone(), i).is_some() {
                return Err(ComaError::Invariant(format!("duplicate parameter {}", s.name)));
            }
        }
        Ok(Self { specs, values, index })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Overwrites every value with `other`'s, which must share the same specs.
    pub fn copy_from(&mut self, other: &Self) -> Result<()> {
        if self.specs != other.specs {
            return Err(ComaError::Invariant("copy between differently shaped stores".into()));
        }
        self.values.clone_from(&other.values);
        Ok(())
    }

    /// Bitwise equality of all values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.specs == other.specs && self.values.iter().zip(&other.values).all(|(a, b)| a.bit_eq(b))
    }

    /// Binds the table into `g`: as leaves when `track`, else as constants
    /// that add no records to the tape.
    pub fn bind<'a>(&'a self, g: &Graph<T>, track: bool) -> Bound<'a, T> {
        let vars = self
            .values
            .iter()
            .map(|v| if track { g.leaf(v.clone()) } else { Var::constant(v.clone()) })
            .collect();
        Bound { index: &self.index, vars }
    }

    /// Binds caller-supplied variables under this table's names.
    pub fn bind_vars(&self, vars: Vec<Var<T>>) -> Result<Bound<'_, T>> {
        if vars.len() != self.values.len()
            || vars.iter().zip(&self.values).any(|(v, t)| v.shape() != t.shape())
        {
            return Err(ComaError::Invariant("bound variables do not match the parameter table".into()));
        }
        Ok(Bound { index: &self.index, vars })
    }
}

fn draw<T: Scalar>(spec: &ParamSpec, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let n = spec.numel();
    let data = match spec.init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).map_err(|e| ComaError::Config(e.to_string()))?;
            (0..n).map(|_| T::of(d.sample(rng))).collect()
        }
        Init::TruncNormal(std) => {
            let d = Normal::new(0.0, std).map_err(|e| ComaError::Config(e.to_string()))?;
            (0..n)
                .map(|_| loop {
                    let x: f64 = d.sample(rng);
                    if x.abs() <= 2.0 * std {
                        break T::of(x);
                    }
                })
                .collect()
        }
    };
    Tensor::from_vec(spec.shape.clone(), data)
}

/// Parameters bound into one graph, looked up by name.
pub struct Bound<'a, T> {
    index: &'a HashMap<String, usize>,
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Bound<'_, T> {
    pub fn get(&self, name: &str) -> Result<&Var<T>> {
        self.index
            .get(name)
            .map(|&i| &self.vars[i])
            .ok_or_else(|| ComaError::Invariant(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }

    /// Gradient per parameter, in store order; zeros where the loss does not reach.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    }
}

/// Spec builders shared by the model definitions.
pub(crate) struct SpecList {
    pub specs: Vec<ParamSpec>,
    part: Part,
}

impl SpecList {
    pub fn new(part: Part) -> Self {
        Self { specs: Vec::new(), part }
    }

    pub fn set_part(&mut self, part: Part) {
        self.part = part;
    }

    pub fn push(&mut self, name: String, shape: Vec<usize>, init: Init, decay: bool) {
        self.specs.push(ParamSpec { name, shape, init, decay, part: self.part });
    }

    /// `weight: in×out` and `bias: out`.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.push(format!("{prefix}.weight"), vec![fan_in, fan_out], Init::TruncNormal(0.02), true);
        self.push(format!("{prefix}.bias"), vec![fan_out], Init::Zeros, true);
    }

    pub fn matrix(&mut self, name: String, rows: usize, cols: usize) {
        self.push(name, vec![rows, cols], Init::TruncNormal(0.02), true);
    }

    pub fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize) {
        self.push(format!("{prefix}.weight"), vec![cout, cin, k, k], Init::TruncNormal(0.02), true);
        self.push(format!("{prefix}.bias"), vec![cout], Init::Zeros, true);
    }

    pub fn norm(&mut self, prefix: &str, width: usize) {
        self.push(format!("{prefix}.gamma"), vec![width], Init::Ones, false);
        self.push(format!("{prefix}.beta"), vec![width], Init::Zeros, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        let mut l = SpecList::new(Part::Encoder);
        l.linear("fc", 3, 4);
        l.norm("ln", 4);
        l.push("tok".into(), vec![4], Init::Normal(0.02), false);
        l.specs
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ParamStore::<f64>::init(specs(), 9).unwrap();
        let b = ParamStore::<f64>::init(specs(), 9).unwrap();
        let c = ParamStore::<f64>::init(specs(), 10).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
        assert!(a.get("fc.weight").unwrap().data().iter().all(|x| x.abs() <= 0.04));
        assert!(a.get("fc.bias").unwrap().data().iter().all(|&x| x == 0.0));
        assert!(a.get("ln.gamma").unwrap().data().iter().all(|&x| x == 1.0));
        assert_eq!(a.numel(), 12 + 4 + 8 + 4);
    }

    #[test]
    fn bind_untracked_records_nothing() {
        let store = ParamStore::<f64>::init(specs(), 1).unwrap();
        let g = Graph::new();
        let bound = store.bind(&g, false);
        assert!(g.is_empty());
        assert!(!bound.get("fc.weight").unwrap().is_tracked());
        let _ = store.bind(&g, true);
        assert_eq!(g.len(), store.len());
        assert!(bound.get("nope").is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let s = specs();
        let mut values: Vec<Tensor<f64>> = s.iter().map(|p| Tensor::zeros(p.shape.clone())).collect();
        values[0] = Tensor::zeros([4, 3]);
        assert!(ParamStore::from_parts(s, values).is_err());
    }
}
