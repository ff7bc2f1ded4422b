//! Named parameter storage and the binder that turns parameters into graph
//! variables during a forward pass.
//!
//! Parameters are created lazily the first time a forward pass asks for them,
//! each initialized from its own stream `derive_seed(store_seed, [label(name)])`,
//! so values do not depend on creation order.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use crate::autograd::{Gradients, Var};
use crate::rng::{label, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

impl Init {
    /// He-uniform, bound `sqrt(6 / fan_in)`: keeps activation variance
    /// through ReLU stacks, which the decoder's unnormalized MLPs need.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform((6.0 / fan_in.max(1) as f64).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    seed: u64,
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    /// Returns the parameter, creating it with `init` if absent.
    ///
    /// Panics if it exists with a different shape.
    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> &Param {
        let seed = self.seed;
        let p = self.entries.entry(name.to_string()).or_insert_with(|| {
            let mut rng = SeededRng::derive(seed, &[label(name)]);
            let numel = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::Uniform(b) => (0..numel).map(|_| rng.range_f64(-b, b)).collect(),
            };
            Param {
                value: Tensor::new(shape.to_vec(), data),
                grad: Tensor::zeros(shape.to_vec()),
            }
        });
        assert_eq!(
            p.value.shape(),
            shape,
            "parameter `{name}` exists with shape {:?}, requested {shape:?}",
            p.value.shape()
        );
        p
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) {
        let p = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        assert_eq!(p.value.shape(), value.shape(), "shape change for `{name}`");
        p.value = value;
    }

    /// Inserts or replaces a parameter wholesale.
    pub fn insert(&mut self, name: &str, value: Tensor) {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.insert(name.to_string(), Param { value, grad });
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &[(String, Tensor)]) {
        for (name, g) in grads {
            let p = self
                .entries
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            p.grad.add_assign(g);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.is_finite())
    }
}

enum Source<'a> {
    Mut(&'a mut ParamStore),
    Frozen(&'a ParamStore),
}

/// Hands out one graph variable per parameter for a single forward pass.
pub struct Binder<'a> {
    store: RefCell<Source<'a>>,
    vars: RefCell<HashMap<String, Var>>,
    train: bool,
}

impl<'a> Binder<'a> {
    /// Parameters become differentiable leaves; missing ones are created.
    pub fn train(store: &'a mut ParamStore) -> Self {
        Self {
            store: RefCell::new(Source::Mut(store)),
            vars: RefCell::new(HashMap::new()),
            train: true,
        }
    }

    /// Parameters become constants; missing ones are created.
    pub fn init(store: &'a mut ParamStore) -> Self {
        Self {
            store: RefCell::new(Source::Mut(store)),
            vars: RefCell::new(HashMap::new()),
            train: false,
        }
    }

    /// Parameters become constants; asking for a missing one panics.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store: RefCell::new(Source::Frozen(store)),
            vars: RefCell::new(HashMap::new()),
            train: false,
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Var {
        if let Some(v) = self.vars.borrow().get(name) {
            assert_eq!(v.shape(), shape, "parameter `{name}` reused with another shape");
            return v.clone();
        }
        let value = match &mut *self.store.borrow_mut() {
            Source::Mut(s) => s.get_or_init(name, shape, init).value.clone(),
            Source::Frozen(s) => {
                let p = s
                    .get(name)
                    .unwrap_or_else(|| panic!("parameter `{name}` missing from store"));
                assert_eq!(p.value.shape(), shape, "parameter `{name}` has another shape");
                p.value.clone()
            }
        };
        let var = if self.train {
            Var::leaf(value)
        } else {
            Var::constant(value)
        };
        self.vars.borrow_mut().insert(name.to_string(), var.clone());
        var
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_, 'a> {
        Scope {
            binder: self,
            prefix: prefix.to_string(),
        }
    }

    /// Gradients of every bound parameter that received one.
    pub fn grads(&self, g: &Gradients) -> Vec<(String, Tensor)> {
        let vars = self.vars.borrow();
        let mut out: Vec<_> = vars
            .iter()
            .filter_map(|(name, v)| g.get(v).map(|t| (name.clone(), t.clone())))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// The variable bound to `name`, if it was used.
    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.borrow().get(name).cloned()
    }
}

/// A name prefix within a [`Binder`], with helpers for the standard layers.
#[derive(Clone)]
pub struct Scope<'b, 'a> {
    binder: &'b Binder<'a>,
    prefix: String,
}

impl<'b, 'a> Scope<'b, 'a> {
    pub fn sub(&self, name: impl std::fmt::Display) -> Self {
        Self {
            binder: self.binder,
            prefix: format!("{}.{name}", self.prefix),
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn binder(&self) -> &'b Binder<'a> {
        self.binder
    }

    pub fn is_training(&self) -> bool {
        self.binder.train
    }

    pub fn param(&self, leaf: &str, shape: &[usize], init: Init) -> Var {
        self.binder.param(&self.name(leaf), shape, init)
    }

    /// Dense layer over the trailing dimension (`w`, optional `b`).
    pub fn linear(&self, x: &Var, cin: usize, cout: usize, bias: bool) -> Var {
        let w = self.param("w", &[cin, cout], Init::fan_in(cin));
        let b = bias.then(|| self.param("b", &[cout], Init::Zeros));
        x.linear(&w, b.as_ref())
    }

    /// Square-kernel convolution with bias.
    pub fn conv(&self, x: &Var, k: usize, cin: usize, cout: usize, stride: usize, pad: usize) -> Var {
        let w = self.param("w", &[k, k, cin, cout], Init::fan_in(k * k * cin));
        let b = self.param("b", &[cout], Init::Zeros);
        x.conv2d(&w, Some(&b), stride, pad)
    }

    pub fn layer_norm(&self, x: &Var, c: usize) -> Var {
        let g = self.param("g", &[c], Init::Ones);
        let b = self.param("b", &[c], Init::Zeros);
        x.layer_norm(&g, &b, 1e-5)
    }
}
