//! Named parameter storage and the small layer wrappers built on it.

use std::collections::HashMap;

use rand::Rng;

use crate::dsm::SsmVars;
use crate::error::{Error, Result};
use crate::ssm::SsmParams;
use crate::tape::{ConvSpec, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != t.shape() {
            return Err(Error::shape(
                "set parameter",
                format!("{name}: expected {:?}, got {:?}", self.tensors[id.0].shape(), t.shape()),
            ));
        }
        self.tensors[id.0] = t;
        Ok(())
    }
}

/// Tape handles for every tensor of a [`ParamStore`], same order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles recorded elsewhere, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Initializes parameters under a name prefix.
pub struct Init<'a, T: Real, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Real, R: Rng> Init<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scoped<'b>(&'b mut self, name: &str) -> Init<'b, T, R> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Init { store: self.store, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn add(&mut self, name: &str, t: Tensor<T>) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.insert(full, t)
    }

    /// Uniform in `±1/sqrt(fan_in)` (Kaiming-uniform with `a = sqrt(5)`).
    pub fn fan_in_uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, self.rng)?;
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape)?)
    }

    pub fn ones(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.add(name, Tensor::ones(shape)?)
    }
}

/// 2D convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        let cin_g = cin / spec.groups;
        let weight = init.fan_in_uniform("weight", vec![cout, cin_g, k, k], cin_g * k * k)?;
        let bias = init.zeros("bias", vec![cout])?;
        Ok(Self { weight, bias, spec })
    }

    /// Depth-wise `k x k` convolution over `c` channels.
    pub fn depthwise<T: Real, R: Rng>(init: &mut Init<'_, T, R>, c: usize, k: usize) -> Result<Self> {
        Self::new(init, c, c, k, ConvSpec::same(k).with_groups(c))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.spec)
    }
}

/// Per-pixel linear map over the channel axis of `[B, C, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Pointwise {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, cin: usize, cout: usize) -> Result<Self> {
        let weight = init.fan_in_uniform("weight", vec![cout, cin], cin)?;
        let bias = init.zeros("bias", vec![cout])?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), Some(p.var(self.bias)), 1)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization over the channel axis of `[B, C, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, c: usize) -> Result<Self> {
        Ok(Self { gamma: init.ones("gamma", vec![c])?, beta: init.zeros("beta", vec![c])? })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), 1, T::lit(LAYER_NORM_EPS))
    }
}

/// Store ids of one direction's scan parameters.
#[derive(Clone, Copy, Debug)]
pub struct SsmIds {
    pub a_log: ParamId,
    pub d: ParamId,
    pub dt_weight: ParamId,
    pub dt_bias: ParamId,
    pub b_proj: ParamId,
    pub c_proj: ParamId,
}

impl SsmIds {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, dinner: usize, nstate: usize) -> Result<Self> {
        let p = SsmParams::<T>::init(dinner, nstate, init.rng)?;
        Ok(Self {
            a_log: init.add("a_log", p.a_log)?,
            d: init.add("d", p.d)?,
            dt_weight: init.add("dt_weight", p.dt_weight)?,
            dt_bias: init.add("dt_bias", p.dt_bias)?,
            b_proj: init.add("b_proj", p.b_proj)?,
            c_proj: init.add("c_proj", p.c_proj)?,
        })
    }

    pub fn vars(&self, p: &Bound) -> SsmVars {
        SsmVars {
            a_log: p.var(self.a_log),
            d: p.var(self.d),
            dt_weight: p.var(self.dt_weight),
            dt_bias: p.var(self.dt_bias),
            b_proj: p.var(self.b_proj),
            c_proj: p.var(self.c_proj),
        }
    }

    pub fn params<T: Real>(&self, store: &ParamStore<T>) -> SsmParams<T> {
        SsmParams {
            a_log: store.get(self.a_log).clone(),
            d: store.get(self.d).clone(),
            dt_weight: store.get(self.dt_weight).clone(),
            dt_bias: store.get(self.dt_bias).clone(),
            b_proj: store.get(self.b_proj).clone(),
            c_proj: store.get(self.c_proj).clone(),
        }
    }
}
