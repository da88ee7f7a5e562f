//! Parameters, the per-forward binding context and the basic layers every
//! block is assembled from.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::BnConfig;
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::ops::norm::channel_stats;
use crate::ops::ConvSpec;
use crate::rng::Rng64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named tensors of a model. Trainable entries are weights; the rest are
/// buffers (running statistics, attention projections).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// `(name, tensor, trainable)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.names
            .iter()
            .zip(&self.values)
            .zip(&self.trainable)
            .map(|((n, v), &t)| (n.as_str(), v, t))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.iter().filter(|e| e.2).map(|e| e.1.numel()).sum()
    }

    /// Overwrites an entry by name, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::UnknownParameter(name.into()))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::InvalidArgument(format!(
                "{name}: stored shape {:?}, new value {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let m = u.momentum;
            for (r, b) in self.values[u.mean.0].data_mut().iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.values[u.var.0].data_mut().iter_mut().zip(&u.batch_var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
}

/// Registers parameters under a hierarchical dotted name.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng64,
    path: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng64) -> Self {
        Self { store, rng, path: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let path = if self.path.is_empty() { String::from(name) } else { format!("{}.{name}", self.path) };
        Builder { store: self.store, rng: self.rng, path }
    }

    fn full(&self, name: &str) -> String {
        if self.path.is_empty() {
            String::from(name)
        } else {
            format!("{}.{name}", self.path)
        }
    }

    pub fn rng(&mut self) -> &mut Rng64 {
        self.rng
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> ParamId {
        let n = self.full(name);
        self.store.insert(n, value, true)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        let n = self.full(name);
        self.store.insert(n, value, false)
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / crate::math::sqrt(fan_in as f64);
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound));
        self.param(name, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one batch-norm layer during a training forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    /// Unbiased estimate.
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

/// One forward pass: the tape, the parameters bound into it, and side
/// effects (running-stat updates) to apply once the step is done.
pub struct Ctx<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    mode: Mode,
    bn: BnConfig,
    bound: Vec<Option<Var>>,
    bn_updates: Vec<BnUpdate>,
    refresh: Option<Rng64>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, bn: BnConfig) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
            bn,
            bound: vec![None; store.len()],
            bn_updates: Vec::new(),
            refresh: None,
        }
    }

    /// Supplies the generator used when attention projections are resampled per pass.
    pub fn with_refresh_rng(mut self, rng: Rng64) -> Self {
        self.refresh = Some(rng);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub(crate) fn refresh_rng(&mut self) -> Option<&mut Rng64> {
        self.refresh.as_mut()
    }

    /// The graph node for a stored tensor, created on first use. Weights
    /// become gradient leaves, buffers become constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.store.is_trainable(id) { self.graph.leaf(t) } else { self.graph.constant(t) };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    /// Gradients for every trainable parameter used in this pass.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.store.trainable[i] {
                    return None;
                }
                grads.take(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        core::mem::take(&mut self.bn_updates)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Identity,
    Relu,
    Silu,
}

impl Act {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Act::Identity => x,
            Act::Relu => g.relu(x),
            Act::Silu => g.silu(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(b: &mut Builder<'_>, in_ch: usize, out_ch: usize, spec: ConvSpec, bias: bool) -> Self {
        let fan_in = in_ch / spec.groups * spec.kernel_h * spec.kernel_w;
        let weight = b.uniform_fan_in("weight", &[out_ch, in_ch / spec.groups, spec.kernel_h, spec.kernel_w], fan_in);
        let bias = bias.then(|| b.uniform_fan_in("bias", &[out_ch], fan_in));
        Self { weight, bias, spec }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.graph.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder<'_>, ch: usize) -> Self {
        Self {
            gamma: b.param("gamma", Tensor::ones(&[ch])),
            beta: b.param("beta", Tensor::zeros(&[ch])),
            running_mean: b.buffer("running_mean", Tensor::zeros(&[ch])),
            running_var: b.buffer("running_var", Tensor::ones(&[ch])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        let eps = ctx.bn.eps;
        match ctx.mode {
            Mode::Train => {
                let xv = ctx.graph.value(x);
                let (mean, mut var) = channel_stats(xv)?;
                let count = xv.numel() / xv.shape()[1];
                if count > 1 {
                    let corr = count as f64 / (count - 1) as f64;
                    var.iter_mut().for_each(|v| *v *= corr);
                }
                ctx.bn_updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean: mean,
                    batch_var: var,
                    momentum: ctx.bn.momentum,
                });
                ctx.graph.batch_norm(x, gamma, beta, eps)
            }
            Mode::Eval => {
                let (m, v) = (ctx.param(self.running_mean), ctx.param(self.running_var));
                ctx.graph.batch_norm_eval(x, gamma, beta, m, v, eps)
            }
        }
    }
}

/// Convolution without bias, batch normalisation, activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Act,
}

impl ConvBnAct {
    pub fn new(b: &mut Builder<'_>, in_ch: usize, out_ch: usize, spec: ConvSpec, act: Act) -> Self {
        let conv = Conv2d::new(&mut b.sub("conv"), in_ch, out_ch, spec, false);
        let bn = BatchNorm2d::new(&mut b.sub("bn"), out_ch);
        Self { conv, bn, act }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(self.act.apply(&mut ctx.graph, y))
    }
}
