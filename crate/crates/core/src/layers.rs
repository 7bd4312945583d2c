//! Parameterised building blocks and the per-pass forward context.

use std::collections::HashMap;

use aqs_tensor::{Conv2dOptions, ParamId, ParamKind, ParamStore, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are collected for update.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug)]
pub struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// One forward pass: the tape being recorded plus the parameters it reads.
pub struct Ctx<'s, T: Real = f32> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    bound: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate>,
}

impl<'s, T: Real> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self::with_tape(store, mode, Tape::new())
    }

    pub fn with_tape(store: &'s ParamStore<T>, mode: Mode, tape: Tape<T>) -> Self {
        // A shape-only pass has no batch statistics to normalise with.
        let mode = if tape.is_shape_only() { Mode::Eval } else { mode };
        Self { tape, store, mode, bound: HashMap::new(), bn_updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Binds a parameter on the tape (once per pass).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.bound.insert(id, v);
        v
    }

    /// Makes `id` read from `var` for the rest of this pass; used to feed
    /// parameters in as differentiated inputs.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound.insert(id, var);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Folds collected batch statistics into the running averages.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[BnUpdate], momentum: f64) {
    for u in updates {
        for (id, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
            for (r, &b) in store.value_mut(id).data_mut().iter_mut().zip(batch) {
                *r = T::from_f64_lossy((1.0 - momentum) * r.as_f64() + momentum * b);
            }
        }
    }
}

/// Deterministic parameter initialiser with hierarchical names.
pub struct Init<'a, T: Real = f32> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
    kind: ParamKind,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: Vec::new(), kind: ParamKind::Trainable }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.prefix.push(name.to_owned());
        let out = f(self);
        self.prefix.pop();
        out
    }

    /// Runs `f` with every new parameter created as frozen.
    pub fn frozen<R>(&mut self, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let prev = std::mem::replace(&mut self.kind, ParamKind::Frozen);
        let out = f(self);
        self.kind = prev;
        out
    }

    /// Reseeds the generator; used so one subtree's values do not depend on
    /// which other subtrees were built before it.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    pub fn add(&mut self, leaf: &str, value: Tensor<T>) -> Result<ParamId> {
        let name = self.full_name(leaf);
        Ok(self.store.add(name, self.kind, value)?)
    }

    pub fn add_buffer(&mut self, leaf: &str, value: Tensor<T>) -> Result<ParamId> {
        let name = self.full_name(leaf);
        Ok(self.store.add(name, ParamKind::Buffer, value)?)
    }

    pub fn normal(&mut self, leaf: &str, dims: &[usize], std: f64) -> Result<ParamId> {
        let t = Tensor::randn(dims.to_vec(), std, &mut self.rng);
        self.add(leaf, t)
    }

    pub fn zeros(&mut self, leaf: &str, dims: &[usize]) -> Result<ParamId> {
        self.add(leaf, Tensor::zeros(dims.to_vec()))
    }

    pub fn ones(&mut self, leaf: &str, dims: &[usize]) -> Result<ParamId> {
        self.add(leaf, Tensor::ones(dims.to_vec()))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: Conv2dOptions,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new<T: Real>(
        init: &mut Init<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        opts: Conv2dOptions,
        bias: bool,
    ) -> Result<Self> {
        init.scoped(name, |init| {
            let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
            let weight = init.normal("weight", &[cout, cin, kernel, kernel], std)?;
            let bias = if bias { Some(init.zeros("bias", &[cout])?) } else { None };
            Ok(Self { weight, bias, opts, in_channels: cin, out_channels: cout, kernel })
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        Ok(ctx.tape.conv2d(x, w, b, self.opts)?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, channels: usize, eps: f64) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                gamma: init.ones("weight", &[channels])?,
                beta: init.zeros("bias", &[channels])?,
                running_mean: init.add_buffer("running_mean", Tensor::zeros(vec![channels]))?,
                running_var: init.add_buffer("running_var", Tensor::ones(vec![channels]))?,
                eps,
            })
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, g, b, self.eps)?;
                ctx.bn_updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean: stats.mean.iter().map(|v| v.as_f64()).collect(),
                    batch_var: stats.var.iter().map(|v| v.as_f64()).collect(),
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store;
                let (m, v) = (store.value(self.running_mean).data(), store.value(self.running_var).data());
                Ok(ctx.tape.batch_norm_eval(x, g, b, m, v, self.eps)?)
            }
        }
    }
}

/// Convolution (no bias) → batch norm → optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, kernel: usize, opts: Conv2dOptions, eps: f64) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self { conv: Conv2d::new(init, "conv", cin, cout, kernel, opts, false)?, bn: BatchNorm2d::new(init, "bn", cout, eps)? })
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, relu: bool) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(if relu { ctx.tape.relu(y)? } else { y })
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, din: usize, dout: usize, std: f64) -> Result<Self> {
        init.scoped(name, |init| Ok(Self { weight: init.normal("weight", &[dout, din], std)?, bias: init.zeros("bias", &[dout])? }))
    }

    pub fn vars<T: Real>(&self, ctx: &mut Ctx<T>) -> (Var, Var) {
        (ctx.param(self.weight), ctx.param(self.bias))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (w, b) = self.vars(ctx);
        Ok(ctx.tape.linear(x, w, Some(b))?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, dim: usize) -> Result<Self> {
        init.scoped(name, |init| Ok(Self { gamma: init.ones("weight", &[dim])?, beta: init.zeros("bias", &[dim])? }))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        Ok(ctx.tape.layer_norm(x, g, b, 1e-6)?)
    }
}
