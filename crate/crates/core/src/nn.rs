//! Named parameter storage and the per-forward session that binds parameters
//! onto a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::tensor::{BnMode, BnStats, Element, Graph, Result, Tensor, TensorError, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Trainable parameters plus non-trainable buffers (batch-norm running stats),
/// keyed by dotted names.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameter count under a dotted prefix.
    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// He-normal convolution weight, fan-out mode.
    pub fn init_conv<R: Rng>(&mut self, name: &str, cout: usize, cin: usize, k: usize, rng: &mut R) {
        let std = (2.0 / (cout * k * k) as f64).sqrt();
        self.insert(name, Tensor::rand_normal(&[cout, cin, k, k], std, rng));
    }

    /// `[I×O]` weight and `[O]` bias, uniform in ±1/√I, bias zero.
    pub fn init_linear<R: Rng>(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.insert(
            format!("{prefix}.weight"),
            Tensor::rand_uniform(&[fan_in, fan_out], -bound, bound, rng),
        );
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
    }

    pub fn init_bn(&mut self, prefix: &str, c: usize) {
        self.insert(format!("{prefix}.weight"), Tensor::ones(&[c]));
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[c]));
        self.buffers
            .insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
        self.buffers
            .insert(format!("{prefix}.running_var"), Tensor::ones(&[c]));
    }

    /// Fold batch statistics into running estimates with the given momentum.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BnStats<T>)], momentum: f64) {
        let m = T::of(momentum);
        let keep = T::ONE - m;
        for (prefix, stats) in updates {
            if let Some(rm) = self.buffers.get_mut(&format!("{prefix}.running_mean")) {
                for (r, &v) in rm.data_mut().iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * v;
                }
            }
            if let Some(rv) = self.buffers.get_mut(&format!("{prefix}.running_var")) {
                for (r, &v) in rv.data_mut().iter_mut().zip(&stats.var_unbiased) {
                    *r = keep * *r + m * v;
                }
            }
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the graph, which parameters are trainable, and the
/// batch-norm statistics gathered along the way.
pub struct Session<'a, T: Element> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    vars: BTreeMap<String, Var>,
    mode: Mode,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    bn_updates: Vec<(String, BnStats<T>)>,
}

impl<'a, T: Element> Session<'a, T> {
    /// Training session: every parameter is trainable, batch norm uses batch
    /// statistics.
    pub fn train(store: &'a ParamStore<T>) -> Self {
        Self::with_graph(store, Graph::new(), Mode::Train)
    }

    /// Inference session: no gradients, batch norm uses running statistics.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self::with_graph(store, Graph::inference(), Mode::Eval)
    }

    pub fn with_graph(store: &'a ParamStore<T>, graph: Graph<T>, mode: Mode) -> Self {
        Self {
            graph,
            store,
            vars: BTreeMap::new(),
            mode,
            trainable: Box::new(|_| true),
            bn_updates: Vec::new(),
        }
    }

    /// Restrict which parameters receive gradients.
    pub fn set_trainable(&mut self, f: impl Fn(&str) -> bool + 'a) {
        self.trainable = Box::new(f);
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// The graph node holding a named parameter, created on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name).ok_or_else(|| TensorError::Invalid {
            op: "param",
            detail: format!("missing parameter {name}"),
        })?;
        let v = self.graph.leaf(t.clone(), (self.trainable)(name));
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter nodes bound so far, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn take_bn_updates(&mut self) -> Vec<(String, BnStats<T>)> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(name)?;
        self.graph.conv2d(x, w, stride, pad)
    }

    /// Pointwise convolution plus per-channel bias.
    pub fn conv1x1_bias(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let y = self.conv(&format!("{prefix}.weight"), x, 1, 0)?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let c = self.graph.shape(b)[0];
        let b = self.graph.reshape(b, &[c, 1, 1])?;
        self.graph.add(y, b)
    }

    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.graph.linear(x, w, Some(b))
    }

    pub fn bn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.weight"))?;
        let beta = self.p(&format!("{prefix}.bias"))?;
        let eps = T::of(BN_EPS);
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.graph.batch_norm(x, gamma, beta, BnMode::Train { eps })?;
                if let Some(stats) = stats {
                    self.bn_updates.push((prefix.to_string(), stats));
                }
                Ok(y)
            }
            Mode::Eval => {
                let store = self.store;
                let missing = |what: &str| TensorError::Invalid {
                    op: "batch_norm",
                    detail: format!("missing {prefix}.{what}"),
                };
                let mean = store
                    .buffers
                    .get(&format!("{prefix}.running_mean"))
                    .ok_or_else(|| missing("running_mean"))?;
                let var = store
                    .buffers
                    .get(&format!("{prefix}.running_var"))
                    .ok_or_else(|| missing("running_var"))?;
                let (y, _) = self.graph.batch_norm(
                    x,
                    gamma,
                    beta,
                    BnMode::Eval {
                        mean: mean.data(),
                        var: var.data(),
                        eps,
                    },
                )?;
                Ok(y)
            }
        }
    }
}
