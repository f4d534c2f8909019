//! Parameter storage, layers and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

/// `teacher ← decay·teacher + (1−decay)·student`, parameter by parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, decay: f32) {
    assert_eq!(teacher.len(), student.len(), "EMA between stores of different layout");
    for (t, s) in teacher.values.iter_mut().zip(&student.values) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction; moments are kept per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.values.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        let step_size = (lr * bc2.sqrt() / bc1) as f32;
        let eps_hat = (eps * bc2.sqrt()) as f32;
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.values[id.0].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                p[k] -= step_size * m[k] / (v[k].sqrt() + eps_hat);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with variance `2 / fan_in`.
    He,
    Zeros,
}

fn init_tensor(shape: [usize; 4], init: Init, rng: &mut impl Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::He => {
            let fan_in = shape[1] * shape[2] * shape[3];
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
            let data = (0..shape.iter().product()).map(|_| normal.sample(rng)).collect();
            Tensor::from_vec(shape, data).expect("init shape")
        }
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_tensor([cout, cin, kernel, kernel], init, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1]));
        Self { weight, bias, stride, pad: kernel / 2 }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Instance normalization with learned per-channel scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct InstanceNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([channels, 1, 1, 1], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([channels, 1, 1, 1]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        g.instance_norm(x, gm, bt)
    }
}
