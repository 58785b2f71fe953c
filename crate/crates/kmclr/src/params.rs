//! Learnable parameters, initialization, and the Adam optimizer.
//!
//! A [`ParameterSet`] owns every learnable tensor together with a same-shape
//! gradient accumulator. Initialization follows module granularity: the
//! multi-behavior module is Xavier-initialized, the knowledge module draws
//! from a normal distribution.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Error, Debug)]
pub enum ParamError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite gradient in tensor '{0}'")]
    NonFiniteGrad(String),
    #[error("non-finite value in tensor '{0}' after optimizer step")]
    NonFiniteValue(String),
}

/// Which training module a tensor belongs to. Drives per-module learning
/// rates and the regularizer scope of the active stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModuleTag {
    MultiBehavior,
    Knowledge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub module: ModuleTag,
    pub value: Tensor,
    pub grad: Tensor,
}

/// All learnable tensors of a model, addressable by stable name.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, module: ModuleTag, value: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name '{name}'"
        );
        let grad = Tensor::zeros(value.rows(), value.cols());
        let idx = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            module,
            value,
            grad,
        });
        self.by_name.insert(name.to_string(), idx);
        ParamId(idx)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn module(&self, id: ParamId) -> ModuleTag {
        self.params[id.0].module
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Sum of squared values over the given module(s); `None` means all.
    pub fn sq_norm(&self, module: Option<ModuleTag>) -> f64 {
        self.params
            .iter()
            .filter(|p| module.is_none_or(|m| p.module == m))
            .map(|p| p.value.sq_norm())
            .sum()
    }

    pub fn assert_values_finite(&self) -> Result<(), ParamError> {
        for p in &self.params {
            if p.value.first_non_finite().is_some() {
                return Err(ParamError::NonFiniteValue(p.name.clone()));
            }
        }
        Ok(())
    }
}

/// Xavier-uniform draw for a `rows x cols` tensor: U(-b, b) with
/// b = sqrt(6 / (rows + cols)).
pub fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..=bound);
    }
    t
}

/// N(0, std^2) draw via Box-Muller (keeps the stream layout independent of
/// rand_distr internals).
pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        *v = std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
    t
}

/// Dimensions of the full parameter inventory.
#[derive(Clone, Copy, Debug)]
pub struct ModelDims {
    pub num_users: usize,
    pub num_items: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub d: usize,
    pub layers: usize,
}

/// Standard deviation of the knowledge-module normal initializer.
pub const KG_INIT_STD: f64 = 0.1;

/// Builds the complete KMCLR parameter set.
///
/// Multi-behavior tensors are Xavier-initialized, knowledge tensors come
/// from N(0, 0.1^2); the PReLU slope starts at the conventional 0.25.
/// Deterministic under `rng`.
pub fn init_params(dims: &ModelDims, rng: &mut ChaCha8Rng) -> Result<ParameterSet, ParamError> {
    if dims.d == 0 {
        return Err(ParamError::Config("latent dimension d must be > 0".into()));
    }
    if dims.layers == 0 {
        return Err(ParamError::Config("propagation depth L must be >= 1".into()));
    }
    let (iu, jv, e, r, d, l) = (
        dims.num_users,
        dims.num_items,
        dims.num_entities,
        dims.num_relations,
        dims.d,
        dims.layers,
    );
    let mut p = ParameterSet::new();
    let mb = ModuleTag::MultiBehavior;
    let kg = ModuleTag::Knowledge;

    p.register("mul.user", mb, xavier(iu, d, rng));
    p.register("mul.item", mb, xavier(jv, d, rng));
    p.register("mul.w_u", mb, xavier(d, d, rng));
    p.register("mul.w_l", mb, xavier((l + 1) * d, d, rng));
    p.register("mul.prelu", mb, Tensor::scalar(0.25));

    p.register("kg.user", kg, normal(iu, d, KG_INIT_STD, rng));
    p.register("kg.att_w1", kg, normal(3 * d, 1, KG_INIT_STD, rng));
    p.register("kg.att_w2", kg, normal(d, d, KG_INIT_STD, rng));
    p.register("kg.att_b1", kg, normal(1, 1, KG_INIT_STD, rng));
    p.register("kg.att_b2", kg, normal(1, 1, KG_INIT_STD, rng));
    for view in ["kg1", "kg2"] {
        p.register(&format!("{view}.entity"), kg, normal(e, d, KG_INIT_STD, rng));
        p.register(&format!("{view}.relation"), kg, normal(r, d, KG_INIT_STD, rng));
        // per-relation projections M_r stacked as (R*d) x d row blocks
        p.register(&format!("{view}.proj"), kg, normal(r * d, d, KG_INIT_STD, rng));
    }
    p.register("kg2.diag", kg, normal(1, d, KG_INIT_STD, rng));
    Ok(p)
}

/// Adam with optional decoupled weight decay and a per-parameter learning
/// rate (0 freezes a tensor for the stage).
pub struct Adam {
    lr: Vec<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParameterSet, lr_for: impl Fn(&Param) -> f64, weight_decay: f64) -> Self {
        let lr = params.params.iter().map(lr_for).collect();
        let m = params
            .params
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        let v = params
            .params
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m,
            v,
        }
    }

    pub fn uniform(params: &ParameterSet, lr: f64, weight_decay: f64) -> Self {
        Self::new(params, |_| lr, weight_decay)
    }

    /// One update. Aborts on a non-finite gradient (naming the tensor),
    /// applies the moment update plus decoupled L2 decay, zeroes gradients,
    /// and verifies the updated values stay finite.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<(), ParamError> {
        for p in &params.params {
            if p.grad.first_non_finite().is_some() {
                return Err(ParamError::NonFiniteGrad(p.name.clone()));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.params.iter_mut().enumerate() {
            let lr = self.lr[i];
            if lr == 0.0 {
                p.grad.fill(0.0);
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                if self.weight_decay > 0.0 {
                    w[j] -= lr * 2.0 * self.weight_decay * w[j];
                }
            }
            p.grad.fill(0.0);
        }
        for p in &params.params {
            if p.value.first_non_finite().is_some() {
                return Err(ParamError::NonFiniteValue(p.name.clone()));
            }
        }
        Ok(())
    }
}
