//! Adapter, LoRA and VPT prompt modules.
//!
//! Every trainable prompt tensor has a stable name such as
//! `adapter.L2.W_down` or `vpt.L0.P`. A supernet stores one *bank* per name,
//! sized for the largest dimension in the search space; a subnet of
//! dimension `r` uses the top-left block of each bank (the first `r` rows or
//! columns of the bottleneck axis). A standalone subnet stores exactly those
//! blocks under the same names, so both paths build the same
//! [`PromptContext`] and run identical arithmetic.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::search_space::{ModuleKind, SubnetConfig};
use crate::tensor::{Tensor, TensorError};

/// Named tensors, ordered by name.
pub type ParamStore<T> = BTreeMap<String, Tensor<T>>;

pub const HEAD_W: &str = "head.W";
pub const HEAD_B: &str = "head.b";

/// Which LoRA-adapted projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Proj {
    Query,
    Key,
}

impl Proj {
    fn tag(self) -> &'static str {
        match self {
            Proj::Query => "q",
            Proj::Key => "k",
        }
    }
}

pub fn adapter_names(layer: usize) -> [String; 4] {
    ["W_down", "b_down", "W_up", "b_up"].map(|p| format!("adapter.L{layer}.{p}"))
}

pub fn lora_names(layer: usize, proj: Proj) -> [String; 2] {
    ["W_down", "W_up"].map(|p| format!("lora.L{layer}.{}.{p}", proj.tag()))
}

pub fn vpt_name(layer: usize) -> String {
    format!("vpt.L{layer}.P")
}

/// Options that change how prompt modules attach to a block.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PromptOptions {
    /// Multiplier on the LoRA update `x·W_down·W_up`.
    pub lora_scale: f64,
    /// When false (default) the adapter output is added to the residual
    /// stream next to the MLP output: `x + mlp + adapter(mlp)`. When true the
    /// adapter wraps the MLP output serially: `x + (mlp + adapter(mlp))`.
    /// The two differ only in summation order.
    pub adapter_skip: bool,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            lora_scale: 1.0,
            adapter_skip: false,
        }
    }
}

/// Weights of one adapter: down projection, ReLU, up projection.
#[derive(Clone, Debug)]
pub struct AdapterWeights<T> {
    pub w_down: Tensor<T>,
    pub b_down: Tensor<T>,
    pub w_up: Tensor<T>,
    pub b_up: Tensor<T>,
}

/// Low-rank update `W_down·W_up` for a query or key projection.
#[derive(Clone, Debug)]
pub struct LoraWeights<T> {
    pub w_down: Tensor<T>,
    pub w_up: Tensor<T>,
}

/// What VPT does at the entrance of a block.
#[derive(Clone, Debug)]
pub enum VptSlot<T> {
    /// Beyond the VPT depth: tokens inserted earlier pass through unchanged.
    Keep,
    /// Drop the previous layer's prompt tokens and insert these `m×D` rows
    /// right after the class token.
    Inject(Tensor<T>),
    /// Within the depth but with zero tokens: previous prompts are dropped.
    Clear,
}

#[derive(Clone, Debug)]
pub struct LayerPrompts<T> {
    pub adapter: Option<AdapterWeights<T>>,
    pub lora_q: Option<LoraWeights<T>>,
    pub lora_k: Option<LoraWeights<T>>,
    pub vpt: VptSlot<T>,
}

impl<T> LayerPrompts<T> {
    fn empty() -> Self {
        Self {
            adapter: None,
            lora_q: None,
            lora_k: None,
            vpt: VptSlot::Keep,
        }
    }
}

/// Concrete prompt weights and classifier head of one subnet.
#[derive(Clone, Debug)]
pub struct PromptContext<T> {
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
    pub layers: Vec<LayerPrompts<T>>,
}

impl<T: Scalar> PromptContext<T> {
    /// Assembles a context for `config`, asking `fetch(name, rows, cols)`
    /// for each tensor. Vectors are requested with `rows == 1`.
    pub fn build(
        config: &SubnetConfig,
        embed_dim: usize,
        num_classes: usize,
        mut fetch: impl FnMut(&str, usize, usize) -> Result<Tensor<T>, TensorError>,
    ) -> Result<Self, TensorError> {
        let d = embed_dim;
        let mut layers = Vec::with_capacity(config.num_layers());
        for layer in 0..config.num_layers() {
            let mut lp = LayerPrompts::empty();
            let r = config.dim_at(ModuleKind::Adapter, layer);
            if r > 0 {
                let [wd, bd, wu, bu] = adapter_names(layer);
                lp.adapter = Some(AdapterWeights {
                    w_down: fetch(&wd, d, r)?,
                    b_down: fetch(&bd, 1, r)?,
                    w_up: fetch(&wu, r, d)?,
                    b_up: fetch(&bu, 1, d)?,
                });
            }
            let r = config.dim_at(ModuleKind::Lora, layer);
            if r > 0 {
                let mut lora = |proj| -> Result<_, TensorError> {
                    let [wd, wu] = lora_names(layer, proj);
                    Ok(LoraWeights {
                        w_down: fetch(&wd, d, r)?,
                        w_up: fetch(&wu, r, d)?,
                    })
                };
                lp.lora_q = Some(lora(Proj::Query)?);
                lp.lora_k = Some(lora(Proj::Key)?);
            }
            let genes = config.genes(ModuleKind::Vpt);
            lp.vpt = if layer >= genes.depth {
                VptSlot::Keep
            } else if genes.dims[layer] == 0 {
                VptSlot::Clear
            } else {
                VptSlot::Inject(fetch(&vpt_name(layer), genes.dims[layer], d)?)
            };
            layers.push(lp);
        }
        Ok(Self {
            head_w: fetch(HEAD_W, d, num_classes)?,
            head_b: fetch(HEAD_B, 1, num_classes)?,
            layers,
        })
    }

    /// Top-left blocks of the banks in `store`.
    pub fn from_banks(
        config: &SubnetConfig,
        store: &ParamStore<T>,
        embed_dim: usize,
        num_classes: usize,
    ) -> Result<Self, TensorError> {
        Self::build(config, embed_dim, num_classes, |name, rows, cols| {
            lookup(store, name)?.top_left(rows, cols)
        })
    }

    /// Exact-size tensors from `store`; shapes must match the config.
    pub fn from_exact(
        config: &SubnetConfig,
        store: &ParamStore<T>,
        embed_dim: usize,
        num_classes: usize,
    ) -> Result<Self, TensorError> {
        Self::build(config, embed_dim, num_classes, |name, rows, cols| {
            let t = lookup(store, name)?;
            if t.matrix_dims() != (rows, cols) {
                return Err(TensorError::InvalidShape {
                    op: "subnet weights",
                    shape: t.shape().to_vec(),
                    reason: format!("{name} should be {rows}x{cols}"),
                });
            }
            Ok(t.clone())
        })
    }
}

pub(crate) fn lookup<'a, T>(store: &'a ParamStore<T>, name: &str) -> Result<&'a Tensor<T>, TensorError> {
    store.get(name).ok_or_else(|| TensorError::InvalidShape {
        op: "parameter lookup",
        shape: vec![],
        reason: format!("missing tensor {name}"),
    })
}

/// Shapes of every bank in a supernet with the given maximum dimensions.
pub fn bank_shapes(num_layers: usize, embed_dim: usize, max_dims: [usize; 3]) -> Vec<(String, Vec<usize>)> {
    let d = embed_dim;
    let [ra, rl, m] = max_dims;
    let mut out = Vec::new();
    for layer in 0..num_layers {
        if ra > 0 {
            let [wd, bd, wu, bu] = adapter_names(layer);
            out.push((wd, vec![d, ra]));
            out.push((bd, vec![ra]));
            out.push((wu, vec![ra, d]));
            out.push((bu, vec![d]));
        }
        if rl > 0 {
            for proj in [Proj::Query, Proj::Key] {
                let [wd, wu] = lora_names(layer, proj);
                out.push((wd, vec![d, rl]));
                out.push((wu, vec![rl, d]));
            }
        }
        if m > 0 {
            out.push((vpt_name(layer), vec![m, d]));
        }
    }
    out
}

/// Initial value of a prompt tensor: down projections and VPT tokens
/// uniform in `±1/√D`, up projections and biases zero. Every module
/// therefore starts as an exact no-op except VPT.
pub fn init_prompt_tensor<T: Scalar, R: Rng + ?Sized>(name: &str, shape: &[usize], embed_dim: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (embed_dim as f64).sqrt();
    if name.ends_with("W_down") || name.ends_with(".P") {
        Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
    } else {
        Tensor::zeros(shape)
    }
}

/// Classifier head initialized uniformly in `±1/√D`, bias zero.
pub fn init_head<T: Scalar, R: Rng + ?Sized>(embed_dim: usize, num_classes: usize, rng: &mut R) -> ParamStore<T> {
    let bound = 1.0 / (embed_dim as f64).sqrt();
    let mut store = ParamStore::new();
    store.insert(
        HEAD_W.to_string(),
        Tensor::from_fn(&[embed_dim, num_classes], |_| T::lit(rng.random_range(-bound..bound))),
    );
    store.insert(HEAD_B.to_string(), Tensor::zeros(&[num_classes]));
    store
}

/// Records a trainable tensor on the graph and remembers its name.
pub(crate) fn bind<T: Scalar>(g: &mut Graph<T>, bindings: &mut Vec<Binding>, name: String, t: &Tensor<T>) -> Var {
    let v = g.leaf(t.clone().with_requires_grad(true));
    if g.requires_grad(v) {
        bindings.push(Binding { name, var: v });
    }
    v
}

/// A graph leaf standing for (a block of) the stored tensor `name`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Binding {
    pub name: String,
    pub var: Var,
}

/// Adapter applied to `m`: `relu(m·W_down + b_down)·W_up + b_up`.
pub(crate) fn adapter_forward<T: Scalar>(
    g: &mut Graph<T>,
    bindings: &mut Vec<Binding>,
    layer: usize,
    w: &AdapterWeights<T>,
    m: Var,
) -> Result<Var, TensorError> {
    let [nwd, nbd, nwu, nbu] = adapter_names(layer);
    let wd = bind(g, bindings, nwd, &w.w_down);
    let bd = bind(g, bindings, nbd, &w.b_down);
    let wu = bind(g, bindings, nwu, &w.w_up);
    let bu = bind(g, bindings, nbu, &w.b_up);
    let h = g.linear(m, wd)?;
    let h = g.add_broadcast(h, bd)?;
    let h = g.relu(h)?;
    let h = g.linear(h, wu)?;
    g.add_broadcast(h, bu)
}

/// Low-rank update `scale · (x·W_down)·W_up`.
pub(crate) fn lora_delta<T: Scalar>(
    g: &mut Graph<T>,
    bindings: &mut Vec<Binding>,
    layer: usize,
    proj: Proj,
    w: &LoraWeights<T>,
    x: Var,
    scale: T,
) -> Result<Var, TensorError> {
    let [nwd, nwu] = lora_names(layer, proj);
    let wd = bind(g, bindings, nwd, &w.w_down);
    let wu = bind(g, bindings, nwu, &w.w_up);
    let h = g.linear(x, wd)?;
    let h = g.linear(h, wu)?;
    if scale == T::one() {
        Ok(h)
    } else {
        g.scale(h, scale)
    }
}

/// Applies a VPT slot to tokens `x: [B, n, D]` laid out as
/// `[CLS, prompts(prev), patches]`. Returns the new tokens and prompt count.
pub(crate) fn vpt_apply<T: Scalar>(
    g: &mut Graph<T>,
    bindings: &mut Vec<Binding>,
    layer: usize,
    slot: &VptSlot<T>,
    x: Var,
    prev: usize,
) -> Result<(Var, usize), TensorError> {
    let new = match slot {
        VptSlot::Keep => return Ok((x, prev)),
        VptSlot::Clear if prev == 0 => return Ok((x, 0)),
        VptSlot::Clear => None,
        VptSlot::Inject(p) => Some(p),
    };
    let shape = g.shape(x).to_vec();
    let (batch, n) = (shape[0], shape[1]);
    let cls = g.slice(x, 1, 0, 1)?;
    let rest = g.slice(x, 1, 1 + prev, n - 1 - prev)?;
    match new {
        None => Ok((g.concat(&[cls, rest], 1)?, 0)),
        Some(p) => {
            let m = p.shape()[0];
            let pv = bind(g, bindings, vpt_name(layer), p);
            let pb = g.broadcast_batch(pv, batch)?;
            Ok((g.concat(&[cls, pb, rest], 1)?, m))
        }
    }
}
