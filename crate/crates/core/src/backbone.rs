//! Pre-norm vision transformer with prompt-module hooks.
//!
//! Images are cut into non-overlapping `p×p` patches, linearly embedded,
//! prefixed with a class token and given learned positional embeddings.
//! Each block runs `x += MSA(LN(x))` then `x += MLP(LN(x))` with 4 heads of
//! scaled dot-product attention and a GELU MLP. The class token after a
//! final LayerNorm feeds a linear classifier head.
//!
//! Prompt modules attach as follows:
//! * VPT tokens replace the previous layer's prompt tokens at the block
//!   entrance and carry no positional embedding.
//! * LoRA adds `s·LN(x)·W_down·W_up` to the query and key projections.
//! * The adapter reads the MLP output and its result joins the residual
//!   stream (see [`PromptOptions::adapter_skip`]).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::prompt::{
    adapter_forward, bind, lookup, lora_delta, vpt_apply, Binding, ParamStore, PromptContext, PromptOptions, Proj,
};
use crate::scalar::Scalar;
use crate::search_space::ParamDims;
use crate::tensor::{Tensor, TensorError};

pub const LN_EPS: f64 = 1e-6;

/// Transformer dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub patch_size: usize,
    /// `[channels, height, width]`.
    pub image_shape: [usize; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            embed_dim: 64,
            num_heads: 4,
            mlp_hidden: 256,
            patch_size: 4,
            image_shape: [3, 16, 16],
        }
    }
}

impl BackboneConfig {
    pub fn check(&self) -> Result<(), String> {
        let [c, h, w] = self.image_shape;
        let p = self.patch_size;
        if [self.num_layers, self.embed_dim, self.num_heads, self.mlp_hidden, p, c, h, w].contains(&0) {
            return Err("backbone dimensions must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if h % p != 0 || w % p != 0 {
            return Err(format!("image {h}x{w} is not divisible into {p}x{p} patches"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let [_, h, w] = self.image_shape;
        (h / self.patch_size) * (w / self.patch_size)
    }

    /// Length of a flattened patch, `C·p·p`.
    pub fn patch_dim(&self) -> usize {
        self.image_shape[0] * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Names and shapes of every backbone tensor.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let mut out = vec![
            ("backbone.patch.W".to_string(), vec![self.patch_dim(), d]),
            ("backbone.patch.b".to_string(), vec![d]),
            ("backbone.cls".to_string(), vec![1, d]),
            ("backbone.pos".to_string(), vec![self.num_patches() + 1, d]),
        ];
        for i in 0..self.num_layers {
            let n = |s: &str| format!("backbone.L{i}.{s}");
            out.extend([
                (n("ln1.gamma"), vec![d]),
                (n("ln1.beta"), vec![d]),
                (n("attn.W_q"), vec![d, d]),
                (n("attn.b_q"), vec![d]),
                (n("attn.W_k"), vec![d, d]),
                (n("attn.b_k"), vec![d]),
                (n("attn.W_v"), vec![d, d]),
                (n("attn.b_v"), vec![d]),
                (n("attn.W_o"), vec![d, d]),
                (n("attn.b_o"), vec![d]),
                (n("ln2.gamma"), vec![d]),
                (n("ln2.beta"), vec![d]),
                (n("mlp.W1"), vec![d, self.mlp_hidden]),
                (n("mlp.b1"), vec![self.mlp_hidden]),
                (n("mlp.W2"), vec![self.mlp_hidden, d]),
                (n("mlp.b2"), vec![d]),
            ]);
        }
        out.push(("backbone.norm.gamma".to_string(), vec![d]));
        out.push(("backbone.norm.beta".to_string(), vec![d]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Backbone dimensions plus everything else that fixes the network layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    #[serde(default)]
    pub prompt: PromptOptions,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            num_classes: 8,
            prompt: PromptOptions::default(),
        }
    }
}

impl ModelConfig {
    pub fn check(&self) -> Result<(), String> {
        self.backbone.check()?;
        if self.num_classes < 2 {
            return Err(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !self.prompt.lora_scale.is_finite() {
            return Err("lora_scale must be finite".into());
        }
        Ok(())
    }

    pub fn param_dims(&self) -> ParamDims {
        let d = self.backbone.embed_dim;
        ParamDims {
            embed_dim: d,
            attn_dim: d,
            num_layers: self.backbone.num_layers,
            head_params: d * self.num_classes + self.num_classes,
        }
    }
}

/// Backbone tensors; frozen during prompt training.
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Backbone<T> {
    /// Xavier-uniform linear weights, zero biases, unit LayerNorm gains,
    /// class token and positional embeddings uniform in `±0.02·√3`.
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        for (name, shape) in config.tensor_shapes() {
            let t = if name.ends_with("gamma") {
                Tensor::full(&shape, T::one())
            } else if name.ends_with(".cls") || name.ends_with(".pos") {
                let b = 0.02 * 3f64.sqrt();
                Tensor::from_fn(&shape, |_| T::lit(rng.random_range(-b..b)))
            } else if shape.len() == 2 {
                let b = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::from_fn(&shape, |_| T::lit(rng.random_range(-b..b)))
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        Self { config, params }
    }

    /// Checks that `params` holds exactly the expected tensors.
    pub fn from_params(config: BackboneConfig, params: ParamStore<T>) -> Result<Self, TensorError> {
        for (name, shape) in config.tensor_shapes() {
            let t = lookup(&params, &name)?;
            if t.shape() != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "backbone weights",
                    left: shape,
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { config, params })
    }

    fn get(&self, name: &str) -> &Tensor<T> {
        self.params.get(name).unwrap_or_else(|| panic!("backbone tensor {name} missing"))
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone {
            config: self.config,
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Flattens one `C×H×W` image into `N×(C·p·p)` patch rows, patches in
/// row-major grid order, each patch ordered by channel, row, column.
pub fn patchify<T: Copy>(image: &[T], shape: [usize; 3], p: usize, out: &mut Vec<T>) {
    let [c, h, w] = shape;
    for gy in 0..h / p {
        for gx in 0..w / p {
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * h + gy * p + dy) * w + gx * p;
                    out.extend_from_slice(&image[row..row + p]);
                }
            }
        }
    }
}

/// Outputs of one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// `[B, classes]`.
    pub logits: Var,
    /// Trainable leaves recorded during the pass, by tensor name.
    pub bindings: Vec<Binding>,
    /// Sequence length seen by each block.
    pub tokens_per_layer: Vec<usize>,
}

/// Runs the network on `patches: [B, N, C·p·p]`.
///
/// Prompt tensors and the head are recorded as trainable leaves; backbone
/// tensors are constants unless `train_backbone` is set.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    model: &ModelConfig,
    backbone: &Backbone<T>,
    train_backbone: bool,
    ctx: &PromptContext<T>,
    patches: &Tensor<T>,
) -> Result<ForwardPass, TensorError> {
    let cfg = &backbone.config;
    let (d, heads, hd) = (cfg.embed_dim, cfg.num_heads, cfg.head_dim());
    let expected = [cfg.num_patches(), cfg.patch_dim()];
    if patches.shape().len() != 3 || patches.shape()[1..] != expected {
        return Err(TensorError::ShapeMismatch {
            op: "forward",
            left: patches.shape().to_vec(),
            right: expected.to_vec(),
        });
    }
    if ctx.layers.len() != cfg.num_layers {
        return Err(TensorError::InvalidShape {
            op: "forward",
            shape: vec![ctx.layers.len()],
            reason: format!("prompt context has wrong layer count, backbone has {}", cfg.num_layers),
        });
    }
    let batch = patches.shape()[0];
    let mut bindings = Vec::new();
    let w = |g: &mut Graph<T>, bindings: &mut Vec<Binding>, name: String| -> Var {
        let t = backbone.get(&name);
        if train_backbone {
            bind(g, bindings, name, t)
        } else {
            g.constant(t.clone())
        }
    };

    let x = g.constant(patches.clone());
    let pw = w(g, &mut bindings, "backbone.patch.W".into());
    let pb = w(g, &mut bindings, "backbone.patch.b".into());
    let x = g.linear(x, pw)?;
    let x = g.add_broadcast(x, pb)?;
    let cls = w(g, &mut bindings, "backbone.cls".into());
    let cls = g.broadcast_batch(cls, batch)?;
    let x = g.concat(&[cls, x], 1)?;
    let pos = w(g, &mut bindings, "backbone.pos".into());
    let mut x = g.add_broadcast(x, pos)?;

    let scale = T::lit(model.prompt.lora_scale);
    let attn_scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let eps = T::lit(LN_EPS);
    let mut prompts = 0;
    let mut tokens_per_layer = Vec::with_capacity(cfg.num_layers);
    for (i, lp) in ctx.layers.iter().enumerate() {
        let n = |s: &str| format!("backbone.L{i}.{s}");
        let (nx, np) = vpt_apply(g, &mut bindings, i, &lp.vpt, x, prompts)?;
        x = nx;
        prompts = np;
        let seq = g.shape(x)[1];
        tokens_per_layer.push(seq);

        // Attention.
        let (g1, b1) = (w(g, &mut bindings, n("ln1.gamma")), w(g, &mut bindings, n("ln1.beta")));
        let h = g.layer_norm(x, g1, b1, eps)?;
        let project = |g: &mut Graph<T>, bindings: &mut Vec<Binding>, which: &str, lora: Option<(Proj, _)>| {
            let wt = w(g, bindings, n(&format!("attn.W_{which}")));
            let bt = w(g, bindings, n(&format!("attn.b_{which}")));
            let y = g.linear(h, wt)?;
            let mut y = g.add_broadcast(y, bt)?;
            if let Some((proj, lw)) = lora {
                let delta = lora_delta(g, bindings, i, proj, lw, h, scale)?;
                y = g.add(y, delta)?;
            }
            Ok::<Var, TensorError>(y)
        };
        let q = project(g, &mut bindings, "q", lp.lora_q.as_ref().map(|l| (Proj::Query, l)))?;
        let k = project(g, &mut bindings, "k", lp.lora_k.as_ref().map(|l| (Proj::Key, l)))?;
        let v = project(g, &mut bindings, "v", None)?;
        let split = |g: &mut Graph<T>, t: Var| -> Result<Var, TensorError> {
            let t = g.reshape(t, &[batch, seq, heads, hd])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, &[batch * heads, seq, hd])
        };
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, attn_scale)?;
        let attn = g.softmax(scores)?;
        let ctxv = g.batch_matmul(attn, v, false)?;
        let ctxv = g.reshape(ctxv, &[batch, heads, seq, hd])?;
        let ctxv = g.permute(ctxv, &[0, 2, 1, 3])?;
        let ctxv = g.reshape(ctxv, &[batch, seq, d])?;
        let (wo, bo) = (w(g, &mut bindings, n("attn.W_o")), w(g, &mut bindings, n("attn.b_o")));
        let o = g.linear(ctxv, wo)?;
        let o = g.add_broadcast(o, bo)?;
        x = g.add(x, o)?;

        // MLP and adapter.
        let (g2, b2) = (w(g, &mut bindings, n("ln2.gamma")), w(g, &mut bindings, n("ln2.beta")));
        let h = g.layer_norm(x, g2, b2, eps)?;
        let (w1, bb1) = (w(g, &mut bindings, n("mlp.W1")), w(g, &mut bindings, n("mlp.b1")));
        let (w2, bb2) = (w(g, &mut bindings, n("mlp.W2")), w(g, &mut bindings, n("mlp.b2")));
        let m = g.linear(h, w1)?;
        let m = g.add_broadcast(m, bb1)?;
        let m = g.gelu(m)?;
        let m = g.linear(m, w2)?;
        let m = g.add_broadcast(m, bb2)?;
        x = match &lp.adapter {
            None => g.add(x, m)?,
            Some(aw) => {
                let a = adapter_forward(g, &mut bindings, i, aw, m)?;
                if model.prompt.adapter_skip {
                    let ma = g.add(m, a)?;
                    g.add(x, ma)?
                } else {
                    let xm = g.add(x, m)?;
                    g.add(xm, a)?
                }
            }
        };
    }

    let (ng, nb) = (
        w(g, &mut bindings, "backbone.norm.gamma".into()),
        w(g, &mut bindings, "backbone.norm.beta".into()),
    );
    let x = g.layer_norm(x, ng, nb, eps)?;
    let cls = g.slice(x, 1, 0, 1)?;
    let cls = g.reshape(cls, &[batch, d])?;
    let hw = bind(g, &mut bindings, crate::prompt::HEAD_W.into(), &ctx.head_w);
    let hb = bind(g, &mut bindings, crate::prompt::HEAD_B.into(), &ctx.head_b);
    let logits = g.linear(cls, hw)?;
    let logits = g.add_broadcast(logits, hb)?;
    Ok(ForwardPass {
        logits,
        bindings,
        tokens_per_layer,
    })
}
