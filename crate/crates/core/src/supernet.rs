//! Weight-entangled supernet, standalone subnets and backbone pretraining.

use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::backbone::{forward, Backbone, BackboneConfig, ForwardPass, ModelConfig};
use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::prompt::{bank_shapes, init_head, init_prompt_tensor, ParamStore, PromptContext, PromptOptions, HEAD_B, HEAD_W};
use crate::scalar::Scalar;
use crate::search_space::{count_params, ModuleKind, SearchSpaceSpec, SubnetConfig};
use crate::tensor::{Tensor, TensorError};
use crate::training::{train_loop, EpochRecord, OptimHyper, OptimizerKind, Trainable};

/// Hex SHA-256 over names, shapes and element bits of every tensor.
pub fn store_hash<T: Scalar>(store: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    for (name, t) in store {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// All prompt banks at maximal size plus the classifier head, over a
/// shared frozen backbone.
#[derive(Clone, Debug)]
pub struct Supernet<T> {
    pub model: ModelConfig,
    pub space: SearchSpaceSpec,
    pub backbone: Arc<Backbone<T>>,
    /// Banks and head, by name.
    pub params: ParamStore<T>,
}

fn check_backbone(model: &ModelConfig, backbone: &BackboneConfig) -> Result<()> {
    if &model.backbone != backbone {
        return Err(Error::Config("backbone weights do not match the model configuration".into()));
    }
    model.backbone.check().map_err(Error::Config)
}

impl<T: Scalar> Supernet<T> {
    pub fn new<R: Rng + ?Sized>(
        model: ModelConfig,
        space: SearchSpaceSpec,
        backbone: Arc<Backbone<T>>,
        rng: &mut R,
    ) -> Result<Self> {
        check_backbone(&model, &backbone.config)?;
        space.check()?;
        if space.dims != model.param_dims() {
            return Err(Error::Config("search space dimensions do not match the model".into()));
        }
        let d = model.backbone.embed_dim;
        let max = ModuleKind::ALL.map(|k| space.max_dim(k));
        let mut params: ParamStore<T> = bank_shapes(model.backbone.num_layers, d, max)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_prompt_tensor(&name, &shape, d, rng).with_requires_grad(true);
                (name, t)
            })
            .collect();
        params.extend(head_store(d, model.num_classes, rng));
        Ok(Self {
            model,
            space,
            backbone,
            params,
        })
    }

    /// Rebuilds a supernet from stored banks, checking they cover `space`.
    pub fn from_params(
        model: ModelConfig,
        space: SearchSpaceSpec,
        backbone: Arc<Backbone<T>>,
        params: ParamStore<T>,
    ) -> Result<Self> {
        check_backbone(&model, &backbone.config)?;
        space.check()?;
        let max = ModuleKind::ALL.map(|k| space.max_dim(k));
        let mut expected = bank_shapes(model.backbone.num_layers, model.backbone.embed_dim, max);
        expected.push((HEAD_W.into(), vec![model.backbone.embed_dim, model.num_classes]));
        expected.push((HEAD_B.into(), vec![model.num_classes]));
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("supernet weights lack {name}")))?;
            let (er, ec) = if shape.len() == 1 { (1, shape[0]) } else { (shape[0], shape[1]) };
            let (r, c) = t.matrix_dims();
            let fits = t.shape().len() == shape.len() && r >= er && c >= ec;
            if !fits {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, too small for the search space ({shape:?})",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            model,
            space,
            backbone,
            params,
        })
    }

    /// Prompt weights of `config`: top-left blocks of each bank.
    pub fn context(&self, config: &SubnetConfig) -> Result<PromptContext<T>, TensorError> {
        PromptContext::from_banks(config, &self.params, self.model.backbone.embed_dim, self.model.num_classes)
    }

    /// Copies exactly the slices `config` uses, plus the head.
    pub fn extract(&self, config: &SubnetConfig) -> Result<Subnet<T>> {
        let violations = self.space.structural_violations(config);
        if !violations.is_empty() {
            return Err(violations.into());
        }
        Subnet::slice_from(self.model, config.clone(), Arc::clone(&self.backbone), &self.params)
    }

    /// Trains by sampling a uniform subnet at every step.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        data: &PatchSet<T>,
        hyper: &OptimHyper,
        rng: &mut R,
        on_epoch: impl FnMut(&Self, &mut EpochRecord),
    ) -> Result<Vec<EpochRecord>> {
        let space = self.space.clone();
        Ok(train_loop(
            self,
            data,
            hyper,
            OptimizerKind::AdamW,
            rng,
            |r| space.sample_uniform(r),
            true,
            on_epoch,
        )?)
    }
}

impl<T: Scalar> Trainable<T> for Supernet<T> {
    fn forward(&self, g: &mut Graph<T>, config: &SubnetConfig, patches: &Tensor<T>) -> Result<ForwardPass, TensorError> {
        let ctx = self.context(config)?;
        forward(g, &self.model, &self.backbone, false, &ctx, patches)
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }
}

fn head_store<T: Scalar, R: Rng + ?Sized>(d: usize, classes: usize, rng: &mut R) -> ParamStore<T> {
    init_head(d, classes, rng)
        .into_iter()
        .map(|(k, v)| (k, v.with_requires_grad(true)))
        .collect()
}

/// One fixed architecture with exactly-sized prompt weights.
#[derive(Clone, Debug)]
pub struct Subnet<T> {
    pub model: ModelConfig,
    pub config: SubnetConfig,
    pub backbone: Arc<Backbone<T>>,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Subnet<T> {
    /// Newly initialized prompt weights and head for `config`.
    pub fn fresh<R: Rng + ?Sized>(
        model: ModelConfig,
        config: SubnetConfig,
        backbone: Arc<Backbone<T>>,
        rng: &mut R,
    ) -> Result<Self> {
        check_backbone(&model, &backbone.config)?;
        if config.num_layers() != model.backbone.num_layers {
            return Err(Error::Config(format!(
                "subnet has {} layers, backbone has {}",
                config.num_layers(),
                model.backbone.num_layers
            )));
        }
        let d = model.backbone.embed_dim;
        let head = head_store::<T, R>(d, model.num_classes, rng);
        let mut params = ParamStore::new();
        PromptContext::build(&config, d, model.num_classes, |name, rows, cols| {
            let t = match head.get(name) {
                Some(h) => h.clone(),
                None => {
                    let shape = if name.contains(".b_") { vec![cols] } else { vec![rows, cols] };
                    init_prompt_tensor(name, &shape, d, rng).with_requires_grad(true)
                }
            };
            params.insert(name.to_string(), t.clone());
            Ok(t)
        })?;
        Ok(Self {
            model,
            config,
            backbone,
            params,
        })
    }

    /// Top-left blocks of `banks` (supernet banks or exact subnet tensors).
    pub fn slice_from(
        model: ModelConfig,
        config: SubnetConfig,
        backbone: Arc<Backbone<T>>,
        banks: &ParamStore<T>,
    ) -> Result<Self> {
        check_backbone(&model, &backbone.config)?;
        let mut params = ParamStore::new();
        let (d, classes) = (model.backbone.embed_dim, model.num_classes);
        PromptContext::build(&config, d, classes, |name, rows, cols| {
            let bank = banks.get(name).ok_or_else(|| TensorError::InvalidShape {
                op: "slice",
                shape: vec![rows, cols],
                reason: format!("weights lack {name}"),
            })?;
            let t = bank.top_left(rows, cols)?;
            params.insert(name.to_string(), t.clone());
            Ok(t)
        })?;
        Ok(Self {
            model,
            config,
            backbone,
            params,
        })
    }

    pub fn from_params(model: ModelConfig, config: SubnetConfig, backbone: Arc<Backbone<T>>, params: ParamStore<T>) -> Result<Self> {
        check_backbone(&model, &backbone.config)?;
        PromptContext::from_exact(&config, &params, model.backbone.embed_dim, model.num_classes)?;
        Ok(Self {
            model,
            config,
            backbone,
            params,
        })
    }

    pub fn context(&self) -> Result<PromptContext<T>, TensorError> {
        PromptContext::from_exact(&self.config, &self.params, self.model.backbone.embed_dim, self.model.num_classes)
    }

    /// Trainable prompt scalars, head excluded.
    pub fn prompt_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| !k.starts_with("head."))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Trains the prompt weights and head of this fixed architecture.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        data: &PatchSet<T>,
        hyper: &OptimHyper,
        rng: &mut R,
        on_epoch: impl FnMut(&Self, &mut EpochRecord),
    ) -> Result<Vec<EpochRecord>> {
        let config = self.config.clone();
        Ok(train_loop(
            self,
            data,
            hyper,
            OptimizerKind::AdamW,
            rng,
            |_| config.clone(),
            false,
            on_epoch,
        )?)
    }

    pub fn evaluate(&self, data: &PatchSet<T>) -> Result<f64> {
        Ok(crate::training::evaluate(self, &self.config, data)?)
    }
}

impl<T: Scalar> Trainable<T> for Subnet<T> {
    fn forward(&self, g: &mut Graph<T>, config: &SubnetConfig, patches: &Tensor<T>) -> Result<ForwardPass, TensorError> {
        if config != &self.config {
            return Err(TensorError::InvalidShape {
                op: "subnet forward",
                shape: vec![],
                reason: format!("subnet is {} but {} was requested", self.config, config),
            });
        }
        forward(g, &self.model, &self.backbone, false, &self.context()?, patches)
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }
}

/// Backbone plus a temporary head, all trainable.
pub struct Pretrainer<T> {
    pub model: ModelConfig,
    pub backbone: Backbone<T>,
    pub head: ParamStore<T>,
}

impl<T: Scalar> Trainable<T> for Pretrainer<T> {
    fn forward(&self, g: &mut Graph<T>, config: &SubnetConfig, patches: &Tensor<T>) -> Result<ForwardPass, TensorError> {
        let ctx = PromptContext::from_exact(config, &self.head, self.model.backbone.embed_dim, self.model.num_classes)?;
        forward(g, &self.model, &self.backbone, true, &ctx, patches)
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        if name.starts_with("backbone.") {
            self.backbone.params.get_mut(name)
        } else {
            self.head.get_mut(name)
        }
    }
}

/// Trains a freshly initialized backbone and temporary head on `data`,
/// then discards the head and marks every backbone tensor frozen.
pub fn pretrain_backbone<T: Scalar, R: Rng + ?Sized>(
    config: BackboneConfig,
    num_classes: usize,
    data: &PatchSet<T>,
    hyper: &OptimHyper,
    rng: &mut R,
) -> Result<(Backbone<T>, Vec<EpochRecord>)> {
    config.check().map_err(Error::Config)?;
    let model = ModelConfig {
        backbone: config,
        num_classes,
        prompt: PromptOptions::default(),
    };
    let backbone = Backbone::init(config, rng);
    let head = head_store(config.embed_dim, num_classes, rng);
    let mut pre = Pretrainer { model, backbone, head };
    let empty = SubnetConfig::empty(config.num_layers);
    let log = train_loop(
        &mut pre,
        data,
        hyper,
        OptimizerKind::AdamW,
        rng,
        |_| empty.clone(),
        false,
        |_, _| {},
    )?;
    let mut backbone = pre.backbone;
    for t in backbone.params.values_mut() {
        t.set_requires_grad(false);
    }
    Ok((backbone, log))
}

/// Trainable prompt scalars of `config` under `model`, head excluded.
pub fn prompt_param_count(model: &ModelConfig, config: &SubnetConfig) -> usize {
    count_params(config, &model.param_dims())
}

/// Backbone dimensions `[L, D, heads, mlp, patch, C, H, W]`.
pub const META_BACKBONE: &str = "meta.backbone";
/// Backbone dimensions followed by `[classes, lora_scale, adapter_skip]`.
pub const META_MODEL: &str = "meta.model";
/// Gene encoding of the architecture a subnet checkpoint holds.
pub const META_SUBNET: &str = "meta.subnet";

fn backbone_meta(c: &BackboneConfig) -> Vec<f32> {
    [
        c.num_layers,
        c.embed_dim,
        c.num_heads,
        c.mlp_hidden,
        c.patch_size,
        c.image_shape[0],
        c.image_shape[1],
        c.image_shape[2],
    ]
    .map(|v| v as f32)
    .to_vec()
}

fn meta_usize(name: &str, v: f32) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("{name}: {v} is not a count")))
    }
}

fn meta_tensor<'a>(store: &'a ParamStore<f32>, name: &str, len: usize) -> Result<&'a [f32]> {
    let t = store
        .get(name)
        .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
    if t.shape() != [len] {
        return Err(Error::Config(format!("{name} has shape {:?}, expected [{len}]", t.shape())));
    }
    Ok(t.data())
}

fn parse_backbone_meta(name: &str, v: &[f32]) -> Result<BackboneConfig> {
    let u = |i: usize| meta_usize(name, v[i]);
    let config = BackboneConfig {
        num_layers: u(0)?,
        embed_dim: u(1)?,
        num_heads: u(2)?,
        mlp_hidden: u(3)?,
        patch_size: u(4)?,
        image_shape: [u(5)?, u(6)?, u(7)?],
    };
    config.check().map_err(Error::Config)?;
    Ok(config)
}

fn meta(name: &str, values: Vec<f32>) -> (String, Tensor<f32>) {
    let t = Tensor::new(vec![values.len()], values).expect("meta tensor");
    (name.to_string(), t)
}

fn model_meta(model: &ModelConfig) -> (String, Tensor<f32>) {
    let mut v = backbone_meta(&model.backbone);
    v.extend([
        model.num_classes as f32,
        model.prompt.lora_scale as f32,
        if model.prompt.adapter_skip { 1.0 } else { 0.0 },
    ]);
    meta(META_MODEL, v)
}

/// Model layout recorded in a supernet or subnet checkpoint.
pub fn read_model_meta(store: &ParamStore<f32>) -> Result<ModelConfig> {
    let v = meta_tensor(store, META_MODEL, 11)?;
    let backbone = parse_backbone_meta(META_MODEL, &v[..8])?;
    let num_classes = meta_usize(META_MODEL, v[8])?;
    if num_classes < 2 {
        return Err(Error::Config(format!("{META_MODEL}: need at least 2 classes, got {num_classes}")));
    }
    let adapter_skip = match v[10] {
        0.0 => false,
        1.0 => true,
        other => return Err(Error::Config(format!("{META_MODEL}: adapter_skip flag {other}"))),
    };
    Ok(ModelConfig {
        backbone,
        num_classes,
        prompt: PromptOptions {
            lora_scale: v[9] as f64,
            adapter_skip,
        },
    })
}

impl Backbone<f32> {
    /// Backbone tensors plus [`META_BACKBONE`].
    pub fn to_store(&self) -> ParamStore<f32> {
        let mut store = self.params.clone();
        store.extend([meta(META_BACKBONE, backbone_meta(&self.config))]);
        store
    }

    /// Accepts a backbone checkpoint or any checkpoint embedding one.
    pub fn from_store(store: &ParamStore<f32>) -> Result<Self> {
        let config = match store.get(META_BACKBONE) {
            Some(_) => parse_backbone_meta(META_BACKBONE, meta_tensor(store, META_BACKBONE, 8)?)?,
            None => read_model_meta(store)?.backbone,
        };
        let params: ParamStore<f32> = store
            .iter()
            .filter(|(k, _)| k.starts_with("backbone."))
            .map(|(k, t)| (k.clone(), t.clone().with_requires_grad(false)))
            .collect();
        Ok(Backbone::from_params(config, params)?)
    }
}

fn prompt_tensors(store: &ParamStore<f32>) -> ParamStore<f32> {
    store
        .iter()
        .filter(|(k, _)| !k.starts_with("backbone.") && !k.starts_with("meta."))
        .map(|(k, t)| (k.clone(), t.clone().with_requires_grad(true)))
        .collect()
}

fn full_store(model: &ModelConfig, backbone: &Backbone<f32>, params: &ParamStore<f32>) -> ParamStore<f32> {
    let mut store = backbone.params.clone();
    store.extend(params.iter().map(|(k, t)| (k.clone(), t.clone())));
    store.extend([model_meta(model)]);
    store
}

impl Supernet<f32> {
    /// Self-contained checkpoint: backbone, banks, head and [`META_MODEL`].
    pub fn to_store(&self) -> ParamStore<f32> {
        full_store(&self.model, &self.backbone, &self.params)
    }

    pub fn from_store(store: &ParamStore<f32>, space: SearchSpaceSpec) -> Result<Self> {
        let model = read_model_meta(store)?;
        if store.contains_key(META_SUBNET) {
            return Err(Error::Config("checkpoint holds a subnet, not a supernet".into()));
        }
        let backbone = Arc::new(Backbone::from_store(store)?);
        Supernet::from_params(model, space, backbone, prompt_tensors(store))
    }
}

impl Subnet<f32> {
    /// Self-contained checkpoint: backbone, prompt weights, head,
    /// [`META_MODEL`] and [`META_SUBNET`].
    pub fn to_store(&self) -> ParamStore<f32> {
        let mut store = full_store(&self.model, &self.backbone, &self.params);
        let genes = self.config.encode().into_iter().map(|g| g as f32).collect();
        store.extend([meta(META_SUBNET, genes)]);
        store
    }

    pub fn from_store(store: &ParamStore<f32>) -> Result<Self> {
        let model = read_model_meta(store)?;
        let t = store
            .get(META_SUBNET)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks {META_SUBNET}")))?;
        let genes = t
            .data()
            .iter()
            .map(|&v| meta_usize(META_SUBNET, v))
            .collect::<Result<Vec<_>>>()?;
        let config = SubnetConfig::decode(&genes, model.backbone.num_layers)?;
        let backbone = Arc::new(Backbone::from_store(store)?);
        Subnet::from_params(model, config, backbone, prompt_tensors(store))
    }
}

/// Subnet `config` out of any self-contained checkpoint. Supernet banks
/// are sliced; a subnet checkpoint must hold exactly `config`.
pub fn subnet_from_checkpoint(store: &ParamStore<f32>, config: &SubnetConfig) -> Result<Subnet<f32>> {
    if store.contains_key(META_SUBNET) {
        let subnet = Subnet::from_store(store)?;
        if &subnet.config != config {
            return Err(Error::Config(format!(
                "checkpoint holds subnet {} but {} was requested",
                subnet.config, config
            )));
        }
        return Ok(subnet);
    }
    let model = read_model_meta(store)?;
    if config.num_layers() != model.backbone.num_layers {
        return Err(Error::Config(format!(
            "subnet has {} layers, backbone has {}",
            config.num_layers(),
            model.backbone.num_layers
        )));
    }
    let backbone = Arc::new(Backbone::from_store(store)?);
    Subnet::slice_from(model, config.clone(), backbone, &prompt_tensors(store))
}
