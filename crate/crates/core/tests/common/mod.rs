#![allow(dead_code)]

use std::sync::Arc;

use noah_core::backbone::{Backbone, BackboneConfig, ModelConfig};
use noah_core::prompt::PromptOptions;
use noah_core::search_space::{PerModule, SearchSpaceSpec, SubnetConfig};
use noah_core::supernet::Supernet;
use noah_core::training::Trainable;
use noah_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_model(classes: usize, adapter_skip: bool) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            num_layers: 3,
            embed_dim: 16,
            num_heads: 2,
            mlp_hidden: 32,
            patch_size: 4,
            image_shape: [3, 8, 8],
        },
        num_classes: classes,
        prompt: PromptOptions {
            lora_scale: 0.5,
            adapter_skip,
        },
    }
}

pub fn small_space(model: &ModelConfig) -> SearchSpaceSpec {
    let layers = model.backbone.num_layers;
    SearchSpaceSpec {
        num_layers: layers,
        depth_choices: (0..=layers).collect(),
        dim_choices: PerModule::from_fn(|_| vec![1, 3, 4]),
        budget: usize::MAX,
        budget_includes_head: false,
        dims: model.param_dims(),
    }
}

pub fn small_supernet(seed: u64, adapter_skip: bool) -> Supernet<f32> {
    let model = small_model(4, adapter_skip);
    let space = small_space(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = Arc::new(Backbone::init(model.backbone, &mut rng));
    Supernet::new(model, space, backbone, &mut rng).unwrap()
}

/// Fills every bank and the head with random values so no module is a no-op.
pub fn randomize_banks(sn: &mut Supernet<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in sn.params.values_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.5f32..0.5);
        }
    }
}

pub fn random_patches<R: Rng>(model: &ModelConfig, batch: usize, rng: &mut R) -> Tensor<f32> {
    let b = &model.backbone;
    let shape = [batch, b.num_patches(), b.patch_dim()];
    Tensor::from_fn(&shape, |_| rng.random_range(-2.0f32..2.0))
}

pub fn logits<N: Trainable<f32>>(net: &N, config: &SubnetConfig, patches: &Tensor<f32>) -> Tensor<f32> {
    let mut g = Graph::inference();
    let pass = net.forward(&mut g, config, patches).unwrap();
    g.value(pass.logits).clone()
}

pub fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
