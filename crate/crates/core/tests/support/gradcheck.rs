//! Central finite-difference checks of every differentiable operation and
//! of a whole tiny model, in `f64`. Shared by the gradient tests and the
//! acceptance suite.
//!
//! Relative error is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`;
//! the floor keeps gradients that are zero up to rounding from dominating.

use std::sync::Arc;

use noah_core::backbone::{forward, Backbone, BackboneConfig, ModelConfig};
use noah_core::prompt::{ParamStore, PromptContext, PromptOptions};
use noah_core::search_space::SubnetConfig;
use noah_core::supernet::Subnet;
use noah_core::{Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const STEP: f64 = 1e-6;
pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from 0, so kinks (ReLU) are never straddled by the
/// finite-difference step.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>;

/// Scalar probe `Σ out ⊙ w` for a fixed random `w`, so every output
/// element contributes with a distinct weight.
fn probe_loss(g: &mut Graph<f64>, inputs: &[Tensor<f64>], build: &Build, weights: &Tensor<f64>) -> (Var, Vec<Var>) {
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
    let out = build(g, &vars).unwrap();
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    (g.sum(prod).unwrap(), vars)
}

fn check_op(inputs: Vec<Tensor<f64>>, build: &Build, rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let weights = random(g.shape(out), rng);

    let mut g = Graph::new();
    let (loss, vars) = probe_loss(&mut g, &inputs, build, &weights);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let eval = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let (loss, _) = probe_loss(&mut g, inputs, build, &weights);
        g.value(loss).data()[0]
    };
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Box<Build>)> {
    let r = |s: &[usize], rng: &mut ChaCha8Rng| random(s, rng);
    vec![
        ("add", vec![r(&[3, 4], rng), r(&[3, 4], rng)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.add(v[0], v[1]))),
        ("sub", vec![r(&[3, 4], rng), r(&[3, 4], rng)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.sub(v[0], v[1]))),
        ("mul", vec![r(&[3, 4], rng), r(&[3, 4], rng)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.mul(v[0], v[1]))),
        ("scale", vec![r(&[5], rng)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.scale(v[0], -1.7))),
        (
            "add_broadcast",
            vec![r(&[2, 3, 4], rng), r(&[4], rng)],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.add_broadcast(v[0], v[1])),
        ),
        ("matmul", vec![r(&[3, 4], rng), r(&[4, 2], rng)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.matmul(v[0], v[1]))),
        ("linear", vec![r(&[2, 3, 4], rng), r(&[4, 5], rng)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.linear(v[0], v[1]))),
        (
            "batch_matmul",
            vec![r(&[2, 3, 4], rng), r(&[2, 4, 5], rng)],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.batch_matmul(v[0], v[1], false)),
        ),
        (
            "batch_matmul_trans_b",
            vec![r(&[2, 3, 4], rng), r(&[2, 5, 4], rng)],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.batch_matmul(v[0], v[1], true)),
        ),
        ("transpose", vec![r(&[3, 4], rng)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.transpose(v[0]))),
        (
            "permute",
            vec![r(&[2, 3, 4, 2], rng)],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.permute(v[0], &[0, 2, 1, 3])),
        ),
        (
            "permute_last",
            vec![r(&[2, 3, 4], rng)],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.permute(v[0], &[2, 0, 1])),
        ),
        ("reshape", vec![r(&[2, 6], rng)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.reshape(v[0], &[3, 4]))),
        (
            "concat",
            vec![r(&[2, 1, 3], rng), r(&[2, 4, 3], rng)],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.concat(&[v[0], v[1]], 1)),
        ),
        (
            "slice",
            vec![r(&[2, 5, 3], rng)],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.slice(v[0], 1, 1, 3)),
        ),
        (
            "broadcast_batch",
            vec![r(&[2, 3], rng)],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.broadcast_batch(v[0], 3)),
        ),
        ("sum", vec![r(&[3, 4], rng)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.sum(v[0]))),
        ("mean", vec![r(&[3, 4], rng)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.mean(v[0]))),
        ("relu", vec![away_from_zero(&[4, 5], rng)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.relu(v[0]))),
        ("gelu", vec![r(&[4, 5], rng)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.gelu(v[0]))),
        ("softmax", vec![r(&[3, 5], rng)], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.softmax(v[0]))),
        (
            "layer_norm",
            vec![r(&[3, 6], rng), r(&[6], rng), r(&[6], rng)],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.layer_norm(v[0], v[1], v[2], 1e-6)),
        ),
        (
            "cross_entropy",
            vec![r(&[4, 3], rng)],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.cross_entropy(v[0], &[0, 2, 1, 2])),
        ),
    ]
}

/// Worst relative error of each op over all seeds, in case order.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, (name, inputs, build)) in op_cases(&mut rng).into_iter().enumerate() {
            let err = check_op(inputs, build.as_ref(), &mut rng);
            match worst.get_mut(i) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((name, err)),
            }
        }
    }
    worst
}

/// Worst relative error of a small attention-like composition over all seeds.
pub fn composed_error() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&[2, 3, 4], &mut rng), random(&[4, 4], &mut rng), random(&[4], &mut rng), random(&[4], &mut rng)];
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let h = g.linear(v[0], v[1])?;
            let h = g.layer_norm(h, v[2], v[3], 1e-6)?;
            let h = g.gelu(h)?;
            let a = g.batch_matmul(h, h, true)?;
            let a = g.softmax(a)?;
            let y = g.batch_matmul(a, h, false)?;
            let y = g.add(y, h)?;
            let y = g.reshape(y, &[6, 4])?;
            g.cross_entropy(y, &[0, 1, 2, 3, 0, 1])
        };
        worst = worst.max(check_op(inputs, &build, &mut rng));
    }
    worst
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            num_layers: 2,
            embed_dim: 16,
            num_heads: 2,
            mlp_hidden: 32,
            patch_size: 4,
            image_shape: [3, 8, 8],
        },
        num_classes: 3,
        prompt: PromptOptions {
            lora_scale: 0.7,
            adapter_skip: false,
        },
    }
}

fn all_modules() -> SubnetConfig {
    let text = "[adapter]\ndepth = 2\ndims = [2, 1]\n[lora]\ndepth = 1\ndims = [2, 0]\n[vpt]\ndepth = 2\ndims = [2, 3]\n";
    SubnetConfig::from_toml(text).unwrap()
}

struct ModelLoss {
    model: ModelConfig,
    config: SubnetConfig,
    patches: Tensor<f64>,
    labels: Vec<usize>,
}

impl ModelLoss {
    fn eval(&self, prompts: &ParamStore<f64>, backbone: &Backbone<f64>, g: &mut Graph<f64>) -> (Var, Vec<(String, Var)>) {
        let ctx = PromptContext::from_exact(&self.config, prompts, 16, 3).unwrap();
        let pass = forward(g, &self.model, backbone, true, &ctx, &self.patches).unwrap();
        let loss = g.cross_entropy(pass.logits, &self.labels).unwrap();
        (loss, pass.bindings.into_iter().map(|b| (b.name, b.var)).collect())
    }

    fn value(&self, prompts: &ParamStore<f64>, backbone: &Backbone<f64>) -> f64 {
        let mut g = Graph::new();
        let (loss, _) = self.eval(prompts, backbone, &mut g);
        g.value(loss).data()[0]
    }
}

pub struct ModelCheck {
    pub seed: u64,
    pub checked: usize,
    pub worst: f64,
    /// Binding names seen, to confirm every module type took part.
    pub names: Vec<String>,
}

/// End-to-end check of a two-layer model with every module type, gradients
/// flowing into prompts, head and (sampled) backbone tensors.
pub fn model_checks() -> Vec<ModelCheck> {
    let model = tiny_model();
    let mut out = Vec::new();
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::<f64>::init(model.backbone, &mut rng);
        let mut subnet = Subnet::fresh(model, all_modules(), Arc::new(backbone.clone()), &mut rng).unwrap();
        // Non-zero everywhere, so every path carries gradient.
        for t in subnet.params.values_mut() {
            let shape = t.shape().to_vec();
            *t = random(&shape, &mut rng).with_requires_grad(true);
        }
        let prompts = subnet.params.clone();
        let case = ModelLoss {
            model,
            config: all_modules(),
            patches: random(&[3, 4, 48], &mut rng),
            labels: vec![0, 2, 1],
        };

        let mut g = Graph::new();
        let (loss, bindings) = case.eval(&prompts, &backbone, &mut g);
        g.backward(loss).unwrap();
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        for (name, var) in &bindings {
            let analytic = g.grad(*var).unwrap().to_vec();
            let in_backbone = name.starts_with("backbone.");
            let numel = analytic.len();
            // Every prompt and head element; a random sample of backbone elements.
            let picks: Vec<usize> = if in_backbone && numel > 12 {
                (0..12).map(|_| rng.random_range(0..numel)).collect()
            } else {
                (0..numel).collect()
            };
            for j in picks {
                let at = |delta: f64| {
                    let (mut p, mut b) = (prompts.clone(), backbone.clone());
                    let store = if in_backbone { &mut b.params } else { &mut p };
                    store.get_mut(name).unwrap().data_mut()[j] += delta;
                    case.value(&p, &b)
                };
                let numeric = (at(STEP) - at(-STEP)) / (2.0 * STEP);
                worst = worst.max(rel_err(analytic[j], numeric));
                checked += 1;
            }
        }
        out.push(ModelCheck {
            seed,
            checked,
            worst,
            names: bindings.into_iter().map(|(n, _)| n).collect(),
        });
    }
    out
}
