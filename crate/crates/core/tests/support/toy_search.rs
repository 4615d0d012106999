//! A small search space whose every config can be enumerated, with a
//! deterministic fitness. Shared by the evolution tests and the acceptance
//! suite.

use noah_core::search_space::{ModuleGenes, ModuleKind, ParamDims, PerModule, SearchSpaceSpec, SubnetConfig};

pub const LAYERS: usize = 3;

pub fn toy_space() -> SearchSpaceSpec {
    SearchSpaceSpec {
        num_layers: LAYERS,
        depth_choices: (0..=LAYERS).collect(),
        dim_choices: PerModule::from_fn(|_| vec![1, 2]),
        budget: 300,
        budget_includes_head: false,
        dims: ParamDims {
            embed_dim: 8,
            attn_dim: 8,
            num_layers: LAYERS,
            head_params: 0,
        },
    }
}

/// Every structurally valid config of the toy space.
pub fn enumerate(space: &SearchSpaceSpec) -> Vec<SubnetConfig> {
    let mut per_module: Vec<ModuleGenes> = Vec::new();
    for &depth in &space.depth_choices {
        let choices = &space.dim_choices[ModuleKind::Adapter];
        let combos = choices.len().pow(depth as u32);
        for mut code in 0..combos {
            let mut dims = vec![0; LAYERS];
            for d in dims.iter_mut().take(depth) {
                *d = choices[code % choices.len()];
                code /= choices.len();
            }
            per_module.push(ModuleGenes { depth, dims });
        }
    }
    let mut out = Vec::new();
    for a in &per_module {
        for l in &per_module {
            for v in &per_module {
                let mut c = SubnetConfig::empty(LAYERS);
                c.modules = PerModule {
                    adapter: a.clone(),
                    lora: l.clone(),
                    vpt: v.clone(),
                };
                out.push(c);
            }
        }
    }
    out
}

fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Additive per-gene scores plus a bonus when adapter and LoRA depths agree.
pub fn toy_fitness(c: &SubnetConfig) -> f64 {
    let mut f = 0.0;
    for (k, kind) in ModuleKind::ALL.into_iter().enumerate() {
        let g = c.genes(kind);
        for layer in 0..g.depth {
            let h = mix((k * 100 + layer * 10 + g.dims[layer]) as u64);
            f += (h % 1000) as f64 / 1000.0 - 0.3;
        }
    }
    if c.genes(ModuleKind::Adapter).depth == c.genes(ModuleKind::Lora).depth {
        f += 0.5;
    }
    f
}

/// Fitness a config must reach to sit in the top 1% of feasible configs,
/// with the number of configs in that top slice and the feasible count.
pub fn top_percent_threshold(space: &SearchSpaceSpec) -> (f64, usize, usize) {
    let all = enumerate(space);
    assert!(all.len() <= 4096);
    let mut feasible: Vec<f64> = all.iter().filter(|c| space.within_budget(c)).map(toy_fitness).collect();
    assert!(feasible.len() < all.len(), "the budget should exclude some configs");
    feasible.sort_by(|a, b| b.total_cmp(a));
    let top = feasible.len().div_ceil(100);
    (feasible[top - 1], top, feasible.len())
}
