//! Architecture genes for the three prompt modules and the operators that
//! act on them.
//!
//! A [`SubnetConfig`] holds, for each module, a depth and one dimension per
//! backbone layer. Depth is zero-based: depth 3 installs the module in layers
//! 0, 1 and 2. Dimensions at layers at or beyond the depth are always 0, which
//! makes the encoding canonical.
//!
//! Depth 0 and per-layer dimension 0 are always valid (a module may vanish),
//! but the sampler and the mutation operator draw only from the configured
//! choice sets. Budget repair may shrink genes down to 0.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The three prompt modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Adapter,
    Lora,
    Vpt,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 3] = [ModuleKind::Adapter, ModuleKind::Lora, ModuleKind::Vpt];

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Adapter => "adapter",
            ModuleKind::Lora => "lora",
            ModuleKind::Vpt => "vpt",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModuleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adapter" => Ok(ModuleKind::Adapter),
            "lora" => Ok(ModuleKind::Lora),
            "vpt" => Ok(ModuleKind::Vpt),
            other => Err(format!("unknown module '{other}' (expected adapter, lora or vpt)")),
        }
    }
}

/// One value per prompt module.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerModule<T> {
    pub adapter: T,
    pub lora: T,
    pub vpt: T,
}

impl<T> PerModule<T> {
    pub fn from_fn(mut f: impl FnMut(ModuleKind) -> T) -> Self {
        Self {
            adapter: f(ModuleKind::Adapter),
            lora: f(ModuleKind::Lora),
            vpt: f(ModuleKind::Vpt),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ModuleKind, &T)> {
        ModuleKind::ALL.into_iter().map(move |k| (k, &self[k]))
    }

    pub fn map<U>(&self, mut f: impl FnMut(ModuleKind, &T) -> U) -> PerModule<U> {
        PerModule::from_fn(|k| f(k, &self[k]))
    }
}

impl<T> Index<ModuleKind> for PerModule<T> {
    type Output = T;

    fn index(&self, kind: ModuleKind) -> &T {
        match kind {
            ModuleKind::Adapter => &self.adapter,
            ModuleKind::Lora => &self.lora,
            ModuleKind::Vpt => &self.vpt,
        }
    }
}

impl<T> IndexMut<ModuleKind> for PerModule<T> {
    fn index_mut(&mut self, kind: ModuleKind) -> &mut T {
        match kind {
            ModuleKind::Adapter => &mut self.adapter,
            ModuleKind::Lora => &mut self.lora,
            ModuleKind::Vpt => &mut self.vpt,
        }
    }
}

/// Depth plus per-layer dimension of one module.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModuleGenes {
    pub depth: usize,
    pub dims: Vec<usize>,
}

impl ModuleGenes {
    pub fn absent(num_layers: usize) -> Self {
        Self {
            depth: 0,
            dims: vec![0; num_layers],
        }
    }

    /// Same dimension at every layer below `depth`.
    pub fn uniform(num_layers: usize, depth: usize, dim: usize) -> Self {
        Self {
            depth,
            dims: (0..num_layers).map(|i| if i < depth { dim } else { 0 }).collect(),
        }
    }

    /// Dimension active at `layer` (0 when the module is not installed there).
    pub fn dim_at(&self, layer: usize) -> usize {
        if layer < self.depth {
            self.dims.get(layer).copied().unwrap_or(0)
        } else {
            0
        }
    }
}

/// One architecture: the genes of all three modules.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubnetConfig {
    pub modules: PerModule<ModuleGenes>,
}

impl SubnetConfig {
    /// No prompt module anywhere; the frozen backbone plus head.
    pub fn empty(num_layers: usize) -> Self {
        Self {
            modules: PerModule::from_fn(|_| ModuleGenes::absent(num_layers)),
        }
    }

    /// A single module installed at `depth` layers with a fixed dimension.
    pub fn single(num_layers: usize, kind: ModuleKind, depth: usize, dim: usize) -> Self {
        let mut cfg = Self::empty(num_layers);
        cfg.modules[kind] = ModuleGenes::uniform(num_layers, depth, dim);
        cfg
    }

    pub fn num_layers(&self) -> usize {
        self.modules.adapter.dims.len()
    }

    pub fn genes(&self, kind: ModuleKind) -> &ModuleGenes {
        &self.modules[kind]
    }

    pub fn dim_at(&self, kind: ModuleKind, layer: usize) -> usize {
        self.modules[kind].dim_at(layer)
    }

    /// Flat gene vector: for each module, its depth followed by its dims.
    pub fn encode(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(3 * (self.num_layers() + 1));
        for (_, g) in self.modules.iter() {
            out.push(g.depth);
            out.extend_from_slice(&g.dims);
        }
        out
    }

    /// Inverse of [`SubnetConfig::encode`]. Rejects non-canonical vectors.
    pub fn decode(genes: &[usize], num_layers: usize) -> Result<Self, SearchError> {
        if genes.len() != 3 * (num_layers + 1) {
            return Err(SearchError::Decode(format!(
                "expected {} genes for {num_layers} layers, found {}",
                3 * (num_layers + 1),
                genes.len()
            )));
        }
        let mut chunks = genes.chunks(num_layers + 1);
        let mut next = || {
            let c = chunks.next().unwrap();
            ModuleGenes {
                depth: c[0],
                dims: c[1..].to_vec(),
            }
        };
        let cfg = Self {
            modules: PerModule {
                adapter: next(),
                lora: next(),
                vpt: next(),
            },
        };
        for (kind, g) in cfg.modules.iter() {
            if g.depth > num_layers {
                return Err(SearchError::Decode(format!("{kind} depth {} exceeds {num_layers} layers", g.depth)));
            }
            if let Some(layer) = (g.depth..num_layers).find(|&i| g.dims[i] != 0) {
                return Err(SearchError::Decode(format!("{kind} layer {layer} is beyond depth but non-zero")));
            }
        }
        Ok(cfg)
    }

    /// Compact one-line form, e.g. `A2[5,1] L0[] V4[10,10,5,1]`.
    pub fn key(&self) -> String {
        let part = |tag: char, g: &ModuleGenes| {
            let dims: Vec<String> = g.dims[..g.depth.min(g.dims.len())].iter().map(usize::to_string).collect();
            format!("{tag}{}[{}]", g.depth, dims.join(","))
        };
        format!(
            "{} {} {}",
            part('A', &self.modules.adapter),
            part('L', &self.modules.lora),
            part('V', &self.modules.vpt)
        )
    }

    /// Zeroes every dimension at or beyond the module depth.
    pub fn canonicalize(&mut self) {
        for kind in ModuleKind::ALL {
            let g = &mut self.modules[kind];
            let depth = g.depth;
            g.dims.iter_mut().skip(depth).for_each(|d| *d = 0);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("subnet config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, SearchError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SearchError::Decode(e.to_string()))?;
        let layers = cfg.num_layers();
        if cfg.modules.iter().any(|(_, g)| g.dims.len() != layers) {
            return Err(SearchError::Decode("all modules must list the same number of layers".into()));
        }
        Self::decode(&cfg.encode(), layers)
    }
}

impl fmt::Display for SubnetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Backbone dimensions that determine prompt-module parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamDims {
    /// Token embedding width `D`.
    pub embed_dim: usize,
    /// Output width of the fused query/key projections (`d` summed over heads).
    pub attn_dim: usize,
    pub num_layers: usize,
    /// Trainable scalars in the classifier head.
    pub head_params: usize,
}

impl ParamDims {
    pub fn adapter_layer(&self, r: usize) -> usize {
        if r == 0 {
            return 0;
        }
        let d = self.embed_dim;
        d * r + r + r * d + d
    }

    pub fn lora_layer(&self, r: usize) -> usize {
        2 * (self.embed_dim * r + r * self.attn_dim)
    }

    pub fn vpt_layer(&self, m: usize) -> usize {
        m * self.embed_dim
    }

    pub fn module_layer(&self, kind: ModuleKind, dim: usize) -> usize {
        match kind {
            ModuleKind::Adapter => self.adapter_layer(dim),
            ModuleKind::Lora => self.lora_layer(dim),
            ModuleKind::Vpt => self.vpt_layer(dim),
        }
    }
}

/// Exact number of trainable prompt scalars in `config`, head excluded.
pub fn count_params(config: &SubnetConfig, dims: &ParamDims) -> usize {
    ModuleKind::ALL
        .iter()
        .map(|&kind| {
            (0..config.num_layers())
                .map(|layer| dims.module_layer(kind, config.dim_at(kind, layer)))
                .sum::<usize>()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error("invalid search space: {0}")]
    InvalidSpec(String),
    #[error("cannot decode subnet config: {0}")]
    Decode(String),
    #[error("budget of {budget} parameters is infeasible: the smallest configuration needs {minimum}")]
    InfeasibleBudget { budget: usize, minimum: usize },
    #[error("invalid subnet config: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

/// One reason a configuration is not acceptable.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("{module}: expected {expected} layers, found {found}")]
    WrongLength { module: ModuleKind, expected: usize, found: usize },
    #[error("{module}: depth {depth} not in choice set")]
    DepthNotAllowed { module: ModuleKind, depth: usize },
    #[error("{module}: dim {dim} at layer {layer} not in choice set")]
    DimNotAllowed { module: ModuleKind, layer: usize, dim: usize },
    #[error("{module}: non-canonical, dim {dim} at layer {layer} is beyond depth")]
    NonCanonical { module: ModuleKind, layer: usize, dim: usize },
    #[error("over budget: {params} parameters exceed {budget}")]
    OverBudget { params: usize, budget: usize },
}

/// How mutation probability is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MutationScope {
    /// Every gene is resampled independently with probability `p`.
    #[default]
    Gene,
    /// With probability `p` the candidate mutates; one active gene is resampled.
    Candidate,
}

impl std::str::FromStr for MutationScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gene" => Ok(Self::Gene),
            "candidate" => Ok(Self::Candidate),
            other => Err(format!("unknown mutation scope '{other}' (expected gene or candidate)")),
        }
    }
}

/// Retries before budget rejection sampling falls back to shrinking.
pub const BUDGET_RETRIES: usize = 100;

/// Choice sets, layer count and parameter budget of a search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpaceSpec {
    pub num_layers: usize,
    pub depth_choices: Vec<usize>,
    pub dim_choices: PerModule<Vec<usize>>,
    /// Maximum trainable parameters of a final subnet.
    pub budget: usize,
    pub budget_includes_head: bool,
    pub dims: ParamDims,
}

fn pick<R: Rng + ?Sized>(choices: &[usize], rng: &mut R) -> usize {
    choices[rng.random_range(0..choices.len())]
}

impl SearchSpaceSpec {
    pub fn check(&self) -> Result<(), SearchError> {
        let sorted_unique = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if self.num_layers == 0 || self.dims.num_layers != self.num_layers {
            return Err(SearchError::InvalidSpec("layer count must be positive and match the backbone".into()));
        }
        if self.depth_choices.is_empty() || !sorted_unique(&self.depth_choices) {
            return Err(SearchError::InvalidSpec("depth choices must be non-empty, ascending and unique".into()));
        }
        if self.max_depth() > self.num_layers {
            return Err(SearchError::InvalidSpec(format!(
                "depth choice {} exceeds {} layers",
                self.max_depth(),
                self.num_layers
            )));
        }
        for (kind, dims) in self.dim_choices.iter() {
            if dims.is_empty() || !sorted_unique(dims) || *dims.last().unwrap() == 0 {
                return Err(SearchError::InvalidSpec(format!(
                    "{kind} dim choices must be ascending, unique and contain a positive value"
                )));
            }
        }
        Ok(())
    }

    pub fn max_depth(&self) -> usize {
        *self.depth_choices.last().unwrap_or(&0)
    }

    /// Largest dimension of a module: the size of its entangled weight bank.
    pub fn max_dim(&self, kind: ModuleKind) -> usize {
        *self.dim_choices[kind].last().unwrap_or(&0)
    }

    /// Trainable parameters counted against the budget.
    pub fn budgeted_params(&self, config: &SubnetConfig) -> usize {
        count_params(config, &self.dims) + if self.budget_includes_head { self.dims.head_params } else { 0 }
    }

    pub fn within_budget(&self, config: &SubnetConfig) -> bool {
        self.budgeted_params(config) <= self.budget
    }

    /// Depths and dims drawn uniformly from the choice sets.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> SubnetConfig {
        let mut cfg = SubnetConfig::empty(self.num_layers);
        for kind in ModuleKind::ALL {
            let depth = pick(&self.depth_choices, rng);
            let g = &mut cfg.modules[kind];
            g.depth = depth;
            for layer in 0..depth {
                g.dims[layer] = pick(&self.dim_choices[kind], rng);
            }
        }
        cfg
    }

    /// Checks choice-set membership, canonical form and the budget.
    pub fn validate(&self, config: &SubnetConfig) -> Result<(), Vec<Violation>> {
        let mut violations = self.structural_violations(config);
        if violations.is_empty() {
            let params = self.budgeted_params(config);
            if params > self.budget {
                violations.push(Violation::OverBudget {
                    params,
                    budget: self.budget,
                });
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    /// All violations except the budget.
    pub fn structural_violations(&self, config: &SubnetConfig) -> Vec<Violation> {
        let mut out = Vec::new();
        for (kind, g) in config.modules.iter() {
            if g.dims.len() != self.num_layers {
                out.push(Violation::WrongLength {
                    module: kind,
                    expected: self.num_layers,
                    found: g.dims.len(),
                });
                continue;
            }
            if g.depth != 0 && !self.depth_choices.contains(&g.depth) {
                out.push(Violation::DepthNotAllowed { module: kind, depth: g.depth });
            }
            for (layer, &dim) in g.dims.iter().enumerate() {
                if layer >= g.depth {
                    if dim != 0 {
                        out.push(Violation::NonCanonical { module: kind, layer, dim });
                    }
                } else if dim != 0 && !self.dim_choices[kind].contains(&dim) {
                    out.push(Violation::DimNotAllowed { module: kind, layer, dim });
                }
            }
        }
        out
    }

    /// Uniform per-gene crossover.
    pub fn crossover<R: Rng + ?Sized>(&self, a: &SubnetConfig, b: &SubnetConfig, rng: &mut R) -> SubnetConfig {
        self.crossover_with(a, b, 0.5, rng)
    }

    /// Each gene comes from `b` with probability `mix`, otherwise from `a`.
    ///
    /// Dims are inherited per layer from the chosen parent when that parent
    /// has the module installed there; otherwise from the other parent; when
    /// neither does (child deeper than both), the dim is resampled.
    pub fn crossover_with<R: Rng + ?Sized>(
        &self,
        a: &SubnetConfig,
        b: &SubnetConfig,
        mix: f64,
        rng: &mut R,
    ) -> SubnetConfig {
        let mut child = SubnetConfig::empty(self.num_layers);
        for kind in ModuleKind::ALL {
            let (ga, gb) = (&a.modules[kind], &b.modules[kind]);
            let depth = if rng.random_bool(mix) { gb.depth } else { ga.depth };
            let mut dims = vec![0; self.num_layers];
            for (layer, slot) in dims.iter_mut().enumerate() {
                let from_b = rng.random_bool(mix);
                if layer >= depth {
                    continue;
                }
                let (donor, other) = if from_b { (gb, ga) } else { (ga, gb) };
                *slot = if layer < donor.depth {
                    donor.dims[layer]
                } else if layer < other.depth {
                    other.dims[layer]
                } else {
                    pick(&self.dim_choices[kind], rng)
                };
            }
            child.modules[kind] = ModuleGenes { depth, dims };
        }
        child
    }

    /// Resamples genes from their choice sets.
    pub fn mutate<R: Rng + ?Sized>(
        &self,
        parent: &SubnetConfig,
        p: f64,
        scope: MutationScope,
        rng: &mut R,
    ) -> SubnetConfig {
        let mut child = parent.clone();
        match scope {
            MutationScope::Gene => {
                for kind in ModuleKind::ALL {
                    let choices = &self.dim_choices[kind];
                    let g = &mut child.modules[kind];
                    let old_depth = g.depth;
                    if rng.random_bool(p) {
                        g.depth = pick(&self.depth_choices, rng);
                    }
                    for layer in 0..self.num_layers {
                        let resample = rng.random_bool(p);
                        if layer >= g.depth {
                            g.dims[layer] = 0;
                        } else if layer >= old_depth || resample {
                            // Newly installed layers need a dim regardless.
                            g.dims[layer] = pick(choices, rng);
                        }
                    }
                }
            }
            MutationScope::Candidate => {
                if rng.random_bool(p) {
                    let kind = ModuleKind::ALL[rng.random_range(0..3)];
                    let choices = &self.dim_choices[kind];
                    let g = &mut child.modules[kind];
                    let slot = rng.random_range(0..=g.depth);
                    if slot == g.depth {
                        let old_depth = g.depth;
                        g.depth = pick(&self.depth_choices, rng);
                        for layer in 0..self.num_layers {
                            if layer >= g.depth {
                                g.dims[layer] = 0;
                            } else if layer >= old_depth {
                                g.dims[layer] = pick(choices, rng);
                            }
                        }
                    } else {
                        g.dims[slot] = pick(choices, rng);
                    }
                }
            }
        }
        child
    }

    /// Smallest possible budgeted parameter count (every module absent).
    pub fn minimum_params(&self) -> usize {
        self.budgeted_params(&SubnetConfig::empty(self.num_layers))
    }

    pub fn ensure_feasible(&self) -> Result<(), SearchError> {
        let minimum = self.minimum_params();
        if minimum > self.budget {
            Err(SearchError::InfeasibleBudget {
                budget: self.budget,
                minimum,
            })
        } else {
            Ok(())
        }
    }

    /// Shrinks `config` until it fits the budget.
    ///
    /// Each step lowers the largest active dim to the next smaller choice
    /// (or to 0 below the smallest); ties go to the deepest layer, then to
    /// the later module. Trailing zero layers are trimmed from the depth
    /// down to the nearest allowed depth.
    pub fn shrink_to_budget(&self, config: &SubnetConfig) -> Result<SubnetConfig, SearchError> {
        self.ensure_feasible()?;
        let mut cfg = config.clone();
        while !self.within_budget(&cfg) {
            let mut best: Option<(usize, usize, ModuleKind)> = None;
            for kind in ModuleKind::ALL {
                for layer in 0..cfg.modules[kind].depth {
                    let dim = cfg.modules[kind].dims[layer];
                    if dim > 0 && best.is_none_or(|(d, _, _)| dim >= d) {
                        best = Some((dim, layer, kind));
                    }
                }
            }
            let Some((dim, layer, kind)) = best else { break };
            let lower = self.dim_choices[kind].iter().rev().find(|&&c| c < dim).copied().unwrap_or(0);
            cfg.modules[kind].dims[layer] = lower;
            self.trim_depth(&mut cfg.modules[kind]);
        }
        Ok(cfg)
    }

    fn trim_depth(&self, g: &mut ModuleGenes) {
        while g.depth > 0 && g.dims[g.depth - 1] == 0 {
            let shallower = self
                .depth_choices
                .iter()
                .rev()
                .find(|&&d| d < g.depth)
                .copied()
                .unwrap_or(0);
            if g.dims[shallower..g.depth].iter().any(|&d| d != 0) {
                break;
            }
            g.depth = shallower;
        }
    }

    /// Rejection sampling against the budget, falling back to
    /// [`SearchSpaceSpec::shrink_to_budget`] after [`BUDGET_RETRIES`] draws.
    pub fn sample_within_budget<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SubnetConfig, SearchError> {
        self.ensure_feasible()?;
        let mut last = None;
        for _ in 0..BUDGET_RETRIES {
            let cfg = self.sample_uniform(rng);
            if self.within_budget(&cfg) {
                return Ok(cfg);
            }
            last = Some(cfg);
        }
        self.shrink_to_budget(&last.expect("at least one draw"))
    }

    /// Same as [`SearchSpaceSpec::sample_within_budget`] for an arbitrary
    /// candidate generator.
    pub fn retry_within_budget<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        mut produce: impl FnMut(&mut R) -> SubnetConfig,
    ) -> Result<SubnetConfig, SearchError> {
        self.ensure_feasible()?;
        let mut last = None;
        for _ in 0..BUDGET_RETRIES {
            let cfg = produce(rng);
            if self.within_budget(&cfg) {
                return Ok(cfg);
            }
            last = Some(cfg);
        }
        self.shrink_to_budget(&last.expect("at least one draw"))
    }

    /// Largest uniform dim of a single module installed at every layer
    /// that fits the budget; used for fixed-module baselines.
    pub fn matched_baseline(&self, kind: ModuleKind) -> Option<SubnetConfig> {
        let depth = self.max_depth();
        self.dim_choices[kind]
            .iter()
            .rev()
            .filter(|&&d| d > 0)
            .map(|&d| SubnetConfig::single(self.num_layers, kind, depth, d))
            .find(|cfg| self.within_budget(cfg))
    }
}
