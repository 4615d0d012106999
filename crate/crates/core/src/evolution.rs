//! Budget-constrained evolutionary search over [`SubnetConfig`]s.
//!
//! Generation 0 draws `population` budget-feasible configs uniformly. Every
//! later generation ranks all configs evaluated so far, keeps the top
//! `parents`, and produces crossover children, mutants and fresh samples.
//! Fitness is cached by gene encoding, so a config is scored once no matter
//! how often it reappears.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::search_space::{ModuleKind, MutationScope, PerModule, SearchError, SearchSpaceSpec, SubnetConfig};
use crate::supernet::Supernet;
use crate::training::evaluate;

/// Scores a candidate; higher is better. Must be deterministic.
pub trait Fitness: Sync {
    fn fitness(&self, config: &SubnetConfig) -> Result<f64>;
}

impl<F: Fn(&SubnetConfig) -> f64 + Sync> Fitness for F {
    fn fitness(&self, config: &SubnetConfig) -> Result<f64> {
        Ok(self(config))
    }
}

/// Validation accuracy of the subnet sliced out of a trained supernet.
pub struct InheritedAccuracy<'a, T> {
    pub supernet: &'a Supernet<T>,
    pub data: &'a PatchSet<T>,
}

impl<T: Scalar> Fitness for InheritedAccuracy<'_, T> {
    fn fitness(&self, config: &SubnetConfig) -> Result<f64> {
        self.supernet.space.validate(config)?;
        Ok(evaluate(self.supernet, config, self.data)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionSchedule {
    pub generations: usize,
    /// Size of generation 0.
    pub population: usize,
    /// Number of top configs bred from.
    pub parents: usize,
    pub crossover_children: usize,
    pub mutants: usize,
    pub random_samples: usize,
    pub mutation_prob: f64,
    /// Per-gene probability that a crossover child takes the second parent's gene.
    pub crossover_prob: f64,
    pub mutation_scope: MutationScope,
}

impl Default for EvolutionSchedule {
    fn default() -> Self {
        Self {
            generations: 5,
            population: 50,
            parents: 10,
            crossover_children: 50,
            mutants: 50,
            random_samples: 50,
            mutation_prob: 0.2,
            crossover_prob: 0.2,
            mutation_scope: MutationScope::Gene,
        }
    }
}

impl EvolutionSchedule {
    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.population == 0 {
            return bad("population must be positive".into());
        }
        if self.parents == 0 || self.parents > self.population {
            return bad(format!(
                "parents must be in 1..={} (population), got {}",
                self.population, self.parents
            ));
        }
        for (name, p) in [("mutation_prob", self.mutation_prob), ("crossover_prob", self.crossover_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: SubnetConfig,
    pub fitness: f64,
    pub params: usize,
    /// True when the fitness came from the cache rather than a new evaluation.
    pub cached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub candidates: Vec<Candidate>,
    pub best_fitness: f64,
    pub best: SubnetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub seed: u64,
    pub budget: usize,
    pub schedule: EvolutionSchedule,
    pub generations: Vec<GenerationRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum TraceLine {
    Header {
        seed: u64,
        budget: usize,
        schedule: EvolutionSchedule,
    },
    Generation(GenerationRecord),
}

impl SearchTrace {
    /// Best fitness after each generation.
    pub fn best_curve(&self) -> Vec<f64> {
        self.generations.iter().map(|g| g.best_fitness).collect()
    }

    /// A header line followed by one line per generation.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = TraceLine::Header {
            seed: self.seed,
            budget: self.budget,
            schedule: self.schedule.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for g in &self.generations {
            serde_json::to_writer(&mut out, &TraceLine::Generation(g.clone()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> std::result::Result<Self, String> {
        let mut trace: Option<SearchTrace> = None;
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine = serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?;
            match (parsed, trace.as_mut()) {
                (TraceLine::Header { seed, budget, schedule }, None) => {
                    trace = Some(SearchTrace {
                        seed,
                        budget,
                        schedule,
                        generations: Vec::new(),
                    })
                }
                (TraceLine::Generation(g), Some(t)) => t.generations.push(g),
                (TraceLine::Header { .. }, Some(_)) => return Err(format!("line {}: repeated header", i + 1)),
                (TraceLine::Generation(_), None) => return Err(format!("line {}: generation before header", i + 1)),
            }
        }
        trace.ok_or_else(|| "empty trace".into())
    }

    /// Distinct configs in rank order.
    pub fn ranking(&self) -> Vec<&Candidate> {
        let mut seen = HashMap::new();
        for c in self.generations.iter().flat_map(|g| &g.candidates) {
            seen.entry(c.config.encode()).or_insert(c);
        }
        let mut ranked: Vec<&Candidate> = seen.into_values().collect();
        ranked.sort_by(|a, b| rank(a, b));
        ranked
    }
}

/// Fitness descending, then parameter count, then gene encoding.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.fitness
        .total_cmp(&a.fitness)
        .then(a.params.cmp(&b.params))
        .then_with(|| a.config.encode().cmp(&b.config.encode()))
}

/// Runs the search and returns the best config with the full trace.
/// Candidates within a generation are scored on `workers` threads; the
/// result does not depend on the worker count.
pub fn evolve<F: Fitness, R: Rng + ?Sized>(
    space: &SearchSpaceSpec,
    fitness: &F,
    schedule: &EvolutionSchedule,
    rng: &mut R,
    seed: u64,
    workers: usize,
) -> Result<(SubnetConfig, SearchTrace)> {
    space.check()?;
    space.ensure_feasible()?;
    schedule.check()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let mut cache: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut evaluated: Vec<Candidate> = Vec::new();
    let mut trace = SearchTrace {
        seed,
        budget: space.budget,
        schedule: schedule.clone(),
        generations: Vec::new(),
    };

    for generation in 0..=schedule.generations {
        let configs = if generation == 0 {
            (0..schedule.population)
                .map(|_| space.sample_within_budget(rng))
                .collect::<std::result::Result<Vec<_>, SearchError>>()?
        } else {
            breed(space, schedule, &evaluated, rng)?
        };

        let mut fresh: Vec<Vec<usize>> = Vec::new();
        for c in &configs {
            let key = c.encode();
            if !cache.contains_key(&key) && !fresh.contains(&key) {
                fresh.push(key);
            }
        }
        let scores: Vec<Result<f64>> = pool.install(|| {
            fresh
                .par_iter()
                .map(|key| {
                    let cfg = SubnetConfig::decode(key, space.num_layers)?;
                    fitness.fitness(&cfg)
                })
                .collect()
        });
        let mut newly = HashMap::new();
        for (key, score) in fresh.into_iter().zip(scores) {
            let score = score?;
            cache.insert(key.clone(), score);
            newly.insert(key, ());
        }

        let mut candidates = Vec::with_capacity(configs.len());
        for config in configs {
            let key = config.encode();
            let cached = newly.remove(&key).is_none();
            let c = Candidate {
                fitness: cache[&key],
                params: space.budgeted_params(&config),
                config,
                cached,
            };
            if !cached {
                evaluated.push(c.clone());
            }
            candidates.push(c);
        }
        evaluated.sort_by(rank);
        let best = &evaluated[0];
        log::info!(
            "generation {generation}: {} candidates, best {:.4} ({})",
            candidates.len(),
            best.fitness,
            best.config.key()
        );
        trace.generations.push(GenerationRecord {
            generation,
            candidates,
            best_fitness: best.fitness,
            best: best.config.clone(),
        });
    }
    Ok((evaluated[0].config.clone(), trace))
}

fn breed<R: Rng + ?Sized>(
    space: &SearchSpaceSpec,
    schedule: &EvolutionSchedule,
    ranked: &[Candidate],
    rng: &mut R,
) -> Result<Vec<SubnetConfig>> {
    let top = &ranked[..schedule.parents.min(ranked.len())];
    let mut out = Vec::with_capacity(schedule.crossover_children + schedule.mutants + schedule.random_samples);
    for _ in 0..schedule.crossover_children {
        out.push(space.retry_within_budget(rng, |r| {
            let a = r.random_range(0..top.len());
            let mut b = r.random_range(0..top.len());
            if top.len() > 1 {
                while b == a {
                    b = r.random_range(0..top.len());
                }
            }
            space.crossover_with(&top[a].config, &top[b].config, schedule.crossover_prob, r)
        })?);
    }
    for _ in 0..schedule.mutants {
        out.push(space.retry_within_budget(rng, |r| {
            let parent = &top[r.random_range(0..top.len())].config;
            space.mutate(parent, schedule.mutation_prob, schedule.mutation_scope, r)
        })?);
    }
    for _ in 0..schedule.random_samples {
        out.push(space.sample_within_budget(rng)?);
    }
    Ok(out)
}

/// Summary of a finished search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub best: SubnetConfig,
    pub best_fitness: f64,
    pub best_params: usize,
    pub best_curve: Vec<f64>,
    /// Candidates listed in the trace, duplicates included.
    pub candidates: usize,
    /// Distinct configs evaluated.
    pub distinct: usize,
    /// Number of top configs averaged below.
    pub top_k: usize,
    /// Mean dimension per layer (0 where a module is absent) over the top configs.
    pub average_dims: PerModule<Vec<f64>>,
}

impl Report {
    pub fn from_trace(trace: &SearchTrace) -> Option<Self> {
        let ranked = trace.ranking();
        let best = *ranked.first()?;
        let top = &ranked[..trace.schedule.parents.min(ranked.len())];
        let layers = best.config.num_layers();
        let average_dims = PerModule::from_fn(|kind| {
            (0..layers)
                .map(|l| top.iter().map(|c| c.config.dim_at(kind, l) as f64).sum::<f64>() / top.len() as f64)
                .collect()
        });
        Some(Report {
            best: best.config.clone(),
            best_fitness: best.fitness,
            best_params: best.params,
            best_curve: trace.best_curve(),
            candidates: trace.generations.iter().map(|g| g.candidates.len()).sum(),
            distinct: ranked.len(),
            top_k: top.len(),
            average_dims,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "best config   {}", self.best.key());
        let _ = writeln!(s, "best fitness  {:.4}", self.best_fitness);
        let _ = writeln!(s, "best params   {}", self.best_params);
        let _ = writeln!(s, "evaluated     {} candidates, {} distinct", self.candidates, self.distinct);
        let _ = writeln!(s, "generation  best-so-far");
        for (g, f) in self.best_curve.iter().enumerate() {
            let _ = writeln!(s, "{g:>10}  {f:.4}");
        }
        let _ = writeln!(s, "average dim per layer over top {}:", self.top_k);
        for kind in ModuleKind::ALL {
            let row: Vec<String> = self.average_dims[kind].iter().map(|d| format!("{d:.1}")).collect();
            let _ = writeln!(s, "  {:<8}{}", kind.name(), row.join(" "));
        }
        s
    }
}
