//! Acceptance suite: ten criteria, one PASS/FAIL line each.
//!
//! The end-to-end criteria drive the `noah` binary through the desk-scale
//! pipeline on both synthetic tasks with three seeds, sharing one
//! pretrained backbone. Expect a run time of roughly half an hour on one
//! CPU core. Set `NOAH_ACCEPTANCE_KEEP=1` to keep the run directory.

mod common;

#[path = "../../core/tests/support/gradcheck.rs"]
mod gradcheck;
#[path = "../../core/tests/support/toy_search.rs"]
mod toy_search;

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use common::*;
use noah_core::backbone::{Backbone, ModelConfig};
use noah_core::data::checkpoint;
use noah_core::evolution::{evolve, EvolutionSchedule, SearchTrace};
use noah_core::prompt::PromptContext;
use noah_core::search_space::{count_params, ModuleGenes, ModuleKind, MutationScope, PerModule, SearchSpaceSpec, SubnetConfig};
use noah_core::supernet::{store_hash, Supernet};
use noah_core::training::{EpochRecord, Trainable};
use noah_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const SEEDS: [u64; 3] = [0, 1, 2];
const TASKS: [&str; 2] = ["shape-count", "pattern-class"];
const CLASSES: usize = 8;
const SAMPLES: usize = 1000;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Writes past the test harness's output capture so the lines always show.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn desk_config() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml").to_string()
}

fn desk_model() -> ModelConfig {
    let text = fs::read_to_string(desk_config()).unwrap();
    let value: toml::Value = toml::from_str(&text).unwrap();
    value["model"].clone().try_into().unwrap()
}

fn desk_space(model: &ModelConfig) -> SearchSpaceSpec {
    SearchSpaceSpec {
        num_layers: model.backbone.num_layers,
        depth_choices: vec![1, 2, 3, 4],
        dim_choices: PerModule::from_fn(|_| vec![1, 5, 10]),
        budget: 1532,
        budget_includes_head: false,
        dims: model.param_dims(),
    }
}

fn backbone_hash_of(path: &Path) -> String {
    let store = checkpoint::load(path).unwrap();
    store_hash(&Backbone::from_store(&store).unwrap().params)
}

fn read_log(path: &Path) -> Vec<EpochRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Artifacts of one supernet → evolve → retrain run.
struct Run {
    task: &'static str,
    seed: u64,
    data: PathBuf,
    supernet: PathBuf,
    supernet_log: Vec<EpochRecord>,
    trace: SearchTrace,
    supernet_bytes_unchanged: bool,
    result: Value,
    retrain_log: Vec<EpochRecord>,
    subnet_backbone_hash: String,
    supernet_backbone_hash: String,
    /// Fixed-module baselines: (module, val accuracy).
    baselines: Vec<(String, f64)>,
}

struct Pipeline {
    root: PathBuf,
    backbone: PathBuf,
    backbone_hash: String,
    runs: Vec<Run>,
}

impl Pipeline {
    fn run(&self, task: &str, seed: u64) -> &Run {
        self.runs.iter().find(|r| r.task == task && r.seed == seed).unwrap()
    }
}

fn build_pipeline(root: &Path) -> Pipeline {
    let t = Instant::now();
    let base = root.join("data/base");
    ok(&["gen-data", "--task", "base", "--classes", "16", "--samples", "2000", "--seed", "100", "--out", p(&base)]);
    let pre_config = write_config(&root.join("pretrain.toml"), &base, None, Some(&base), 0);
    let backbone = PathBuf::from(ok(&["pretrain-backbone", "--config", p(&pre_config), "--out", p(&root.join("backbone"))]));
    let backbone_hash = backbone_hash_of(&backbone);
    emit(&format!("  pipeline: pretrained backbone in {:.0?}", t.elapsed()));

    let mut runs = Vec::new();
    for task in TASKS {
        for seed in SEEDS {
            let t = Instant::now();
            let dir = root.join(format!("{task}-{seed}"));
            let data = dir.join("data");
            let data_seed = (200 + seed).to_string();
            let classes = CLASSES.to_string();
            let samples = SAMPLES.to_string();
            ok(&["gen-data", "--task", task, "--classes", &classes, "--samples", &samples, "--seed", &data_seed, "--out", p(&data)]);
            let config = write_config(&dir.join("run.toml"), &data, Some(&backbone), None, seed);

            let supernet_dir = dir.join("supernet");
            let supernet = PathBuf::from(ok(&["train-supernet", "--config", p(&config), "--out", p(&supernet_dir)]));
            let supernet_bytes = fs::read(&supernet).unwrap();
            let search_dir = dir.join("search");
            ok(&["evolve", "--supernet", p(&supernet), "--config", p(&config), "--out", p(&search_dir)]);
            let supernet_bytes_unchanged = fs::read(&supernet).unwrap() == supernet_bytes;
            let trace = SearchTrace::read_jsonl(&fs::read(search_dir.join("trace.jsonl")).unwrap()[..]).unwrap();
            let best = search_dir.join("best_subnet.toml");
            let retrain_dir = dir.join("retrain");
            ok(&["retrain", "--supernet", p(&supernet), "--subnet", p(&best), "--config", p(&config), "--out", p(&retrain_dir)]);

            let mut baselines = Vec::new();
            if task == "shape-count" {
                for module in ["adapter", "lora", "vpt"] {
                    let out = dir.join(format!("baseline-{module}"));
                    let acc = ok(&["baseline", "--module", module, "--config", p(&config), "--out", p(&out)]);
                    baselines.push((module.to_string(), acc.parse().unwrap()));
                }
            }
            let run = Run {
                task,
                seed,
                supernet_log: read_log(&supernet_dir.join("train_log.jsonl")),
                supernet_backbone_hash: backbone_hash_of(&supernet),
                trace,
                supernet_bytes_unchanged,
                result: read_json(&retrain_dir.join("result.json")),
                retrain_log: read_log(&retrain_dir.join("retrain_log.jsonl")),
                subnet_backbone_hash: backbone_hash_of(&retrain_dir.join("subnet.ckpt")),
                baselines,
                data,
                supernet,
            };
            emit(&format!(
                "  pipeline: {task} seed {seed}: {} retrained {:.3} inherited {:.3} baselines {:?} in {:.0?}",
                run.result["subnet"].as_str().unwrap(),
                run.result["val_acc"].as_f64().unwrap(),
                run.result["inherited_val_acc"].as_f64().unwrap(),
                run.baselines,
                t.elapsed()
            ));
            runs.push(run);
        }
    }
    Pipeline {
        root: root.to_path_buf(),
        backbone,
        backbone_hash,
        runs,
    }
}

fn tensor_elements(config: &SubnetConfig, embed_dim: usize) -> usize {
    let mut total = 0;
    PromptContext::<f32>::build(config, embed_dim, 2, |name, rows, cols| {
        if !name.starts_with("head.") {
            total += rows * cols;
        }
        Ok(Tensor::zeros(&[rows, cols]))
    })
    .unwrap();
    total
}

fn criterion_1_parameter_counts(root: &Path) -> Outcome {
    let t = Instant::now();
    let mut details = Vec::new();
    let mut pass = true;
    for (kind, expected) in [(ModuleKind::Adapter, 156_768usize), (ModuleKind::Lora, 294_912)] {
        let config = SubnetConfig::single(12, kind, 12, 8);
        let path = root.join(format!("vitb-{}.toml", kind.name()));
        fs::write(&path, config.to_toml()).unwrap();
        let printed: usize = ok(&["count-params", "--subnet", p(&path), "--backbone-dims", "vit-b"]).parse().unwrap();
        let oracle = tensor_elements(&config, 768);
        pass &= printed == expected && oracle == expected;
        details.push(format!("{} r=8 -> {printed} (oracle {oracle})", kind.name()));
    }
    let elapsed = t.elapsed();
    pass &= elapsed.as_secs_f64() < 1.0;
    check(pass, format!("{} in {elapsed:.2?}", details.join(", ")))
}

fn criterion_2_gradients() -> Outcome {
    let t = Instant::now();
    let ops = gradcheck::op_errors();
    let (worst_name, worst_op) = ops.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    let composed = gradcheck::composed_error();
    let models = gradcheck::model_checks();
    let worst_model = models.iter().map(|m| m.worst).fold(0.0, f64::max);
    let elements: usize = models.iter().map(|m| m.checked).sum();
    let seeds: Vec<u64> = models.iter().map(|m| m.seed).collect();
    let modules_covered = models.iter().all(|m| {
        ["vpt.", "lora.", "adapter.", "head.", "backbone."]
            .iter()
            .all(|prefix| m.names.iter().any(|n| n.starts_with(prefix)))
    });
    let elapsed = t.elapsed();
    let pass = ops.len() == 23
        && worst_op < gradcheck::OP_TOL
        && composed < gradcheck::OP_TOL
        && worst_model < gradcheck::MODEL_TOL
        && modules_covered
        && models.len() >= 5
        && elapsed.as_secs() < 120;
    check(
        pass,
        format!(
            "{} ops, worst {worst_op:.1e} ({worst_name}), composed {composed:.1e}, model {worst_model:.1e} over {elements} elements, seeds {seeds:?}, in {elapsed:.1?}",
            ops.len()
        ),
    )
}

fn criterion_3_frozen_backbone(pl: &Pipeline) -> Outcome {
    let run = pl.run("shape-count", 0);
    let config = write_config(&pl.root.join("frozen.toml"), &run.data, Some(&pl.backbone), None, 0);
    let out = pl.root.join("frozen-supernet");
    let supernet = PathBuf::from(ok(&["train-supernet", "--config", p(&config), "--out", p(&out), "--epochs", "5"]));
    let after_supernet = backbone_hash_of(&supernet) == pl.backbone_hash && backbone_hash_of(&pl.backbone) == pl.backbone_hash;
    let full_search = EvolutionSchedule::default().generations + 1;
    let after_evolve = pl.runs.iter().all(|r| {
        r.supernet_bytes_unchanged && r.supernet_backbone_hash == pl.backbone_hash && r.trace.generations.len() == full_search
    });
    let after_retrain = pl.runs.iter().all(|r| r.subnet_backbone_hash == pl.backbone_hash);
    check(
        after_supernet && after_evolve && after_retrain,
        format!(
            "backbone {}…: 5 supernet epochs {after_supernet}, evolve {after_evolve}, retrain {after_retrain} ({} runs)",
            &pl.backbone_hash[..12],
            pl.runs.len()
        ),
    )
}

fn logits<N: Trainable<f32>>(net: &N, config: &SubnetConfig, x: &Tensor<f32>) -> Tensor<f32> {
    let mut g = Graph::inference();
    let pass = net.forward(&mut g, config, x).unwrap();
    g.value(pass.logits).clone()
}

fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn random_input(model: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let b = &model.backbone;
    Tensor::from_fn(&[1, b.num_patches(), b.patch_dim()], |_| rng.random_range(-2.0f32..2.0))
}

fn desk_supernet(pl: &Pipeline, seed: u64) -> Supernet<f32> {
    let model = desk_model();
    let backbone = Backbone::from_store(&checkpoint::load(&pl.backbone).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Supernet::new(model, desk_space(&model), Arc::new(backbone), &mut rng).unwrap()
}

fn criterion_4_zero_delta(pl: &Pipeline) -> Outcome {
    let sn = desk_supernet(pl, 40);
    let layers = sn.model.backbone.num_layers;
    let mut config = SubnetConfig::empty(layers);
    config.modules[ModuleKind::Adapter] = ModuleGenes::uniform(layers, layers, 10);
    config.modules[ModuleKind::Lora] = ModuleGenes::uniform(layers, layers, 10);
    let frozen = SubnetConfig::empty(layers);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let worst = (0..100)
        .map(|_| {
            let x = random_input(&sn.model, &mut rng);
            max_abs_diff(&logits(&sn, &config, &x), &logits(&sn, &frozen, &x))
        })
        .fold(0.0, f32::max);
    check(worst == 0.0, format!("max abs logit diff {worst:e} over 100 inputs with {config}"))
}

fn criterion_5_entanglement(pl: &Pipeline) -> Outcome {
    let mut sn = desk_supernet(pl, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for t in sn.params.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3f32..0.3));
    }
    let mut extract_mismatches = 0;
    let mut worst_perturbed: f32 = 0.0;
    for _ in 0..50 {
        let config = sn.space.sample_uniform(&mut rng);
        let x = random_input(&sn.model, &mut rng);
        let sub = sn.extract(&config).unwrap();
        let reference = logits(&sn, &config, &x);
        if !reference.bit_eq(&logits(&sub, &config, &x)) {
            extract_mismatches += 1;
        }
        let mut perturbed = sn.clone();
        for (name, t) in perturbed.params.iter_mut() {
            let (rows, cols) = sub.params.get(name).map(|s| s.matrix_dims()).unwrap_or((0, 0));
            let (_, width) = t.matrix_dims();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                if i / width >= rows || i % width >= cols {
                    *v += rng.random_range(1.0f32..3.0);
                }
            }
        }
        worst_perturbed = worst_perturbed.max(max_abs_diff(&reference, &logits(&perturbed, &config, &x)));
    }
    check(
        extract_mismatches == 0 && worst_perturbed == 0.0,
        format!("50 pairs: {extract_mismatches} extract mismatches, max diff after perturbing inactive slices {worst_perturbed:e}"),
    )
}

fn criterion_6_evolution_oracle() -> Outcome {
    let t = Instant::now();
    let space = toy_search::toy_space();
    let configs = toy_search::enumerate(&space).len();
    let (threshold, top, feasible) = toy_search::top_percent_threshold(&space);
    let mut hits = 0;
    let mut violations = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (best, trace) = evolve(&space, &toy_search::toy_fitness, &EvolutionSchedule::default(), &mut rng, seed, 1).unwrap();
        violations += trace
            .generations
            .iter()
            .flat_map(|g| &g.candidates)
            .filter(|c| count_params(&c.config, &space.dims) > space.budget)
            .count();
        if toy_search::toy_fitness(&best) >= threshold {
            hits += 1;
        }
    }
    let elapsed = t.elapsed();
    check(
        hits >= 16 && violations == 0 && configs <= 4096 && elapsed.as_secs() < 300,
        format!("{hits}/20 seeds in the top {top} of {feasible} feasible ({configs} total), {violations} budget violations, {elapsed:.1?}"),
    )
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_7_end_to_end(pl: &Pipeline) -> Outcome {
    let runs: Vec<&Run> = SEEDS.iter().map(|&s| pl.run("shape-count", s)).collect();
    let noah = mean(runs.iter().map(|r| r.result["val_acc"].as_f64().unwrap()));
    let baseline = mean(runs.iter().map(|r| mean(r.baselines.iter().map(|b| b.1))));
    let per_module: Vec<String> = ["adapter", "lora", "vpt"]
        .iter()
        .map(|m| {
            let acc = mean(runs.iter().map(|r| r.baselines.iter().find(|b| b.0 == *m).unwrap().1));
            format!("{m} {acc:.3}")
        })
        .collect();
    let floor = (3.0 / CLASSES as f64).max(0.40);
    check(
        noah >= floor && noah >= baseline - 0.02,
        format!(
            "searched subnet {noah:.3} vs floor {floor:.3} and baseline mean {baseline:.3} - 0.02 ({})",
            per_module.join(", ")
        ),
    )
}

fn criterion_8_inherited_vs_retrained(pl: &Pipeline) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for run in &pl.runs {
        let retrained = run.result["val_acc"].as_f64().unwrap();
        let inherited = run.result["inherited_val_acc"].as_f64().unwrap();
        worst = worst.max((retrained - inherited).abs());
        parts.push(format!("{}/{} {inherited:.3}->{retrained:.3}", run.task, run.seed));
    }
    check(
        worst <= 0.05 && pl.runs.len() == TASKS.len() * SEEDS.len(),
        format!("max |inherited - retrained| {worst:.3} ({})", parts.join(", ")),
    )
}

fn exit_code(args: &[&str]) -> Option<i32> {
    noah(args).status.code()
}

fn criterion_9_determinism(pl: &Pipeline) -> Outcome {
    let root = pl.root.join("determinism");
    let run = pl.run("pattern-class", 0);
    let mut failures = Vec::new();

    let gen = |name: &str| {
        let dir = root.join(name);
        ok(&["gen-data", "--task", "shape-count", "--classes", "8", "--samples", "300", "--seed", "9", "--out", p(&dir)]);
        dir_bytes(&dir)
    };
    if gen("data-a") != gen("data-b") {
        failures.push("dataset files differ");
    }

    let config = write_config(&root.join("run.toml"), &run.data, Some(&pl.backbone), None, 7);
    let train = |name: &str| {
        let dir = root.join(name);
        ok(&["train-supernet", "--config", p(&config), "--out", p(&dir), "--epochs", "2"]);
        (fs::read(dir.join("supernet.ckpt")).unwrap(), fs::read(dir.join("train_log.jsonl")).unwrap())
    };
    let first = train("supernet-a");
    if first != train("supernet-b") {
        failures.push("supernet checkpoints differ");
    }
    let supernet = root.join("supernet-a/supernet.ckpt");
    let search = |name: &str, workers: &str| {
        let dir = root.join(name);
        ok(&["evolve", "--supernet", p(&supernet), "--config", p(&config), "--out", p(&dir), "--generations", "1", "--workers", workers]);
        fs::read(dir.join("trace.jsonl")).unwrap()
    };
    if search("search-a", "1") != search("search-b", "2") {
        failures.push("traces differ");
    }

    let store = checkpoint::load(&supernet).unwrap();
    let round_trip = checkpoint::encode(&store) == first.0;
    let subnet_ckpt = run.supernet.parent().unwrap().parent().unwrap().join("retrain/subnet.ckpt");
    let subnet_bytes = fs::read(&subnet_ckpt).unwrap();
    let round_trip = round_trip && checkpoint::encode(&checkpoint::decode(&subnet_bytes).unwrap()) == subnet_bytes;
    if !round_trip {
        failures.push("checkpoint round trip not bit-exact");
    }

    let subnet = root.join("search-a/best_subnet.toml");
    let eval = |weights: &Path| exit_code(&["eval", "--weights", p(weights), "--subnet", p(&subnet), "--data", p(&run.data)]);
    let write = |name: &str, bytes: &[u8]| {
        let path = root.join(name);
        fs::write(&path, bytes).unwrap();
        path
    };
    let mut bad_version = first.0.clone();
    bad_version[4] = 7;
    let mut bad_header = first.0.clone();
    bad_header[20] = b'#';
    let cases = [
        ("truncated", eval(&write("truncated.ckpt", &first.0[..first.0.len() - 5])), Some(2)),
        ("bad magic", eval(&write("magic.ckpt", b"JUNKJUNKJUNKJUNK")), Some(2)),
        ("bad version", eval(&write("version.ckpt", &bad_version)), Some(2)),
        ("bad header", eval(&write("header.ckpt", &bad_header)), Some(2)),
        ("trailing bytes", eval(&write("trailing.ckpt", &[&first.0[..], b"xx"].concat())), Some(2)),
        ("missing", eval(&root.join("absent.ckpt")), Some(4)),
    ];
    let mut codes = Vec::new();
    for (name, got, want) in cases {
        if got != want {
            failures.push(name);
        }
        codes.push(format!("{name}={}", got.map_or("signal".into(), |c| c.to_string())));
    }
    let data_copy = root.join("data-a");
    fs::write(data_copy.join("val_images.bin"), [0u8; 10]).unwrap();
    let dataset_code = exit_code(&["eval", "--weights", p(&supernet), "--subnet", p(&subnet), "--data", p(&data_copy)]);
    if dataset_code != Some(2) {
        failures.push("short dataset file");
    }
    codes.push(format!("short-dataset={dataset_code:?}"));

    let detail = format!("datasets, checkpoints, logs and traces repeat byte for byte; exit codes {}", codes.join(" "));
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", failures.join(", ")))
    }
}

/// `|observed − n·p| ≤ 4·√(n·p·(1−p))`.
fn within_4_sigma(hits: usize, n: usize, p: f64) -> (bool, f64) {
    let expected = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    let z = (hits as f64 - expected) / sigma;
    (z.abs() <= 4.0, z)
}

fn criterion_10_operator_statistics() -> Outcome {
    let model = desk_model();
    let space = desk_space(&model);
    let trials = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst: f64 = 0.0;
    let mut pass = true;
    let mut record = |hits: usize, n: usize, p: f64| {
        let (ok, z) = within_4_sigma(hits, n, p);
        pass &= ok && n >= 10_000;
        worst = worst.max(z.abs());
    };

    // Sampler: every depth and dim choice equally likely.
    let samples: Vec<SubnetConfig> = (0..trials).map(|_| space.sample_uniform(&mut rng)).collect();
    for kind in ModuleKind::ALL {
        for &depth in &space.depth_choices {
            let hits = samples.iter().filter(|c| c.genes(kind).depth == depth).count();
            record(hits, trials, 1.0 / space.depth_choices.len() as f64);
        }
        let installed: Vec<usize> = samples.iter().flat_map(|c| c.genes(kind).dims[..c.genes(kind).depth].to_vec()).collect();
        for &dim in &space.dim_choices[kind] {
            let hits = installed.iter().filter(|&&d| d == dim).count();
            record(hits, installed.len(), 1.0 / space.dim_choices[kind].len() as f64);
        }
    }

    // Crossover: each gene from either parent with probability 1/2.
    let layers = space.num_layers;
    let mut a = SubnetConfig::empty(layers);
    let mut b = SubnetConfig::empty(layers);
    for kind in ModuleKind::ALL {
        a.modules[kind] = ModuleGenes::uniform(layers, layers, 1);
        b.modules[kind] = ModuleGenes::uniform(layers, layers, 10);
    }
    let mut shallow = a.clone();
    shallow.modules[ModuleKind::Vpt] = ModuleGenes::uniform(layers, 2, 1);
    let (mut from_b, mut dims_seen, mut deeper, mut depth_seen) = (0, 0, 0, 0);
    for _ in 0..trials {
        let child = space.crossover(&a, &b, &mut rng);
        for kind in ModuleKind::ALL {
            from_b += child.genes(kind).dims.iter().filter(|&&d| d == 10).count();
            dims_seen += layers;
        }
        let child = space.crossover(&shallow, &b, &mut rng);
        deeper += usize::from(child.genes(ModuleKind::Vpt).depth == layers);
        depth_seen += 1;
    }
    record(from_b, dims_seen, 0.5);
    record(deeper, depth_seen, 0.5);

    // Gene-scope mutation: a gene changes with probability p·(1 − 1/k).
    let p = EvolutionSchedule::default().mutation_prob;
    let mut parent = SubnetConfig::empty(layers);
    for kind in ModuleKind::ALL {
        parent.modules[kind] = ModuleGenes::uniform(layers, 3, 5);
    }
    let (mut depth_changes, mut depth_trials, mut dim_changes, mut dim_trials) = (0, 0, 0, 0);
    for _ in 0..trials {
        let child = space.mutate(&parent, p, MutationScope::Gene, &mut rng);
        for kind in ModuleKind::ALL {
            let (old, new) = (parent.genes(kind), child.genes(kind));
            depth_changes += usize::from(old.depth != new.depth);
            depth_trials += 1;
            for layer in 0..old.depth.min(new.depth) {
                dim_changes += usize::from(old.dims[layer] != new.dims[layer]);
                dim_trials += 1;
            }
        }
    }
    let k_depth = space.depth_choices.len() as f64;
    let k_dim = space.dim_choices[ModuleKind::Adapter].len() as f64;
    record(depth_changes, depth_trials, p * (1.0 - 1.0 / k_depth));
    record(dim_changes, dim_trials, p * (1.0 - 1.0 / k_dim));

    check(
        pass,
        format!(
            "{trials} trials each; largest deviation {worst:.2} sigma; depth change rate {:.4} (expected {:.4}), dim change rate {:.4} (expected {:.4})",
            depth_changes as f64 / depth_trials as f64,
            p * (1.0 - 1.0 / k_depth),
            dim_changes as f64 / dim_trials as f64,
            p * (1.0 - 1.0 / k_dim)
        ),
    )
}

/// Fraction of steps where the 10-epoch moving average does not rise.
fn smooth_descent(log: &[EpochRecord]) -> f64 {
    let losses: Vec<f64> = log.iter().map(|r| r.train_loss).collect();
    let averages: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    let steps = averages.windows(2).count();
    averages.windows(2).filter(|w| w[1] <= w[0]).count() as f64 / steps as f64
}

fn training_curve_checks(pl: &Pipeline) -> Vec<(String, Outcome)> {
    let mut out = Vec::new();
    for run in pl.runs.iter().filter(|r| r.task == "shape-count") {
        let first = run.supernet_log.first().unwrap().train_loss;
        let last = run.supernet_log.last().unwrap().train_loss;
        out.push((
            format!("supernet loss halves, shape-count seed {}", run.seed),
            check(last < 0.5 * first, format!("{first:.3} -> {last:.3}")),
        ));
    }
    for run in &pl.runs {
        for (what, log) in [("supernet", &run.supernet_log), ("retrain", &run.retrain_log)] {
            let frac = smooth_descent(log);
            out.push((
                format!("{what} moving-average loss descends, {} seed {}", run.task, run.seed),
                check(frac >= 0.9, format!("{:.1}% of windows non-increasing", 100.0 * frac)),
            ));
        }
    }
    out
}

fn attempt(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    })
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let started = Instant::now();
    let mut failed = Vec::new();
    let mut report = |label: String, outcome: Outcome| {
        match &outcome {
            Ok(detail) => emit(&format!("PASS {label}: {detail}")),
            Err(detail) => {
                emit(&format!("FAIL {label}: {detail}"));
                failed.push(label);
            }
        }
    };

    report("criterion 1 parameter counts".into(), attempt(|| criterion_1_parameter_counts(&root)));
    report("criterion 2 gradient checks".into(), attempt(criterion_2_gradients));
    report("criterion 6 evolution oracle".into(), attempt(criterion_6_evolution_oracle));
    report("criterion 10 operator statistics".into(), attempt(criterion_10_operator_statistics));

    let pipeline = catch_unwind(AssertUnwindSafe(|| build_pipeline(&root)));
    match &pipeline {
        Ok(pl) => {
            report("criterion 3 frozen backbone".into(), attempt(|| criterion_3_frozen_backbone(pl)));
            report("criterion 4 zero-delta start".into(), attempt(|| criterion_4_zero_delta(pl)));
            report("criterion 5 entanglement equivalence".into(), attempt(|| criterion_5_entanglement(pl)));
            report("criterion 7 end-to-end learning".into(), attempt(|| criterion_7_end_to_end(pl)));
            report("criterion 8 inherited vs retrained".into(), attempt(|| criterion_8_inherited_vs_retrained(pl)));
            report("criterion 9 determinism and formats".into(), attempt(|| criterion_9_determinism(pl)));
            for (label, outcome) in training_curve_checks(pl) {
                report(format!("check {label}"), outcome);
            }
        }
        Err(_) => {
            for label in [3, 4, 5, 7, 8, 9].map(|c| format!("criterion {c}")) {
                report(label, Err("pipeline failed to run".into()));
            }
        }
    }
    emit(&format!("acceptance finished in {:.0?}", started.elapsed()));
    if std::env::var_os("NOAH_ACCEPTANCE_KEEP").is_some() {
        let kept = tmp.keep();
        emit(&format!("run directory kept at {}", kept.display()));
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
