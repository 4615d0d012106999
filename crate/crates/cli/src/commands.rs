use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use log::{info, warn};
use noah_core::backbone::{Backbone, BackboneConfig, ModelConfig};
use noah_core::data::checkpoint;
use noah_core::data::dataset::{write_dataset, GeneratorInfo};
use noah_core::data::synthetic::{generate, max_classes};
use noah_core::data::{Dataset, PatchSet};
use noah_core::evolution::{self, InheritedAccuracy, Report};
use noah_core::search_space::{self, ParamDims, SearchSpaceSpec, SubnetConfig};
use noah_core::supernet::{pretrain_backbone, store_hash, subnet_from_checkpoint, Subnet, Supernet};
use noah_core::training::{EpochRecord, OptimHyper};
use noah_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::exit::UsageError;
use crate::output::OutputDir;
use crate::{BaselineArgs, CountParamsArgs, EvalArgs, EvolveArgs, GenDataArgs, Init, PretrainArgs, RetrainArgs, TrainSupernetArgs};

const RESOLVED_CONFIG: &str = "config.resolved.toml";

fn with_epochs(hyper: &OptimHyper, epochs: Option<usize>) -> OptimHyper {
    let mut h = hyper.clone();
    if let Some(e) = epochs {
        h.epochs = e;
        h.warmup_epochs = h.warmup_epochs.min(e);
    }
    h
}

fn load_config(path: &Path, budget_includes_head: bool) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    config.search.budget_includes_head |= budget_includes_head;
    Ok(config)
}

fn open_dataset(path: Option<&Path>, what: &str) -> Result<Dataset> {
    let path = path.ok_or_else(|| Error::Config(format!("no {what} configured")))?;
    Ok(Dataset::open(path)?)
}

fn load_patches(ds: &Dataset, split: &str, model: &ModelConfig) -> Result<PatchSet<f32>> {
    if ds.manifest.num_classes != model.num_classes {
        return Err(Error::Config(format!(
            "dataset {} has {} classes but the model has {}",
            ds.root.display(),
            ds.manifest.num_classes,
            model.num_classes
        ))
        .into());
    }
    let samples = ds.load_split(split)?;
    Ok(PatchSet::new(&samples, &ds.manifest.normalization, &model.backbone)?)
}

fn load_store(path: &Path) -> Result<noah_core::prompt::ParamStore<f32>> {
    Ok(checkpoint::load(path)?)
}

fn load_backbone(path: Option<&Path>, config: &RunConfig) -> Result<Backbone<f32>> {
    match path {
        Some(p) => {
            let backbone = Backbone::from_store(&load_store(p)?)?;
            if backbone.config != config.model.backbone {
                return Err(Error::Config(format!(
                    "backbone {} has dimensions {:?}, the config asks for {:?}",
                    p.display(),
                    backbone.config,
                    config.model.backbone
                ))
                .into());
            }
            Ok(backbone)
        }
        None => {
            warn!("no backbone checkpoint given; using a randomly initialized backbone");
            let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.backbone_init);
            Ok(Backbone::init(config.model.backbone, &mut rng))
        }
    }
}

fn read_subnet(path: &Path) -> Result<SubnetConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading subnet {}", path.display()))?;
    Ok(SubnetConfig::from_toml(&text).with_context(|| format!("parsing subnet {}", path.display()))?)
}

fn write_log(out: &mut OutputDir, name: &str, log: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for record in log {
        text.push_str(&serde_json::to_string(record)?);
        text.push('\n');
    }
    out.write(name, text)?;
    Ok(())
}

fn log_epoch(what: &str) -> impl FnMut(&EpochRecord) + '_ {
    move |r| info!("{what} epoch {} lr {:.2e} loss {:.4}", r.epoch, r.lr, r.train_loss)
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let shape = [a.channels, a.image_size, a.image_size];
    if a.classes == 0 || a.samples < a.classes {
        return Err(UsageError(format!("need 1 <= classes <= samples, got {} classes and {} samples", a.classes, a.samples)).into());
    }
    if a.channels == 0 || a.image_size < 4 {
        return Err(UsageError("images need at least one channel and a side of 4 pixels".into()).into());
    }
    let cap = max_classes(a.task, (a.image_size, a.image_size));
    if a.classes > cap {
        return Err(UsageError(format!("{} supports at most {cap} classes at size {}", a.task, a.image_size)).into());
    }
    if a.classes > u16::MAX as usize {
        return Err(UsageError("labels are 16-bit".into()).into());
    }
    let samples = generate(a.task, a.classes, a.samples, shape, a.seed);
    let generator = GeneratorInfo {
        task: a.task,
        samples: a.samples,
        seed: a.seed,
    };
    let out = OutputDir::create(&a.out)?;
    let (manifest, warnings) = write_dataset(out.root(), a.task.name(), a.classes, &samples, Some(generator), a.split_seed.unwrap_or(a.seed))?;
    for w in warnings {
        warn!("{w}");
    }
    out.commit();
    let counts: Vec<String> = manifest.splits.iter().map(|(k, v)| format!("{k}={}", v.count)).collect();
    println!("{} {}", a.out.display(), counts.join(" "));
    Ok(())
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let config = load_config(&a.config, false)?;
    let ds = open_dataset(config.data.pretrain_dataset.as_deref(), "pretrain_dataset")?;
    let model = ModelConfig {
        num_classes: ds.manifest.num_classes,
        ..config.model
    };
    let data = load_patches(&ds, &config.data.train_split, &model)?;
    let hyper = with_epochs(&config.pretrain, a.epochs);
    let mut out = OutputDir::create(&a.out)?;
    out.write(RESOLVED_CONFIG, config.resolved())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.pretrain);
    let (backbone, log) = pretrain_backbone(config.model.backbone, model.num_classes, &data, &hyper, &mut rng)?;
    log.iter().for_each(log_epoch("pretrain"));
    write_log(&mut out, "pretrain_log.jsonl", &log)?;
    let path = out.path("backbone.ckpt");
    checkpoint::save(&path, &backbone.to_store())?;
    out.write("summary.json", json!({ "backbone_hash": store_hash(&backbone.params) }).to_string())?;
    out.commit();
    println!("{}", path.display());
    Ok(())
}

pub fn train_supernet(a: &TrainSupernetArgs) -> Result<()> {
    let config = load_config(&a.config, a.budget_includes_head)?;
    let ds = open_dataset(config.data.dataset.as_deref(), "dataset")?;
    let data = load_patches(&ds, &config.data.train_split, &config.model)?;
    let backbone = Arc::new(load_backbone(a.backbone.as_deref().or(config.data.backbone.as_deref()), &config)?);
    let hyper = with_epochs(&config.supernet, a.epochs);
    let mut out = OutputDir::create(&a.out)?;
    out.write(RESOLVED_CONFIG, config.resolved())?;
    let backbone_hash = store_hash(&backbone.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.supernet);
    let mut supernet = Supernet::new(config.model, config.space(), backbone, &mut rng)?;
    let log = supernet.train(&data, &hyper, &mut rng, |_, r| log_epoch("supernet")(r))?;
    write_log(&mut out, "train_log.jsonl", &log)?;
    if store_hash(&supernet.backbone.params) != backbone_hash {
        anyhow::bail!("backbone weights changed during supernet training");
    }
    let path = out.path("supernet.ckpt");
    checkpoint::save(&path, &supernet.to_store())?;
    let summary = json!({
        "backbone_hash": backbone_hash,
        "supernet_hash": store_hash(&supernet.params),
        "first_loss": log.first().map(|r| r.train_loss),
        "last_loss": log.last().map(|r| r.train_loss),
    });
    out.write("summary.json", summary.to_string())?;
    out.commit();
    println!("{}", path.display());
    Ok(())
}

fn load_supernet(path: &Path, space: SearchSpaceSpec, config: &RunConfig) -> Result<Supernet<f32>> {
    let supernet = Supernet::from_store(&load_store(path)?, space)?;
    if supernet.model != config.model {
        return Err(Error::Config(format!("supernet {} was trained with a different model configuration", path.display())).into());
    }
    Ok(supernet)
}

pub fn evolve(a: &EvolveArgs) -> Result<()> {
    let mut config = load_config(&a.config, a.budget_includes_head)?;
    if let Some(scope) = a.mutation_scope {
        config.evolution.mutation_scope = scope;
    }
    if let Some(g) = a.generations {
        config.evolution.generations = g;
    }
    if a.workers == 0 {
        return Err(UsageError("--workers must be positive".into()).into());
    }
    let space = config.space();
    let supernet = load_supernet(&a.supernet, space.clone(), &config)?;
    let ds = open_dataset(config.data.dataset.as_deref(), "dataset")?;
    let val = load_patches(&ds, &config.data.val_split, &config.model)?;
    let mut out = OutputDir::create(&a.out)?;
    out.write(RESOLVED_CONFIG, config.resolved())?;
    let backbone_hash = store_hash(&supernet.backbone.params);
    let fitness = InheritedAccuracy {
        supernet: &supernet,
        data: &val,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.evolve);
    let (best, trace) = evolution::evolve(&space, &fitness, &config.evolution, &mut rng, config.seeds.evolve, a.workers)?;
    if store_hash(&supernet.backbone.params) != backbone_hash {
        anyhow::bail!("backbone weights changed during search");
    }
    let trace_path = out.path("trace.jsonl");
    trace.write_jsonl(BufWriter::new(File::create(&trace_path).with_context(|| format!("writing {}", trace_path.display()))?))?;
    let report = Report::from_trace(&trace).ok_or_else(|| Error::Config("empty search trace".into()))?;
    out.write("report.txt", report.to_text())?;
    out.write("report.json", serde_json::to_string_pretty(&report)?)?;
    out.write("best_subnet.toml", best.to_toml())?;
    out.commit();
    println!("{} {:.4} {}", best.key(), report.best_fitness, report.best_params);
    Ok(())
}

fn train_and_save(mut subnet: Subnet<f32>, hyper: &OptimHyper, seed: u64, val: &PatchSet<f32>, train: &PatchSet<f32>, mut out: OutputDir, extra: serde_json::Value) -> Result<()> {
    let backbone_hash = store_hash(&subnet.backbone.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let epochs = hyper.epochs;
    let log = subnet.train(train, hyper, &mut rng, |net, r| {
        if r.epoch + 1 == epochs || (r.epoch + 1) % 10 == 0 {
            r.val_acc = net.evaluate(val).ok();
        }
        log_epoch("retrain")(r);
    })?;
    if store_hash(&subnet.backbone.params) != backbone_hash {
        anyhow::bail!("backbone weights changed during retraining");
    }
    write_log(&mut out, "retrain_log.jsonl", &log)?;
    let val_acc = subnet.evaluate(val)?;
    let path = out.path("subnet.ckpt");
    checkpoint::save(&path, &subnet.to_store())?;
    out.write("subnet.toml", subnet.config.to_toml())?;
    let mut result = json!({
        "subnet": subnet.config.key(),
        "params": subnet.prompt_param_count(),
        "val_acc": val_acc,
    });
    if let (Some(r), Some(e)) = (result.as_object_mut(), extra.as_object()) {
        r.extend(e.clone());
    }
    out.write("result.json", serde_json::to_string_pretty(&result)?)?;
    out.commit();
    println!("{val_acc}");
    Ok(())
}

pub fn retrain(a: &RetrainArgs) -> Result<()> {
    let config = load_config(&a.config, a.budget_includes_head)?;
    let space = config.space();
    let subnet_config = read_subnet(&a.subnet)?;
    space.validate(&subnet_config).map_err(Error::from)?;
    let supernet = load_supernet(&a.supernet, space, &config)?;
    let ds = open_dataset(config.data.dataset.as_deref(), "dataset")?;
    let train = load_patches(&ds, &config.data.train_split, &config.model)?;
    let val = load_patches(&ds, &config.data.val_split, &config.model)?;
    let hyper = with_epochs(&config.retrain, a.epochs);
    let inherited = supernet.extract(&subnet_config)?;
    let inherited_acc = inherited.evaluate(&val)?;
    let subnet = match a.init {
        Init::Inherited => inherited,
        Init::Fresh => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.retrain ^ 0x5eed);
            Subnet::fresh(config.model, subnet_config, Arc::clone(&supernet.backbone), &mut rng)?
        }
    };
    let mut out = OutputDir::create(&a.out)?;
    out.write(RESOLVED_CONFIG, config.resolved())?;
    let init = match a.init {
        Init::Inherited => "inherited",
        Init::Fresh => "fresh",
    };
    train_and_save(subnet, &hyper, config.seeds.retrain, &val, &train, out, json!({ "init": init, "inherited_val_acc": inherited_acc }))
}

pub fn baseline(a: &BaselineArgs) -> Result<()> {
    let config = load_config(&a.config, false)?;
    let space = config.space();
    let matched = space.matched_baseline(a.module);
    let depth = a.depth.unwrap_or(space.max_depth());
    let dim = match (a.dim, &matched) {
        (Some(d), _) => d,
        (None, Some(m)) => m.dim_at(a.module, 0),
        (None, None) => {
            return Err(Error::Config(format!("no {} dimension fits the budget of {}", a.module, space.budget)).into());
        }
    };
    if depth == 0 || depth > config.model.backbone.num_layers || dim == 0 {
        return Err(UsageError(format!("need 1 <= depth <= {} and a positive dim", config.model.backbone.num_layers)).into());
    }
    let subnet_config = SubnetConfig::single(config.model.backbone.num_layers, a.module, depth, dim);
    if !space.within_budget(&subnet_config) {
        warn!("{} uses {} parameters, over the budget of {}", subnet_config, space.budgeted_params(&subnet_config), space.budget);
    }
    let ds = open_dataset(config.data.dataset.as_deref(), "dataset")?;
    let train = load_patches(&ds, &config.data.train_split, &config.model)?;
    let val = load_patches(&ds, &config.data.val_split, &config.model)?;
    let backbone = Arc::new(load_backbone(a.backbone.as_deref().or(config.data.backbone.as_deref()), &config)?);
    let hyper = with_epochs(&config.retrain, a.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.retrain ^ 0x5eed);
    let subnet = Subnet::fresh(config.model, subnet_config, backbone, &mut rng)?;
    let mut out = OutputDir::create(&a.out)?;
    out.write(RESOLVED_CONFIG, config.resolved())?;
    train_and_save(subnet, &hyper, config.seeds.retrain, &val, &train, out, json!({ "module": a.module.name() }))
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let store = load_store(&a.weights)?;
    let subnet = match &a.subnet {
        Some(p) => subnet_from_checkpoint(&store, &read_subnet(p)?)?,
        None => Subnet::from_store(&store).context("--subnet is required unless the weights hold a subnet")?,
    };
    let ds = Dataset::open(&a.data)?;
    let data = load_patches(&ds, &a.split, &subnet.model)?;
    let acc = subnet.evaluate(&data)?;
    println!("{acc}");
    Ok(())
}

fn parse_dims(spec: &str) -> Result<ParamDims> {
    let from = |layers: usize, embed: usize, attn: usize| ParamDims {
        embed_dim: embed,
        attn_dim: attn,
        num_layers: layers,
        head_params: 0,
    };
    match spec {
        "vit-b" => Ok(from(12, 768, 768)),
        "desk" => {
            let b = BackboneConfig::default();
            Ok(from(b.num_layers, b.embed_dim, b.embed_dim))
        }
        other => {
            let parts: Vec<usize> = other
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| UsageError(format!("bad --backbone-dims '{other}'")))?;
            match parts[..] {
                [l, d] if l > 0 && d > 0 => Ok(from(l, d, d)),
                [l, d, a] if l > 0 && d > 0 && a > 0 => Ok(from(l, d, a)),
                _ => Err(UsageError(format!("--backbone-dims takes vit-b, desk or LAYERS,EMBED[,ATTN], got '{other}'")).into()),
            }
        }
    }
}

pub fn count_params(a: &CountParamsArgs) -> Result<()> {
    let dims = parse_dims(&a.backbone_dims)?;
    let config = read_subnet(&a.subnet)?;
    if config.num_layers() != dims.num_layers {
        return Err(Error::Config(format!(
            "subnet lists {} layers but the backbone has {}",
            config.num_layers(),
            dims.num_layers
        ))
        .into());
    }
    println!("{}", search_space::count_params(&config, &dims));
    Ok(())
}
