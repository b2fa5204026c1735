use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use loopembed::autoencoder::{pretrain, DecoderArch, EncoderArch, EncoderVariant, PretrainConfig, PretrainMeta};
use loopembed::autosched::{benchmark_models, search, BenchRow, Evaluator, SearchConfig};
use loopembed::datagen::{build_labeled_dataset, build_pretrain_dataset, GenConfig, LabeledDataset, LabeledSample, MachineConfig};
use loopembed::featurize::{FeatureConfig, VectorDataset};
use loopembed::jsonl;
use loopembed::loop_ir::Program;
use loopembed::perfmodel::{
    build_model, cell_summary, data_efficiency_experiment, evaluate, featurize_samples, train, train_cell, Example,
    ExperimentConfig, ExperimentData, Frontend, PerfModel, TrainConfig,
};
use tensornet::{Checkpoint, ParameterStore};

use crate::args::*;
use crate::manifest::{self, Run, MANIFEST_FILE};

const PROGRAMS: &str = "programs.jsonl";
const TRAIN: &str = "train.jsonl";
const VALID: &str = "valid.jsonl";
const TEST: &str = "test.jsonl";
const VECTORS: &str = "pretrain_vectors.jsonl";

pub fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Search(a) => search_cmd(a),
        Command::Experiment(a) => experiment(a),
        Command::Rerun(a) => rerun(a),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    jsonl::write(items, BufWriter::new(f)).with_context(|| format!("cannot write {}", path.display()))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    jsonl::read(BufReader::new(f)).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn gen(a: &GenArgs) -> Result<()> {
    let run = Run::start(&a.out_dir, &[PROGRAMS, TRAIN, VALID, TEST, VECTORS], a.force)?;
    let cfg = GenConfig {
        seed: a.seed,
        n_programs: a.n_programs,
        max_sequences: a.max_sequences,
        ..GenConfig::default()
    };
    let ds = build_labeled_dataset(&cfg, &MachineConfig::default())?;
    write_jsonl(&run.path(PROGRAMS), &ds.programs)?;
    write_jsonl(&run.path(TRAIN), &ds.train)?;
    write_jsonl(&run.path(VALID), &ds.valid)?;
    write_jsonl(&run.path(TEST), &ds.test)?;
    let (ptr, pva, pte) = loopembed::datagen::split_sizes(a.n_programs);
    println!(
        "split: train {ptr} / valid {pva} / test {pte} programs; {} / {} / {} samples",
        ds.train.len(),
        ds.valid.len(),
        ds.test.len()
    );

    let pcfg = GenConfig {
        n_programs: a.pretrain_programs,
        ..cfg
    };
    let pre = build_pretrain_dataset(&pcfg, &FeatureConfig::default())?;
    let f = File::create(run.path(VECTORS))?;
    pre.vectors.write_jsonl(BufWriter::new(f))?;
    println!(
        "pretrain: {} vectors from {} programs ({} statements skipped)",
        pre.vectors.records.len(),
        a.pretrain_programs,
        pre.skipped
    );
    run.finish(Command::Gen(a.clone()))?;
    Ok(())
}

fn variant(v: VariantArg) -> EncoderVariant {
    match v {
        VariantArg::Segmented => EncoderVariant::Segmented,
        VariantArg::PlainMlp => EncoderVariant::PlainMlp,
        VariantArg::CompEmbed => EncoderVariant::CompEmbed,
    }
}

fn pretrain_cmd(a: &PretrainArgs) -> Result<()> {
    let mut run = Run::start(&a.out_dir, &["encoder.ckpt", "pretrain_log.csv"], a.force)?;
    let data = run.input(&a.data)?;
    let ds = VectorDataset::read_jsonl(BufReader::new(File::open(&data)?))
        .with_context(|| format!("cannot load vectors from {}", data.display()))?;
    let arch = EncoderArch::for_variant(variant(a.variant), a.embedding_dim);
    let cfg = PretrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        ..PretrainConfig::default()
    };
    let out = pretrain(&ds, &arch, &DecoderArch::default(), &cfg, |r| {
        println!("epoch {} train_mse {:.6} valid_mse {:.6}", r.epoch, r.train_mse, r.valid_mse);
    })?;
    out.checkpoint().save(&run.path("encoder.ckpt"))?;
    write_csv(&run.path("pretrain_log.csv"), &out.log)?;
    println!("best valid_mse {:.6} at epoch {}", out.best_valid_mse, out.best_epoch);
    run.finish(Command::Pretrain(a.clone()))?;
    Ok(())
}

fn load_dataset(run: Option<&mut Run>, dir: &Path) -> Result<LabeledDataset> {
    let names = [PROGRAMS, TRAIN, VALID, TEST];
    let mut paths = Vec::new();
    match run {
        Some(run) => {
            for n in names {
                paths.push(run.input(&dir.join(n))?);
            }
        }
        None => paths.extend(names.iter().map(|n| dir.join(n))),
    }
    let programs: Vec<Program> = read_jsonl(&paths[0])?;
    let split = |p: &Path| -> Result<Vec<LabeledSample>> { read_jsonl(p) };
    Ok(LabeledDataset {
        programs,
        train: split(&paths[1])?,
        valid: split(&paths[2])?,
        test: split(&paths[3])?,
    })
}

fn examples(ds: &LabeledDataset, samples: &[LabeledSample], fcfg: &FeatureConfig) -> Result<Vec<Example>> {
    Ok(featurize_samples(&ds.programs, samples, fcfg)?)
}

fn load_pretrained(run: &mut Run, path: &Path) -> Result<Checkpoint> {
    let p = run.input(path)?;
    let ck = Checkpoint::load(&p).with_context(|| format!("cannot load checkpoint {}", p.display()))?;
    PretrainMeta::parse(&ck.meta).with_context(|| format!("{} is not a pre-training checkpoint", p.display()))?;
    Ok(ck)
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut run = Run::start(&a.out_dir, &["model.ckpt", "train_log.csv"], a.force)?;
    let fcfg = FeatureConfig::default();
    let ck = match (a.frontend, &a.pretrained) {
        (FrontendArg::Encoder, None) => bail!("--frontend encoder needs --pretrained <path>"),
        (FrontendArg::Baseline, Some(_)) => bail!("--pretrained only applies to --frontend encoder"),
        (FrontendArg::Baseline, None) if a.random_init => bail!("--random-init only applies to --frontend encoder"),
        (_, Some(p)) => Some(load_pretrained(&mut run, p)?),
        _ => None,
    };
    let data = load_dataset(Some(&mut run), &a.data_dir)?;
    let train_set = examples(&data, &data.train, &fcfg)?;
    let valid_set = examples(&data, &data.valid, &fcfg)?;
    let frontend = match (a.frontend, a.random_init) {
        (FrontendArg::Baseline, _) => Frontend::Baseline,
        (FrontendArg::Encoder, false) => Frontend::EncoderPretrained,
        (FrontendArg::Encoder, true) => Frontend::EncoderRandom,
    };
    let xd = ExperimentData {
        train: &train_set,
        valid: &valid_set,
        test: &[],
        features: &fcfg,
        embedding_dim: a.embedding_dim,
        pretrained: ck.as_ref(),
    };
    let subset = loopembed::datagen::subsample_fraction(&train_set, a.fraction, a.seed);
    if subset.is_empty() {
        bail!("--fraction {} leaves no training samples", a.fraction);
    }
    let (model, mut store) = build_model(&xd, frontend, a.seed)?;
    let cfg = TrainConfig {
        base_lr: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.max_epochs,
        seed: a.seed,
        ..TrainConfig::default()
    };
    println!("training {} on {} samples", frontend.name(), subset.len());
    let out = train(&model, &mut store, &subset, &valid_set, &cfg, |r, _| {
        println!(
            "epoch {} phase {} train_mape {:.2}% valid_mape {:.2}%",
            r.epoch, r.phase, r.train_mape, r.valid_mape
        );
    })?;
    if let Some(e) = out.unfreeze_epoch {
        println!("encoder unfrozen after epoch {e}");
    }
    println!("best valid MAPE {:.2}% at epoch {}", out.best_valid_mape, out.best_epoch);
    model.checkpoint(&store).save(&run.path("model.ckpt"))?;
    write_csv(&run.path("train_log.csv"), &out.log)?;
    run.finish(Command::Train(a.clone()))?;
    Ok(())
}

fn load_model(path: &Path) -> Result<(PerfModel, ParameterStore)> {
    let ck = Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    PerfModel::from_checkpoint(&ck).with_context(|| format!("cannot use {}", path.display()))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (model, store) = load_model(&a.model)?;
    let data = load_dataset(None, &a.data_dir)?;
    let samples = match a.split {
        SplitArg::Train => &data.train,
        SplitArg::Valid => &data.valid,
        SplitArg::Test => &data.test,
    };
    let set = examples(&data, samples, &model.arch.features)?;
    let mape = evaluate(&model, &store, &set)?;
    println!("MAPE: {mape:.2}%");
    Ok(())
}

/// Test programs in order of first appearance in the test split.
fn test_programs(ds: &LabeledDataset, limit: usize) -> Vec<Program> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for s in &ds.test {
        if out.len() == limit {
            break;
        }
        if seen.insert(s.program_id.clone()) {
            out.push(ds.program(&s.program_id).expect("split refers to a known program").clone());
        }
    }
    out
}

fn search_cmd(a: &SearchArgs) -> Result<()> {
    let mut outputs = vec!["search.csv"];
    if a.trace {
        outputs.push("trace.jsonl");
    }
    let mut run = Run::start(&a.out_dir, &outputs, a.force)?;
    let data = load_dataset(Some(&mut run), &a.data_dir)?;
    let machine = MachineConfig::default();
    let loaded = match &a.model {
        Some(p) => {
            let p = run.input(p)?;
            Some(load_model(&p)?)
        }
        None => None,
    };
    let (name, ev) = match &loaded {
        Some((model, store)) => (model.arch.frontend.name().to_string(), Evaluator::Model { model, store }),
        None => ("oracle".to_string(), Evaluator::Oracle(&machine)),
    };
    let cfg = SearchConfig {
        beam_width: a.beam,
        max_depth: a.depth,
    };
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for p in test_programs(&data, a.programs) {
        let r = search(&p, &ev, &cfg)?;
        let truth = loopembed::datagen::speedup(&p, &r.best.sequence, &machine)?;
        println!("{} {} predicted {:.3} true {:.3}", p.id, r.best.sequence, r.best.score, truth);
        rows.push(BenchRow {
            program_id: p.id.clone(),
            evaluator: name.clone(),
            chosen_sequence: r.best.sequence.to_string(),
            true_speedup: truth,
        });
        for t in r.trace {
            traces.push(serde_json::json!({"program_id": p.id, "level": t.level, "beam": t.beam, "scores": t.scores}));
        }
    }
    write_csv(&run.path("search.csv"), &rows)?;
    if a.trace {
        write_jsonl(&run.path("trace.jsonl"), &traces)?;
    }
    let truths: Vec<f64> = rows.iter().map(|r| r.true_speedup).collect();
    println!("geomean true speedup: {:.3}", loopembed::autosched::geomean(&truths));
    run.finish(Command::Search(a.clone()))?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    variant: String,
    fraction: f64,
    mean_test_mape: f64,
    spread: f64,
}

#[derive(Serialize)]
struct GeomeanRow {
    evaluator: String,
    geomean_speedup: f64,
}

fn experiment(a: &ExperimentArgs) -> Result<()> {
    let outputs = [
        "data_efficiency.csv",
        "data_efficiency_summary.csv",
        "search_speedups.csv",
        "search_geomeans.csv",
        "search_ratios.csv",
    ];
    let mut run = Run::start(&a.out_dir, &outputs, a.force)?;
    let ck = load_pretrained(&mut run, &a.pretrained)?;
    let data = load_dataset(Some(&mut run), &a.data_dir)?;
    let fcfg = FeatureConfig::default();
    let train_set = examples(&data, &data.train, &fcfg)?;
    let valid_set = examples(&data, &data.valid, &fcfg)?;
    let test_set = examples(&data, &data.test, &fcfg)?;
    let meta = PretrainMeta::parse(&ck.meta)?;
    let xd = ExperimentData {
        train: &train_set,
        valid: &valid_set,
        test: &test_set,
        features: &fcfg,
        embedding_dim: meta.encoder.embedding_dim,
        pretrained: Some(&ck),
    };
    let cfg = ExperimentConfig {
        fractions: a.fractions.clone(),
        seeds: a.seeds.clone(),
        frontends: Frontend::ALL.to_vec(),
        train: TrainConfig {
            base_lr: a.lr,
            batch_size: a.batch_size,
            max_epochs: a.max_epochs,
            ..TrainConfig::default()
        },
        sample_budget: Some(a.sample_budget),
        min_epochs: a.min_epochs.min(a.max_epochs),
    };
    let rows = data_efficiency_experiment(&xd, &cfg, |r| {
        println!("{} fraction {} seed {}: test MAPE {:.2}%", r.variant, r.fraction, r.seed, r.test_mape);
    })?;
    write_csv(&run.path("data_efficiency.csv"), &rows)?;
    let summary: Vec<SummaryRow> = cell_summary(&rows)
        .into_iter()
        .map(|(variant, fraction, mean, spread)| SummaryRow {
            variant,
            fraction,
            mean_test_mape: mean,
            spread,
        })
        .collect();
    write_csv(&run.path("data_efficiency_summary.csv"), &summary)?;

    let seed = a.seeds.first().copied().unwrap_or(0);
    let (base, base_store, _) = train_cell(&xd, Frontend::Baseline, a.search_fraction, seed, &cfg)?;
    let (enc, enc_store, _) = train_cell(&xd, Frontend::EncoderPretrained, a.search_fraction, seed, &cfg)?;
    let machine = MachineConfig::default();
    let evaluators = vec![
        ("oracle".to_string(), Evaluator::Oracle(&machine)),
        (
            Frontend::Baseline.name().to_string(),
            Evaluator::Model {
                model: &base,
                store: &base_store,
            },
        ),
        (
            Frontend::EncoderPretrained.name().to_string(),
            Evaluator::Model {
                model: &enc,
                store: &enc_store,
            },
        ),
    ];
    let programs = test_programs(&data, a.search_programs);
    let scfg = SearchConfig {
        beam_width: a.beam,
        max_depth: a.depth,
    };
    let report = benchmark_models(&programs, &evaluators, &machine, &scfg)?;
    write_csv(&run.path("search_speedups.csv"), &report.rows)?;
    let geo: Vec<GeomeanRow> = report
        .geomeans
        .iter()
        .map(|(e, g)| GeomeanRow {
            evaluator: e.clone(),
            geomean_speedup: *g,
        })
        .collect();
    write_csv(&run.path("search_geomeans.csv"), &geo)?;
    write_csv(&run.path("search_ratios.csv"), &report.ratios)?;
    for g in &geo {
        println!("search geomean {}: {:.3}", g.evaluator, g.geomean_speedup);
    }
    for r in &report.ratios {
        println!("{} / {}: wins {}/{}, geomean ratio {:.2}", r.a, r.b, r.a_wins, r.programs, r.geomean_ratio);
    }
    run.finish(Command::Experiment(a.clone()))?;
    Ok(())
}

fn rerun(a: &RerunArgs) -> Result<()> {
    let original = manifest::load(&a.manifest)?;
    manifest::check_inputs(&original)?;
    let src_dir = a.manifest.parent().unwrap_or(Path::new("."));
    if fs::canonicalize(src_dir).ok() == fs::canonicalize(&a.out_dir).ok() {
        bail!("--out-dir must differ from the manifest's directory");
    }
    let mut cmd = original.command.clone();
    match &mut cmd {
        Command::Gen(c) => (c.out_dir, c.force) = (a.out_dir.clone(), a.force),
        Command::Pretrain(c) => (c.out_dir, c.force) = (a.out_dir.clone(), a.force),
        Command::Train(c) => (c.out_dir, c.force) = (a.out_dir.clone(), a.force),
        Command::Search(c) => (c.out_dir, c.force) = (a.out_dir.clone(), a.force),
        Command::Experiment(c) => (c.out_dir, c.force) = (a.out_dir.clone(), a.force),
        Command::Eval(_) | Command::Rerun(_) => bail!("manifest records a command that writes nothing"),
    }
    run(&cmd)?;
    let fresh = manifest::load(&a.out_dir.join(MANIFEST_FILE))?;
    let diff = manifest::diff_outputs(&original, &fresh);
    if !diff.is_empty() {
        bail!("outputs differ from the manifest: {}", diff.join(", "));
    }
    println!("reproduced {}/{} outputs", fresh.outputs.len(), original.outputs.len());
    Ok(())
}
