use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ovl_core::alignment::{sparse_train_epoch, AlignConfig};
use ovl_core::bounds::{verify_joint_bound, verify_posterior_bound, BoundCheckReport};
use ovl_core::dataset::{reference_files, ClassEntry, DatasetFile, Role, TaxonomyFile, Vocabulary};
use ovl_core::evalbench::{
    evaluate, format_table, run_ablation, summarize, BenchmarkConfig, VariantSpec,
};
use ovl_core::model::{ClassBank, PromptParams};
use ovl_core::rng::derive_seed;
use ovl_core::synthgen::{class_specs, synthesize_seen_extra, synthesize_unseen, NamedClass};
use ovl_core::taxonomy::{
    build_tree, expand_candidates, predict_unseen, EmbeddedClass, SelectionMode,
};
use ovl_core::{FeatureVector, Provenance, SampleSet};

use super::config::{Domain, RunConfig, Selection};
use super::{
    read, write, AblateArgs, CliError, EvalArgs, FixtureArgs, GenerateArgs, JointArgs,
    PosteriorArgs, TrainArgs,
};

const SEED_ENV: &str = "OVL_SEED";

/// Flag, then environment, then config.
fn resolve_seed(flag: Option<u64>, config: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV} is not an unsigned integer: {v:?}"))),
        Err(_) => Ok(config),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn pick(flag: &Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| config.clone())
        .ok_or_else(|| CliError::Usage(format!("no {what} path given (flag or config)")))
}

fn emit_json(out: Option<&Path>, json: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write(p, json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn gate(report: &BoundCheckReport, out: Option<&Path>) -> Result<(), CliError> {
    emit_json(out, &(report.to_json() + "\n"))?;
    if report.passes() {
        Ok(())
    } else {
        Err(CliError::Gate {
            rate: report.violation_rate,
            delta: report.delta,
        })
    }
}

pub fn verify_joint(a: &JointArgs) -> Result<(), CliError> {
    let seed = resolve_seed(a.seed, 0)?;
    let report = verify_joint_bound(a.alphabet, a.m, a.delta, a.trials, a.epsilon, seed)?;
    gate(&report, a.out.as_deref())
}

pub fn verify_posterior(a: &PosteriorArgs) -> Result<(), CliError> {
    let seed = resolve_seed(a.seed, 0)?;
    let report = verify_posterior_bound(a.n_yu, a.n_ye, a.m, a.delta, a.trials, seed)?;
    gate(&report, a.out.as_deref())
}

fn load_benchmark(path: Option<&Path>) -> Result<BenchmarkConfig, CliError> {
    match path {
        None => Ok(BenchmarkConfig::reference()),
        Some(p) => serde_json::from_str(&read(p)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display()))),
    }
}

pub fn fixture(a: &FixtureArgs) -> Result<(), CliError> {
    let bench = load_benchmark(a.benchmark.as_deref())?;
    let seed = resolve_seed(a.seed, 0)?;
    let (train, test, taxonomy) = reference_files(&bench, seed)?;
    let config = RunConfig {
        seed,
        d: Some(bench.d),
        tau: bench.tau,
        alpha: bench.alpha,
        beta: bench.beta,
        k0: bench.k0,
        k1: bench.k1,
        k2: bench.k2,
        k3: bench.k3,
        period: bench.period,
        lr: bench.lr,
        batch_size: bench.batch_size,
        epochs: bench.epochs,
        mmd_sigma: bench.mmd_sigma,
        noise_sigma: bench.gen_noise_sigma,
        gen_per_class: bench.gen_per_class,
        selection: Selection::HighSim,
        domain: Domain::Residual,
        taxonomy: Some("taxonomy.json".into()),
        dataset: Some("train.json".into()),
        generated: Some("generated.json".into()),
        test: Some("test.json".into()),
        output: Some("run".into()),
    };
    write(&a.out_dir.join("train.json"), &train.to_json())?;
    write(&a.out_dir.join("test.json"), &test.to_json())?;
    write(&a.out_dir.join("taxonomy.json"), &taxonomy.to_json())?;
    write(&a.out_dir.join("config.json"), &config.to_json())
}

fn check_dim(cfg: &RunConfig, d: usize) -> Result<(), CliError> {
    match cfg.d {
        Some(want) if want != d => Err(CliError::Usage(format!(
            "config says d = {want}, data has d = {d}"
        ))),
        _ => Ok(()),
    }
}

pub fn generate(a: &GenerateArgs) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let seed = resolve_seed(a.seed, cfg.seed)?;
    let k0 = a.k0.unwrap_or(cfg.k0);
    let taxonomy = TaxonomyFile::from_json(&read(&pick(&a.taxonomy, &cfg.taxonomy, "taxonomy")?)?)?;
    let train = DatasetFile::from_json(&read(&pick(&a.dataset, &cfg.dataset, "dataset")?)?)?;
    let out = pick(&a.out, &cfg.generated, "output")?;
    check_dim(&cfg, train.meta.d)?;

    let pairs = |entries: &[ovl_core::dataset::TaxonomyEntry]| -> Vec<(String, String)> {
        entries
            .iter()
            .map(|e| (e.name.clone(), e.superclass.clone()))
            .collect()
    };
    let tree = expand_candidates(
        &build_tree(&pairs(&taxonomy.seen))?,
        &pairs(&taxonomy.candidates),
    )?;
    let embedded: HashMap<String, EmbeddedClass> = taxonomy
        .seen
        .iter()
        .chain(&taxonomy.candidates)
        .map(|e| {
            Ok((
                e.name.clone(),
                EmbeddedClass::new(e.name.clone(), FeatureVector::new(e.embedding.clone())?)?,
            ))
        })
        .collect::<Result<_, ovl_core::Error>>()?;
    let mode = match cfg.selection {
        Selection::HighSim => SelectionMode::HighSim,
        Selection::LowSim => SelectionMode::LowSim,
    };
    let predicted = predict_unseen(&tree, &embedded, k0, mode)?;

    let new_entries: Vec<ClassEntry> = predicted
        .iter()
        .map(|n| ClassEntry {
            name: n.clone(),
            superclass: tree.parent_of(n).unwrap_or_default().to_string(),
            embedding: embedded[n].embedding.as_slice().to_vec(),
            role: Role::New,
        })
        .collect();
    let mut vocab = Vocabulary::new();
    vocab.extend(&train.classes)?;
    vocab.extend(&new_entries)?;
    let seen_set = vocab.sample_set(&train)?;
    let named = |entries: &[ClassEntry]| -> Result<Vec<NamedClass>, CliError> {
        entries
            .iter()
            .map(|c| {
                Ok(NamedClass {
                    id: vocab.id(&c.name)?,
                    name: c.name.clone(),
                    embedding: FeatureVector::new(c.embedding.clone())?.normalized()?,
                })
            })
            .collect()
    };
    let (unseen_specs, seen_specs) = class_specs(
        &named(&train.classes)?,
        &named(&new_entries)?,
        &seen_set,
        cfg.domain == Domain::Residual,
        cfg.k1,
        cfg.k2,
        cfg.noise_sigma,
    )?;
    let gen_seed = derive_seed(seed, "generate", 0);
    let samples = synthesize_unseen(&unseen_specs, cfg.gen_per_class, gen_seed)?.concat(
        &synthesize_seen_extra(&seen_specs, cfg.gen_per_class, gen_seed)?,
    )?;
    let classes = [train.classes.clone(), new_entries].concat();
    let file = DatasetFile::from_samples(train.meta.d, classes, &samples, &vocab.names_by_id())?;
    write(&out, &file.to_json())
}

fn split_generated(set: &SampleSet) -> (SampleSet, SampleSet) {
    let pick = |p: Provenance| {
        let idx: Vec<usize> = (0..set.len())
            .filter(|&i| set.samples()[i].provenance == p)
            .collect();
        set.select(&idx)
    };
    (
        pick(Provenance::GeneratedUnseen),
        pick(Provenance::GeneratedSeen),
    )
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let seed = resolve_seed(a.seed, cfg.seed)?;
    let train = DatasetFile::from_json(&read(&pick(&a.dataset, &cfg.dataset, "dataset")?)?)?;
    let generated =
        DatasetFile::from_json(&read(&pick(&a.generated, &cfg.generated, "generated")?)?)?;
    let out_dir = pick(&a.out_dir, &cfg.output, "output")?;
    check_dim(&cfg, train.meta.d)?;
    if generated.meta.d != train.meta.d {
        return Err(CliError::Usage(
            "dataset and generated files differ in d".into(),
        ));
    }

    let mut vocab = Vocabulary::new();
    vocab.extend(&train.classes)?;
    vocab.extend(&generated.classes)?;
    let seen = vocab.sample_set(&train)?;
    let (gen_unseen, gen_seen) = split_generated(&vocab.sample_set(&generated)?);
    let mut class_set: Vec<usize> = train
        .classes
        .iter()
        .map(|c| vocab.id(&c.name))
        .collect::<Result<_, _>>()?;
    for c in generated.classes.iter().filter(|c| c.role == Role::New) {
        let id = vocab.id(&c.name)?;
        if !class_set.contains(&id) {
            class_set.push(id);
        }
    }
    let bank = ClassBank::from_raw(vocab.embeddings().clone(), cfg.tau)?;
    let align = AlignConfig {
        alpha: a.alpha.unwrap_or(cfg.alpha),
        beta: a.beta.unwrap_or(cfg.beta),
        period: cfg.period,
        k3: cfg.k3,
        mmd_sigma: cfg.mmd_sigma,
        lr: cfg.lr,
    };
    align.validate()?;

    let mut params = PromptParams::zeros(train.meta.d);
    let mut metrics = String::new();
    for epoch in 0..a.epochs.unwrap_or(cfg.epochs) {
        let (p, m) = sparse_train_epoch(
            &seen,
            &gen_unseen,
            &gen_seen,
            &params,
            &bank,
            &class_set,
            &align,
            cfg.batch_size,
            derive_seed(seed, "train", epoch as u64),
        )?;
        params = p;
        metrics.push_str(&m.to_json_lines());
    }
    let checkpoint = serde_json::to_string_pretty(&params).expect("params serialize") + "\n";
    write(&out_dir.join("checkpoint.json"), &checkpoint)?;
    write(&out_dir.join("metrics.jsonl"), &metrics)
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let seed = resolve_seed(a.seed, cfg.seed)?;
    let checkpoint = match (&a.checkpoint, &cfg.output) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.join("checkpoint.json"),
        (None, None) => return Err(CliError::Usage("no checkpoint path given".into())),
    };
    let params: PromptParams = serde_json::from_str(&read(&checkpoint)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", checkpoint.display())))?;
    let test = DatasetFile::from_json(&read(&pick(&a.test, &cfg.test, "test")?)?)?;
    if params.dim() != test.meta.d {
        return Err(CliError::Usage(
            "checkpoint and test data differ in d".into(),
        ));
    }
    let mut vocab = Vocabulary::new();
    vocab.extend(&test.classes)?;
    let samples = vocab.sample_set(&test)?;
    let by_role = |role: Role| {
        let ids = vocab.ids_with(role);
        let idx: Vec<usize> = (0..samples.len())
            .filter(|&i| ids.contains(&samples.samples()[i].class_id))
            .collect();
        samples.select(&idx)
    };
    let open: Vec<usize> = vocab.embeddings().keys().copied().collect();
    let bank = ClassBank::from_raw(vocab.embeddings().clone(), cfg.tau)?;
    let mut report = evaluate(
        &params,
        &bank,
        &by_role(Role::Base),
        &by_role(Role::New),
        &open,
    )?;
    report.seed = seed;
    report.variant = "eval".into();
    if let (Some(ds), Some(gen)) = (&cfg.dataset, &cfg.generated) {
        report.dis = dis_from_files(ds, gen, cfg.mmd_sigma)?;
    }
    let out = a
        .out
        .clone()
        .or_else(|| cfg.output.as_ref().map(|d| d.join("eval.json")));
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match out {
        Some(p) => {
            write(&p, &json)?;
            print!("{}", format_table(std::slice::from_ref(&report)));
        }
        None => print!("{json}"),
    }
    Ok(())
}

/// MMD between generated-unseen features and the training features.
fn dis_from_files(dataset: &Path, generated: &Path, sigma: f64) -> Result<f64, CliError> {
    let train = DatasetFile::from_json(&read(dataset)?)?;
    let gen = DatasetFile::from_json(&read(generated)?)?;
    let mut vocab = Vocabulary::new();
    vocab.extend(&train.classes)?;
    vocab.extend(&gen.classes)?;
    let (gen_unseen, _) = split_generated(&vocab.sample_set(&gen)?);
    let seen = vocab.sample_set(&train)?;
    let n = gen_unseen.len().min(seen.len());
    if n == 0 {
        return Ok(0.0);
    }
    let owned = |s: &SampleSet| -> Vec<FeatureVector> {
        s.samples()[..n].iter().map(|x| x.feature.clone()).collect()
    };
    Ok(ovl_core::mmd(&owned(&gen_unseen), &owned(&seen), sigma)?)
}

pub fn ablate(a: &AblateArgs) -> Result<(), CliError> {
    let bench = load_benchmark(a.benchmark.as_deref())?;
    let variants = a
        .variants
        .iter()
        .map(|n| VariantSpec::named(n))
        .collect::<Result<Vec<_>, _>>()?;
    let reports = run_ablation(&bench, &variants, &a.seeds)?;
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n";
    match &a.out {
        Some(p) => {
            write(p, &json)?;
            print!("{}", format_table(&reports));
            for s in summarize(&reports) {
                println!(
                    "{:<12} {:>6} {:>6.2} {:>6.2} {:>6.2} {:>8.4}",
                    s.variant, "mean", s.mean_acc_base, s.mean_acc_new, s.mean_h, s.mean_dis
                );
            }
        }
        None => print!("{json}"),
    }
    Ok(())
}
