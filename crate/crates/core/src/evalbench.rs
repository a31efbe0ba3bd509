//! Base/new evaluation and the synthetic ablation benchmark.
//!
//! The reference world is a fixed set of class embeddings: superclass
//! centers, base and new classes scattered around them, and unrelated
//! distractor classes attached to the tree as extra candidates. Real samples
//! are `embedding + shared domain residual + noise`. Each run seed draws its
//! own train/test data, generated data and batch order; the world itself
//! only depends on `world_seed`.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{sparse_train_epoch, AlignConfig};
use crate::error::{Error, Result};
use crate::math::{truncated_mmd, FeatureVector, Provenance, Sample, SampleSet};
use crate::model::{predict, ClassBank, PromptParams};
use crate::rng::{derive_seed, stream, StreamRng};
use crate::synthgen::{class_specs, synthesize_seen_extra, synthesize_unseen, NamedClass};
use crate::taxonomy::{
    build_tree, expand_candidates, predict_unseen, random_candidates, EmbeddedClass, SelectionMode,
};

/// The versioned reference benchmark configuration.
pub const REFERENCE_BENCHMARK_JSON: &str = include_str!("../fixtures/reference_benchmark.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_base: f64,
    pub acc_new: f64,
    pub h: f64,
    pub dis: f64,
    pub seed: u64,
    pub variant: String,
}

/// `2ab/(a+b)`, or 0 when either side is 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a > 0.0 && b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

fn accuracy(
    params: &PromptParams,
    bank: &ClassBank,
    test: &SampleSet,
    class_set: &[usize],
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let hits = test
        .samples()
        .par_iter()
        .map(|s| predict(&s.feature, params, bank, class_set).map(|c| (c == s.class_id) as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / test.len() as f64)
}

/// Accuracy on base and new test samples, each classified over the whole
/// open class set. `dis`, `seed` and `variant` are left for the caller.
pub fn evaluate(
    params: &PromptParams,
    bank: &ClassBank,
    test_base: &SampleSet,
    test_new: &SampleSet,
    open_class_set: &[usize],
) -> Result<EvalReport> {
    let acc_base = accuracy(params, bank, test_base, open_class_set)?;
    let acc_new = accuracy(params, bank, test_new, open_class_set)?;
    Ok(EvalReport {
        acc_base,
        acc_new,
        h: harmonic_mean(acc_base, acc_new),
        dis: 0.0,
        seed: 0,
        variant: String::new(),
    })
}

/// Plain-text table with one row per report (accuracies as fractions).
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = format!(
        "{:<12} {:>6} {:>6} {:>6} {:>6} {:>8}\n",
        "Variant", "Seed", "Base", "New", "H", "Dis"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<12} {:>6} {:>6.2} {:>6.2} {:>6.2} {:>8.4}\n",
            r.variant, r.seed, r.acc_base, r.acc_new, r.h, r.dis
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub mean_acc_base: f64,
    pub mean_acc_new: f64,
    pub mean_h: f64,
    pub mean_dis: f64,
}

/// Per-variant means, in order of first appearance.
pub fn summarize(reports: &[EvalReport]) -> Vec<VariantSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<&str, Vec<&EvalReport>> = HashMap::new();
    for r in reports {
        if !groups.contains_key(r.variant.as_str()) {
            order.push(r.variant.clone());
        }
        groups.entry(&r.variant).or_default().push(r);
    }
    order
        .into_iter()
        .map(|v| {
            let g = &groups[v.as_str()];
            let n = g.len() as f64;
            let mean = |f: fn(&EvalReport) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
            VariantSummary {
                runs: g.len(),
                mean_acc_base: mean(|r| r.acc_base),
                mean_acc_new: mean(|r| r.acc_new),
                mean_h: mean(|r| r.h),
                mean_dis: mean(|r| r.dis),
                variant: v,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub version: u32,
    pub world_seed: u64,
    pub d: usize,
    pub superclasses: usize,
    pub base_per_superclass: usize,
    pub new_per_superclass: usize,
    pub distractors: usize,
    /// Scale of the per-class offset from its superclass center.
    pub class_spread: f64,
    pub domain_residual_norm: f64,
    pub noise_sigma: f64,
    pub shots: usize,
    pub test_per_class: usize,
    pub gen_per_class: usize,
    pub gen_noise_sigma: f64,
    pub k0: usize,
    pub k1: usize,
    pub k2: usize,
    pub k3: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub period: usize,
    pub mmd_sigma: f64,
}

impl BenchmarkConfig {
    pub fn reference() -> Self {
        serde_json::from_str(REFERENCE_BENCHMARK_JSON).expect("bundled benchmark config parses")
    }

    pub fn align_config(&self) -> AlignConfig {
        AlignConfig {
            alpha: self.alpha,
            beta: self.beta,
            period: self.period,
            k3: self.k3,
            mmd_sigma: self.mmd_sigma,
            lr: self.lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassRole {
    Base,
    New,
    Distractor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldClass {
    pub id: usize,
    pub name: String,
    pub superclass: String,
    pub embedding: FeatureVector,
    pub role: ClassRole,
}

/// Fixed class layout shared by every run of a benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub classes: Vec<WorldClass>,
    pub residual: FeatureVector,
}

fn gaussian(rng: &mut StreamRng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(v: Vec<f64>) -> Result<FeatureVector> {
    FeatureVector::new(v)?.normalized()
}

impl World {
    pub fn build(cfg: &BenchmarkConfig) -> Result<Self> {
        if cfg.d == 0 || cfg.superclasses == 0 || cfg.base_per_superclass == 0 {
            return Err(Error::InvalidParams(
                "benchmark needs d, superclasses and base classes".into(),
            ));
        }
        let mut rng = stream(cfg.world_seed, "world", 0);
        let centers = (0..cfg.superclasses)
            .map(|_| unit(gaussian(&mut rng, cfg.d)).map(FeatureVector::into_inner))
            .collect::<Result<Vec<_>>>()?;
        let mut classes = Vec::new();
        for (role, per) in [
            (ClassRole::Base, cfg.base_per_superclass),
            (ClassRole::New, cfg.new_per_superclass),
        ] {
            let prefix = if role == ClassRole::Base {
                "base"
            } else {
                "new"
            };
            for (k, center) in centers.iter().enumerate() {
                for i in 0..per {
                    let z = gaussian(&mut rng, cfg.d);
                    let raw = center
                        .iter()
                        .zip(z)
                        .map(|(c, z)| c + cfg.class_spread * z)
                        .collect();
                    classes.push(WorldClass {
                        id: classes.len(),
                        name: format!("{prefix}_{k}_{i}"),
                        superclass: format!("super_{k}"),
                        embedding: unit(raw)?,
                        role,
                    });
                }
            }
        }
        for j in 0..cfg.distractors {
            classes.push(WorldClass {
                id: classes.len(),
                name: format!("distractor_{j}"),
                superclass: format!("super_{}", j % cfg.superclasses),
                embedding: unit(gaussian(&mut rng, cfg.d))?,
                role: ClassRole::Distractor,
            });
        }
        let dir = unit(gaussian(&mut rng, cfg.d))?;
        let residual = FeatureVector::new(
            dir.as_slice()
                .iter()
                .map(|v| v * cfg.domain_residual_norm)
                .collect(),
        )?;
        Ok(Self { classes, residual })
    }

    pub fn ids_with(&self, role: ClassRole) -> Vec<usize> {
        self.classes
            .iter()
            .filter(|c| c.role == role)
            .map(|c| c.id)
            .collect()
    }

    pub fn embeddings(&self) -> BTreeMap<usize, FeatureVector> {
        self.classes
            .iter()
            .map(|c| (c.id, c.embedding.clone()))
            .collect()
    }

    /// `n` real samples per class: `embedding + residual + σz`.
    pub fn draw(
        &self,
        ids: &[usize],
        n: usize,
        sigma: f64,
        rng: &mut StreamRng,
    ) -> Result<SampleSet> {
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            let e = self.classes[id].embedding.as_slice();
            for _ in 0..n {
                let v = e
                    .iter()
                    .zip(self.residual.as_slice())
                    .map(|(a, r)| a + r + sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                out.push(Sample {
                    feature: FeatureVector::new(v)?,
                    class_id: id,
                    provenance: Provenance::Seen,
                });
            }
        }
        SampleSet::new(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorMode {
    HighSim,
    LowSim,
    /// Uniform choice from the candidate pool, no similarity ranking.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainMode {
    /// Descriptors extracted from seen data.
    Residual,
    /// Class embedding plus noise only.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub predictor_mode: PredictorMode,
    pub domain_mode: DomainMode,
    pub alignment_on: bool,
}

/// Names accepted by [`VariantSpec::named`].
pub const VARIANT_NAMES: [&str; 5] = ["Ours", "w/o-da", "LowSim", "w/o-Tree", "no-domain"];

impl VariantSpec {
    pub fn named(name: &str) -> Result<Self> {
        let (predictor_mode, domain_mode, alignment_on) = match name {
            "Ours" => (PredictorMode::HighSim, DomainMode::Residual, true),
            "w/o-da" => (PredictorMode::HighSim, DomainMode::Residual, false),
            "LowSim" => (PredictorMode::LowSim, DomainMode::Residual, true),
            "w/o-Tree" => (PredictorMode::Random, DomainMode::Residual, true),
            "no-domain" => (PredictorMode::HighSim, DomainMode::Plain, true),
            other => return Err(Error::UnknownVariant(other.to_string())),
        };
        Ok(Self {
            name: name.to_string(),
            predictor_mode,
            domain_mode,
            alignment_on,
        })
    }
}

/// Data shared by every variant of one seed.
#[derive(Debug, Clone)]
pub struct RunData {
    pub train: SampleSet,
    pub test_base: SampleSet,
    pub test_new: SampleSet,
}

impl RunData {
    pub fn draw(world: &World, cfg: &BenchmarkConfig, seed: u64) -> Result<Self> {
        let base = world.ids_with(ClassRole::Base);
        let new = world.ids_with(ClassRole::New);
        let train = world.draw(
            &base,
            cfg.shots,
            cfg.noise_sigma,
            &mut stream(seed, "bench.train", 0),
        )?;
        let mut test_rng = stream(seed, "bench.test", 0);
        let test_base = world.draw(&base, cfg.test_per_class, cfg.noise_sigma, &mut test_rng)?;
        let test_new = world.draw(&new, cfg.test_per_class, cfg.noise_sigma, &mut test_rng)?;
        Ok(Self {
            train,
            test_base,
            test_new,
        })
    }
}

/// Predicted unseen class ids plus generated data for one variant.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub predicted: Vec<usize>,
    pub gen_unseen: SampleSet,
    pub gen_seen: SampleSet,
}

pub fn generate_for_variant(
    world: &World,
    cfg: &BenchmarkConfig,
    data: &RunData,
    variant: &VariantSpec,
    seed: u64,
) -> Result<GeneratedData> {
    let base_ids = world.ids_with(ClassRole::Base);
    let seen_pairs: Vec<(String, String)> = base_ids
        .iter()
        .map(|&i| {
            (
                world.classes[i].name.clone(),
                world.classes[i].superclass.clone(),
            )
        })
        .collect();
    let pool: Vec<(String, String)> = world
        .classes
        .iter()
        .filter(|c| c.role != ClassRole::Base)
        .map(|c| (c.name.clone(), c.superclass.clone()))
        .collect();
    let tree = expand_candidates(&build_tree(&seen_pairs)?, &pool)?;
    let by_name: HashMap<&str, usize> = world
        .classes
        .iter()
        .map(|c| (c.name.as_str(), c.id))
        .collect();
    let names = match variant.predictor_mode {
        PredictorMode::Random => random_candidates(
            &tree,
            cfg.k0,
            &mut stream(seed, "bench.random_candidates", 0),
        ),
        mode => {
            let embedded: HashMap<String, EmbeddedClass> = world
                .classes
                .iter()
                .map(|c| {
                    EmbeddedClass::new(c.name.clone(), c.embedding.clone())
                        .map(|e| (c.name.clone(), e))
                })
                .collect::<Result<_>>()?;
            let sel = if mode == PredictorMode::HighSim {
                SelectionMode::HighSim
            } else {
                SelectionMode::LowSim
            };
            predict_unseen(&tree, &embedded, cfg.k0, sel)?
        }
    };
    let predicted: Vec<usize> = names.iter().map(|n| by_name[n.as_str()]).collect();

    let named = |id: usize| NamedClass {
        id,
        name: world.classes[id].name.clone(),
        embedding: world.classes[id].embedding.clone(),
    };
    let seen: Vec<NamedClass> = base_ids.iter().map(|&i| named(i)).collect();
    let unseen: Vec<NamedClass> = predicted.iter().map(|&i| named(i)).collect();
    let (unseen_specs, seen_specs) = class_specs(
        &seen,
        &unseen,
        &data.train,
        variant.domain_mode == DomainMode::Residual,
        cfg.k1,
        cfg.k2,
        cfg.gen_noise_sigma,
    )?;
    let gen_seed = derive_seed(seed, "bench.generate", 0);
    Ok(GeneratedData {
        predicted,
        gen_unseen: synthesize_unseen(&unseen_specs, cfg.gen_per_class, gen_seed)?,
        gen_seen: synthesize_seen_extra(&seen_specs, cfg.gen_per_class, gen_seed)?,
    })
}

/// Trains prompts from zero for `cfg.epochs` epochs. With alignment off the
/// weights are zeroed, which reduces every update to plain cross-entropy.
pub fn train_variant(
    world: &World,
    cfg: &BenchmarkConfig,
    data: &RunData,
    generated: &GeneratedData,
    alignment_on: bool,
    seed: u64,
) -> Result<(PromptParams, ClassBank, Vec<usize>)> {
    let bank = ClassBank::new(world.embeddings(), cfg.tau)?;
    let mut class_set = world.ids_with(ClassRole::Base);
    class_set.extend(&generated.predicted);
    let mut align = cfg.align_config();
    if !alignment_on {
        align.alpha = 0.0;
        align.beta = 0.0;
    }
    let mut params = PromptParams::zeros(cfg.d);
    for epoch in 0..cfg.epochs {
        params = sparse_train_epoch(
            &data.train,
            &generated.gen_unseen,
            &generated.gen_seen,
            &params,
            &bank,
            &class_set,
            &align,
            cfg.batch_size,
            derive_seed(seed, "train", epoch as u64),
        )?
        .0;
    }
    Ok((params, bank, class_set))
}

/// One variant at one seed, start to finish.
pub fn run_variant(
    world: &World,
    cfg: &BenchmarkConfig,
    data: &RunData,
    variant: &VariantSpec,
    seed: u64,
) -> Result<EvalReport> {
    let generated = generate_for_variant(world, cfg, data, variant, seed)?;
    let (params, bank, _) =
        train_variant(world, cfg, data, &generated, variant.alignment_on, seed)?;
    let mut open = world.ids_with(ClassRole::Base);
    open.extend(world.ids_with(ClassRole::New));
    let mut report = evaluate(&params, &bank, &data.test_base, &data.test_new, &open)?;
    let gen: Vec<&[f64]> = generated.gen_unseen.features();
    report.dis = truncated_mmd(&gen, &data.train.features(), cfg.mmd_sigma)?;
    report.seed = seed;
    report.variant = variant.name.clone();
    Ok(report)
}

/// Every variant at every seed, seed-major. Runs are independent and execute
/// in parallel; the output order does not depend on scheduling.
pub fn run_ablation(
    cfg: &BenchmarkConfig,
    variants: &[VariantSpec],
    seeds: &[u64],
) -> Result<Vec<EvalReport>> {
    if variants.is_empty() {
        return Err(Error::EmptyList);
    }
    let world = World::build(cfg)?;
    seeds
        .par_iter()
        .map(|&seed| {
            let data = RunData::draw(&world, cfg, seed)?;
            variants
                .iter()
                .map(|v| run_variant(&world, cfg, &data, v, seed))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(0.8, 0.6) - 0.68571).abs() < 1e-5);
        assert_eq!(harmonic_mean(0.7, 0.7), 0.7);
        assert_eq!(harmonic_mean(0.9, 0.0), 0.0);
        for (a, b) in [(0.1, 0.9), (0.5, 0.55), (0.99, 0.3)] {
            let h = harmonic_mean(a, b);
            assert!(h <= f64::min(a, b) + (a - b).abs());
            assert!(h <= (a * b).sqrt() + 1e-15 && (a * b).sqrt() <= (a + b) / 2.0);
        }
    }

    #[test]
    fn unknown_variant() {
        assert_eq!(
            VariantSpec::named("Ours+"),
            Err(Error::UnknownVariant("Ours+".into()))
        );
        for n in VARIANT_NAMES {
            assert_eq!(VariantSpec::named(n).unwrap().name, n);
        }
    }

    #[test]
    fn reference_world_layout() {
        let cfg = BenchmarkConfig::reference();
        let w = World::build(&cfg).unwrap();
        assert_eq!(w.ids_with(ClassRole::Base).len(), 8);
        assert_eq!(w.ids_with(ClassRole::New).len(), 8);
        assert!((w.residual.norm() - cfg.domain_residual_norm).abs() < 1e-12);
        assert_eq!(w, World::build(&cfg).unwrap());
    }

    #[test]
    fn table_matches_reports() {
        let r = EvalReport {
            acc_base: 0.8125,
            acc_new: 0.604,
            h: harmonic_mean(0.8125, 0.604),
            dis: 0.1,
            seed: 3,
            variant: "Ours".into(),
        };
        let t = format_table(std::slice::from_ref(&r));
        let row: Vec<&str> = t.lines().nth(1).unwrap().split_whitespace().collect();
        assert_eq!(row[2], format!("{:.2}", r.acc_base));
        assert_eq!(row[3], format!("{:.2}", r.acc_new));
        assert_eq!(row[4], format!("{:.2}", r.h));
    }

    #[test]
    fn ablation_wiring_is_deterministic() {
        let cfg = BenchmarkConfig {
            epochs: 2,
            test_per_class: 10,
            ..BenchmarkConfig::reference()
        };
        let variants = [
            VariantSpec::named("Ours").unwrap(),
            VariantSpec::named("w/o-da").unwrap(),
        ];
        let a = run_ablation(&cfg, &variants, &[7]).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!((a[0].seed, a[1].seed), (7, 7));
        assert_eq!(
            (a[0].variant.as_str(), a[1].variant.as_str()),
            ("Ours", "w/o-da")
        );
        // same generated data, so the same distance
        assert_eq!(a[0].dis, a[1].dis);
        assert_eq!(a, run_ablation(&cfg, &variants, &[7]).unwrap());
        assert_eq!(run_ablation(&cfg, &[], &[7]), Err(Error::EmptyList));
    }

    #[test]
    fn evaluate_rejects_empty_sets() {
        let bank = ClassBank::from_raw(
            BTreeMap::from([(0, FeatureVector::new(vec![1.0, 0.0]).unwrap())]),
            0.1,
        )
        .unwrap();
        let p = PromptParams::zeros(2);
        assert_eq!(
            evaluate(&p, &bank, &SampleSet::empty(), &SampleSet::empty(), &[0]),
            Err(Error::EmptyTestSet)
        );
    }
}
