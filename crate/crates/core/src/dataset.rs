//! JSON file formats shared by the command-line tools.
//!
//! Samples refer to classes by name; ids are assigned when files are loaded
//! into a [`Vocabulary`], in order of first appearance.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalbench::{BenchmarkConfig, ClassRole, RunData, World};
use crate::math::{FeatureVector, Provenance, Sample, SampleSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub d: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Base,
    New,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub name: String,
    pub superclass: String,
    pub embedding: Vec<f64>,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub class: String,
    pub feature: Vec<f64>,
    pub provenance: Provenance,
}

/// `{"meta":{"d"}, "classes":[...], "samples":[...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub meta: Meta,
    pub classes: Vec<ClassEntry>,
    pub samples: Vec<SampleEntry>,
}

fn schema<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Schema(msg.into()))
}

fn check_vector(what: &str, v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return schema(format!("{what}: expected {d} values, got {}", v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return schema(format!("{what}: non-finite value"));
    }
    Ok(())
}

impl DatasetFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        file.validate()?;
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.meta.d;
        let mut names = HashMap::new();
        for c in &self.classes {
            check_vector(&format!("class {}", c.name), &c.embedding, d)?;
            if names.insert(c.name.as_str(), ()).is_some() {
                return Err(Error::DuplicateClass(c.name.clone()));
            }
        }
        for (i, s) in self.samples.iter().enumerate() {
            check_vector(&format!("sample {i}"), &s.feature, d)?;
            if !names.contains_key(s.class.as_str()) {
                return schema(format!("sample {i} refers to unknown class {}", s.class));
            }
        }
        Ok(())
    }

    /// Builds a file from id-keyed samples.
    pub fn from_samples(
        d: usize,
        classes: Vec<ClassEntry>,
        samples: &SampleSet,
        names: &BTreeMap<usize, String>,
    ) -> Result<Self> {
        let samples = samples
            .samples()
            .iter()
            .map(|s| {
                Ok(SampleEntry {
                    class: names
                        .get(&s.class_id)
                        .cloned()
                        .ok_or(Error::UnknownClass(s.class_id))?,
                    feature: s.feature.as_slice().to_vec(),
                    provenance: s.provenance,
                })
            })
            .collect::<Result<_>>()?;
        let file = Self {
            meta: Meta { d },
            classes,
            samples,
        };
        file.validate()?;
        Ok(file)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyEntry {
    pub name: String,
    pub superclass: String,
    pub embedding: Vec<f64>,
}

/// `{"seen":[...], "candidates":[...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyFile {
    pub seen: Vec<TaxonomyEntry>,
    pub candidates: Vec<TaxonomyEntry>,
}

impl TaxonomyFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        let d = file.seen.first().map_or(0, |e| e.embedding.len());
        for e in file.seen.iter().chain(&file.candidates) {
            check_vector(&format!("class {}", e.name), &e.embedding, d)?;
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("taxonomy serializes") + "\n"
    }
}

/// Name-to-id mapping with the embedding of every class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    names: Vec<String>,
    ids: HashMap<String, usize>,
    embeddings: BTreeMap<usize, FeatureVector>,
    roles: BTreeMap<usize, Role>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds classes not seen before. A repeated name must carry the same
    /// embedding.
    pub fn extend(&mut self, classes: &[ClassEntry]) -> Result<()> {
        for c in classes {
            let emb = FeatureVector::new(c.embedding.clone())?;
            match self.ids.get(&c.name) {
                Some(&id) if self.embeddings[&id] != emb => {
                    return Err(Error::NameCollision(c.name.clone()))
                }
                Some(_) => {}
                None => {
                    let id = self.names.len();
                    self.names.push(c.name.clone());
                    self.ids.insert(c.name.clone(), id);
                    self.embeddings.insert(id, emb);
                    self.roles.insert(id, c.role);
                }
            }
        }
        Ok(())
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("unknown class {name}")))
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names_by_id(&self) -> BTreeMap<usize, String> {
        self.names.iter().cloned().enumerate().collect()
    }

    pub fn embeddings(&self) -> &BTreeMap<usize, FeatureVector> {
        &self.embeddings
    }

    pub fn ids_with(&self, role: Role) -> Vec<usize> {
        self.roles
            .iter()
            .filter(|(_, r)| **r == role)
            .map(|(id, _)| *id)
            .collect()
    }

    /// Samples of `file` as an id-keyed set; classes must already be known.
    pub fn sample_set(&self, file: &DatasetFile) -> Result<SampleSet> {
        let samples = file
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    feature: FeatureVector::new(s.feature.clone())?,
                    class_id: self.id(&s.class)?,
                    provenance: s.provenance,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SampleSet::new(samples)
    }
}

/// Benchmark world exported as files: training data (base classes only),
/// test data (base and new classes) and the taxonomy with the candidate
/// pool (new classes and distractors).
pub fn reference_files(
    cfg: &BenchmarkConfig,
    seed: u64,
) -> Result<(DatasetFile, DatasetFile, TaxonomyFile)> {
    let world = World::build(cfg)?;
    let data = RunData::draw(&world, cfg, seed)?;
    let entry = |id: usize, role: Role| {
        let c = &world.classes[id];
        ClassEntry {
            name: c.name.clone(),
            superclass: c.superclass.clone(),
            embedding: c.embedding.as_slice().to_vec(),
            role,
        }
    };
    let names: BTreeMap<usize, String> = world
        .classes
        .iter()
        .map(|c| (c.id, c.name.clone()))
        .collect();
    let base: Vec<ClassEntry> = world
        .ids_with(ClassRole::Base)
        .into_iter()
        .map(|i| entry(i, Role::Base))
        .collect();
    let new: Vec<ClassEntry> = world
        .ids_with(ClassRole::New)
        .into_iter()
        .map(|i| entry(i, Role::New))
        .collect();
    let train = DatasetFile::from_samples(cfg.d, base.clone(), &data.train, &names)?;
    let test_samples = data.test_base.concat(&data.test_new)?;
    let test = DatasetFile::from_samples(cfg.d, [base, new].concat(), &test_samples, &names)?;
    let tax = |c: &crate::evalbench::WorldClass| TaxonomyEntry {
        name: c.name.clone(),
        superclass: c.superclass.clone(),
        embedding: c.embedding.as_slice().to_vec(),
    };
    let taxonomy = TaxonomyFile {
        seen: world
            .classes
            .iter()
            .filter(|c| c.role == ClassRole::Base)
            .map(tax)
            .collect(),
        candidates: world
            .classes
            .iter()
            .filter(|c| c.role != ClassRole::Base)
            .map(tax)
            .collect(),
    };
    Ok((train, test, taxonomy))
}
