//! Task similarity from class attributes, labels or image features, and
//! the generator budget derived from it.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::registry::Registry;
use crate::util::fnv1a64;

const UNIT_NORM_TOL: f64 = 1e-6;

/// Outcome of a similarity query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Similarity {
    /// Nothing to compare against yet.
    NoHistory,
    Score(f64),
}

impl Similarity {
    pub fn value(self) -> Option<f64> {
        match self {
            Similarity::NoHistory => None,
            Similarity::Score(s) => Some(s),
        }
    }
}

/// `J_t = clamp(round_half_up((1 − sim)·J_max), 1, J_max)`; no history
/// gives `J_max`.
pub fn num_generators(sim: Similarity, j_max: usize) -> usize {
    match sim {
        Similarity::NoHistory => j_max,
        Similarity::Score(s) => {
            // The small slack keeps exact halves like (1 − 0.7)·5 from
            // rounding down through representation error.
            let raw = ((1.0 - s) * j_max as f64 + 0.5 + 1e-9).floor();
            (raw.max(1.0) as usize).clamp(1, j_max.max(1))
        }
    }
}

/// Mean over `current` of the best cosine against `pool`, clamped to
/// `[0, 1]`.
pub fn mean_max_similarity(current: &[Vec<f64>], pool: &[Vec<f64>]) -> Result<Similarity> {
    if current.is_empty() {
        return Err(Error::input("no current embeddings to compare"));
    }
    if pool.is_empty() {
        return Ok(Similarity::NoHistory);
    }
    let mut total = 0.0;
    for c in current {
        let mut best = f64::NEG_INFINITY;
        for p in pool {
            best = best.max(ops::cosine_similarity(c, p)?.value);
        }
        total += best;
    }
    Ok(Similarity::Score((total / current.len() as f64).clamp(0.0, 1.0)))
}

/// Attribute-embedding similarity of a task against the pool.
pub fn task_similarity(current: &[Vec<f64>], pool: &AttributePool) -> Result<Similarity> {
    let pool: Vec<Vec<f64>> = pool.records.iter().map(|r| r.embedding.clone()).collect();
    mean_max_similarity(current, &pool)
}

/// Similarity of per-class mean image features against earlier class means.
pub fn image_task_similarity(class_means: &[Vec<f64>], pool: &[Vec<f64>]) -> Result<Similarity> {
    mean_max_similarity(class_means, pool)
}

/// Similarity of class-label embeddings against earlier label embeddings.
pub fn class_label_similarity(
    labels: &[String],
    embedder: &Embedder,
    pool: &[Vec<f64>],
) -> Result<Similarity> {
    let current = labels.iter().map(|l| embedder.embed(l)).collect::<Result<Vec<_>>>()?;
    mean_max_similarity(&current, pool)
}

/// Text embedder: either a precomputed lookup table or hashed character
/// trigrams.
#[derive(Debug, Clone)]
pub enum Embedder {
    Deterministic { dim: usize },
    Table(HashMap<String, Vec<f64>>),
}

impl Embedder {
    pub fn deterministic(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        Ok(Embedder::Deterministic { dim })
    }

    /// Loads a JSON object mapping text to a unit vector.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let table: HashMap<String, Vec<f64>> =
            serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        for (text, v) in &table {
            check_unit(v, text)?;
        }
        Ok(Embedder::Table(table))
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.is_empty() {
            return Err(Error::input("cannot embed empty text"));
        }
        match self {
            Embedder::Table(t) => t
                .get(text)
                .cloned()
                .ok_or_else(|| Error::Lookup(format!("no embedding for `{text}`"))),
            Embedder::Deterministic { dim } => Ok(trigram_embedding(text, *dim)),
        }
    }
}

/// Lowercased character trigrams hashed with FNV-1a into `dim` buckets,
/// counted and L2-normalized. Texts shorter than three characters count as
/// a single gram.
pub fn trigram_embedding(text: &str, dim: usize) -> Vec<f64> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut v = vec![0.0; dim];
    let mut bump = |gram: &[char]| {
        let s: String = gram.iter().collect();
        v[(fnv1a64(s.as_bytes()) % dim as u64) as usize] += 1.0;
    };
    if chars.len() < 3 {
        bump(&chars);
    } else {
        chars.windows(3).for_each(&mut bump);
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::input(format!("embedding for `{what}` has norm {n}, expected 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassAttributes {
    pub name: String,
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskAttributes {
    pub id: usize,
    pub classes: Vec<ClassAttributes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeFile {
    pub tasks: Vec<TaskAttributes>,
}

impl AttributeFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let mut dim = None;
        for t in &self.tasks {
            if t.classes.is_empty() {
                return Err(Error::input(format!("task {} lists no classes", t.id)));
            }
            for c in &t.classes {
                if c.attributes.is_empty() {
                    return Err(Error::input(format!("class `{}` has no attributes", c.name)));
                }
                let Some(emb) = &c.embeddings else { continue };
                if emb.len() != c.attributes.len() {
                    return Err(Error::input(format!(
                        "class `{}` has {} embeddings for {} attributes",
                        c.name,
                        emb.len(),
                        c.attributes.len()
                    )));
                }
                for (e, a) in emb.iter().zip(&c.attributes) {
                    if *dim.get_or_insert(e.len()) != e.len() {
                        return Err(Error::dim("attribute embeddings differ in length"));
                    }
                    check_unit(e, a)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeRecord {
    pub task_id: usize,
    pub class_name: String,
    pub attribute_text: String,
    pub embedding: Vec<f64>,
}

/// Append-only store of attribute embeddings of all committed tasks.
#[derive(Debug, Clone, Default)]
pub struct AttributePool {
    records: Vec<AttributeRecord>,
}

impl AttributePool {
    pub fn records(&self) -> &[AttributeRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = AttributeRecord>) {
        self.records.extend(records);
    }
}

/// Attribute records for one task, using explicit embeddings when present.
pub fn embed_task(task: &TaskAttributes, embedder: &Embedder) -> Result<Vec<AttributeRecord>> {
    let mut out = Vec::new();
    for c in &task.classes {
        for (i, a) in c.attributes.iter().enumerate() {
            let embedding = match &c.embeddings {
                Some(e) => e[i].clone(),
                None => embedder.embed(a)?,
            };
            out.push(AttributeRecord {
                task_id: task.id,
                class_name: c.name.clone(),
                attribute_text: a.clone(),
                embedding,
            });
        }
    }
    Ok(out)
}

/// What a strategy may inspect about an incoming task.
pub struct TaskEvidence<'a> {
    pub attributes: &'a TaskAttributes,
    /// Per-class mean final-CLS features; present when the strategy asks
    /// for them.
    pub class_means: Option<&'a [Vec<f64>]>,
}

/// Scores a task against history, then absorbs it once budgeting is done.
pub trait SimilarityStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn needs_image_features(&self) -> bool {
        false
    }

    fn score(&self, task: &TaskEvidence) -> Result<Similarity>;

    fn commit(&mut self, task: &TaskEvidence) -> Result<()>;
}

pub struct AttributeSimilarity {
    embedder: Embedder,
    pool: AttributePool,
}

impl AttributeSimilarity {
    pub fn new(embedder: Embedder) -> Self {
        Self {
            embedder,
            pool: AttributePool::default(),
        }
    }

    pub fn pool(&self) -> &AttributePool {
        &self.pool
    }
}

impl SimilarityStrategy for AttributeSimilarity {
    fn name(&self) -> &'static str {
        "attribute"
    }

    fn score(&self, task: &TaskEvidence) -> Result<Similarity> {
        let records = embed_task(task.attributes, &self.embedder)?;
        let current: Vec<Vec<f64>> = records.into_iter().map(|r| r.embedding).collect();
        task_similarity(&current, &self.pool)
    }

    fn commit(&mut self, task: &TaskEvidence) -> Result<()> {
        let records = embed_task(task.attributes, &self.embedder)?;
        self.pool.extend(records);
        Ok(())
    }
}

pub struct ClassLabelSimilarity {
    embedder: Embedder,
    pool: Vec<Vec<f64>>,
}

impl ClassLabelSimilarity {
    pub fn new(embedder: Embedder) -> Self {
        Self {
            embedder,
            pool: Vec::new(),
        }
    }

    fn labels(task: &TaskEvidence) -> Vec<String> {
        task.attributes.classes.iter().map(|c| c.name.clone()).collect()
    }
}

impl SimilarityStrategy for ClassLabelSimilarity {
    fn name(&self) -> &'static str {
        "class_label"
    }

    fn score(&self, task: &TaskEvidence) -> Result<Similarity> {
        class_label_similarity(&Self::labels(task), &self.embedder, &self.pool)
    }

    fn commit(&mut self, task: &TaskEvidence) -> Result<()> {
        for l in Self::labels(task) {
            self.pool.push(self.embedder.embed(&l)?);
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct ImageSimilarity {
    pool: Vec<Vec<f64>>,
}

impl ImageSimilarity {
    fn means<'a>(task: &'a TaskEvidence) -> Result<&'a [Vec<f64>]> {
        task.class_means
            .ok_or_else(|| Error::input("image similarity needs class feature means"))
    }
}

impl SimilarityStrategy for ImageSimilarity {
    fn name(&self) -> &'static str {
        "image"
    }

    fn needs_image_features(&self) -> bool {
        true
    }

    fn score(&self, task: &TaskEvidence) -> Result<Similarity> {
        image_task_similarity(Self::means(task)?, &self.pool)
    }

    fn commit(&mut self, task: &TaskEvidence) -> Result<()> {
        self.pool.extend_from_slice(Self::means(task)?);
        Ok(())
    }
}

/// Ignores history so every task receives the full budget.
pub struct FixedBudget;

impl SimilarityStrategy for FixedBudget {
    fn name(&self) -> &'static str {
        "fixed"
    }

    fn score(&self, _: &TaskEvidence) -> Result<Similarity> {
        Ok(Similarity::NoHistory)
    }

    fn commit(&mut self, _: &TaskEvidence) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderConfig {
    Deterministic,
    /// JSON table of text → unit vector.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    /// Registered strategy name: attribute, class_label, image or fixed.
    pub mode: String,
    pub embedder: EmbedderConfig,
    pub embedding_dim: usize,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            mode: "attribute".into(),
            embedder: EmbedderConfig::Deterministic,
            embedding_dim: 64,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if !strategies().contains(&self.mode) {
            return Err(Error::config(format!(
                "unknown similarity mode `{}` (expected one of {:?})",
                self.mode,
                strategies().names()
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::config("similarity.embedding_dim must be positive"));
        }
        Ok(())
    }

    pub fn build_embedder(&self) -> Result<Embedder> {
        match &self.embedder {
            EmbedderConfig::Deterministic => Embedder::deterministic(self.embedding_dim),
            EmbedderConfig::File(p) => Embedder::from_file(p),
        }
    }

    pub fn build(&self) -> Result<Box<dyn SimilarityStrategy>> {
        strategies().create(&self.mode, self)
    }
}

pub type StrategyRegistry = Registry<dyn SimilarityStrategy, SimilarityConfig>;

/// All built-in similarity strategies.
pub fn strategies() -> StrategyRegistry {
    let mut r = StrategyRegistry::new("similarity mode");
    r.register("attribute", |c| Ok(Box::new(AttributeSimilarity::new(c.build_embedder()?))))
        .register("class_label", |c| Ok(Box::new(ClassLabelSimilarity::new(c.build_embedder()?))))
        .register("image", |_| Ok(Box::new(ImageSimilarity::default())))
        .register("fixed", |_| Ok(Box::new(FixedBudget)));
    r
}

/// One row of a similarity report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetLine {
    pub task: usize,
    pub sim_t: Option<f64>,
    #[serde(rename = "J_t")]
    pub j_t: usize,
}

/// Runs a strategy over the tasks of an attribute file in order.
pub fn budget_report(
    file: &AttributeFile,
    strategy: &mut dyn SimilarityStrategy,
    j_max: usize,
) -> Result<Vec<BudgetLine>> {
    let mut out = Vec::with_capacity(file.tasks.len());
    for t in &file.tasks {
        let ev = TaskEvidence {
            attributes: t,
            class_means: None,
        };
        let sim = strategy.score(&ev)?;
        strategy.commit(&ev)?;
        out.push(BudgetLine {
            task: t.id,
            sim_t: sim.value(),
            j_t: num_generators(sim, j_max),
        });
    }
    Ok(out)
}
