//! Continual-learning methods selectable by name.

use std::collections::BTreeMap;

use crate::autograd::Var;
use crate::backbone::{Backbone, BackboneConfig, LayerPrefix, NoPrompts, PrefixSet, PromptProvider, StaticPrefixes};
use crate::error::{Error, Result};
use crate::ops;
use crate::prompt::{PromptConfig, PromptEngine, PromptParamCounts, SharedSnapshot};
use crate::registry::Registry;
use crate::session::{Parameterized, Session};
use crate::tensor::Tensor;
use crate::util::derive_rng;

/// What a method factory receives.
#[derive(Debug, Clone)]
pub struct MethodArgs {
    pub backbone: BackboneConfig,
    pub prompt: PromptConfig,
    pub seed: u64,
}

/// A way of adapting the backbone across tasks. Parameters visited through
/// [`Parameterized`] are the method's own; the trainer handles the backbone
/// and classifier.
pub trait ContinualMethod: Parameterized + Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the generator budget comes from task similarity.
    fn uses_similarity(&self) -> bool {
        false
    }

    /// Adjusts the backbone once, before the first task.
    fn configure_backbone(&self, _backbone: &mut Backbone) {}

    /// Prepares task `t` (1-based); `generators` is the budget `J_t`.
    fn begin_task(&mut self, t: usize, generators: usize) -> Result<()>;

    /// Drops per-task state such as the regularization snapshot.
    fn end_task(&mut self) {}

    fn provider(&self) -> &dyn PromptProvider;

    /// Regularization term for the current task, if any.
    fn regularizer<'m>(&'m self, s: &mut Session<'m>) -> Result<Option<Var>>;

    fn regularization_value(&self) -> Result<Option<f64>>;

    fn prompt_counts(&self) -> Option<PromptParamCounts> {
        None
    }

    fn generator_counts(&self) -> Vec<usize> {
        Vec::new()
    }

    fn engine(&self) -> Option<&PromptEngine> {
        None
    }
}

/// Convolutional prompts with similarity-budgeted generators.
pub struct ConvPromptMethod {
    engine: PromptEngine,
    snapshot: Option<SharedSnapshot>,
}

impl ConvPromptMethod {
    pub fn new(args: &MethodArgs) -> Result<Self> {
        Ok(Self {
            engine: PromptEngine::new(args.prompt.clone(), &args.backbone, args.seed)?,
            snapshot: None,
        })
    }

    pub fn engine_mut(&mut self) -> &mut PromptEngine {
        &mut self.engine
    }
}

impl Parameterized for ConvPromptMethod {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.engine.visit_params(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.engine.visit_params_mut(f)
    }
}

impl ContinualMethod for ConvPromptMethod {
    fn name(&self) -> &'static str {
        "convprompt"
    }

    fn uses_similarity(&self) -> bool {
        true
    }

    fn begin_task(&mut self, t: usize, generators: usize) -> Result<()> {
        self.snapshot = (t > 1).then(|| self.engine.snapshot_shared());
        self.engine.begin_task(t, generators)
    }

    fn end_task(&mut self) {
        self.snapshot = None;
    }

    fn provider(&self) -> &dyn PromptProvider {
        self.engine.make_provider()
    }

    fn regularizer<'m>(&'m self, s: &mut Session<'m>) -> Result<Option<Var>> {
        match &self.snapshot {
            Some(snap) => self.engine.regularization_graph(s, snap).map(Some),
            None => Ok(None),
        }
    }

    fn regularization_value(&self) -> Result<Option<f64>> {
        self.snapshot
            .as_ref()
            .map(|snap| self.engine.regularization_loss(snap))
            .transpose()
    }

    fn prompt_counts(&self) -> Option<PromptParamCounts> {
        Some(self.engine.param_counts())
    }

    fn generator_counts(&self) -> Vec<usize> {
        self.engine.generator_counts()
    }

    fn engine(&self) -> Option<&PromptEngine> {
        Some(&self.engine)
    }
}

/// Sequential fine-tuning of the whole backbone, no prompts.
pub struct SeqFtMethod;

impl Parameterized for SeqFtMethod {
    fn visit_params(&self, _: &mut dyn FnMut(&str, &Tensor)) {}
    fn visit_params_mut(&mut self, _: &mut dyn FnMut(&str, &mut Tensor)) {}
}

impl ContinualMethod for SeqFtMethod {
    fn name(&self) -> &'static str {
        "seq_ft"
    }

    fn configure_backbone(&self, backbone: &mut Backbone) {
        backbone.set_trainable(true);
    }

    fn begin_task(&mut self, _: usize, _: usize) -> Result<()> {
        Ok(())
    }

    fn provider(&self) -> &dyn PromptProvider {
        &NoPrompts
    }

    fn regularizer<'m>(&'m self, _: &mut Session<'m>) -> Result<Option<Var>> {
        Ok(None)
    }

    fn regularization_value(&self) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// Shared `l_p × d_h` prefixes learned directly, with the same L1 drift
/// penalty as the shared embeddings; no generators or weighting.
pub struct SeOnlyMethod {
    prefixes: StaticPrefixes,
    snapshot: Option<Vec<Tensor>>,
}

impl SeOnlyMethod {
    pub fn new(args: &MethodArgs) -> Result<Self> {
        args.prompt.validate(&args.backbone)?;
        let dh = args.backbone.head_dim();
        let lp = args.prompt.prompt_length;
        let bound = 1.0 / (dh as f64).sqrt();
        let mut rng = derive_rng(args.seed, "se_only", 0);
        let mut layers = BTreeMap::new();
        for &l in &args.prompt.prompted_layers {
            let mut mk = || {
                (0..args.backbone.heads)
                    .map(|_| Tensor::uniform(&[lp, dh], bound, &mut rng).trainable())
                    .collect::<Vec<_>>()
            };
            let keys = mk();
            let values = mk();
            layers.insert(l, LayerPrefix { keys, values });
        }
        Ok(Self {
            prefixes: StaticPrefixes(PrefixSet { layers }),
            snapshot: None,
        })
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.prefixes
            .0
            .layers
            .values()
            .flat_map(|p| p.keys.iter().chain(&p.values))
    }
}

impl Parameterized for SeOnlyMethod {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (l, p) in &self.prefixes.0.layers {
            for (h, (k, v)) in p.keys.iter().zip(&p.values).enumerate() {
                f(&format!("prefix.l{l}.h{h}.key"), k);
                f(&format!("prefix.l{l}.h{h}.value"), v);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (l, p) in self.prefixes.0.layers.iter_mut() {
            for (h, (k, v)) in p.keys.iter_mut().zip(p.values.iter_mut()).enumerate() {
                f(&format!("prefix.l{l}.h{h}.key"), k);
                f(&format!("prefix.l{l}.h{h}.value"), v);
            }
        }
    }
}

impl ContinualMethod for SeOnlyMethod {
    fn name(&self) -> &'static str {
        "se_only"
    }

    fn begin_task(&mut self, t: usize, _: usize) -> Result<()> {
        self.snapshot = (t > 1).then(|| self.tensors().map(Tensor::detached).collect());
        Ok(())
    }

    fn end_task(&mut self) {
        self.snapshot = None;
    }

    fn provider(&self) -> &dyn PromptProvider {
        &self.prefixes
    }

    fn regularizer<'m>(&'m self, s: &mut Session<'m>) -> Result<Option<Var>> {
        let Some(snap) = &self.snapshot else {
            return Ok(None);
        };
        let mut total: Option<Var> = None;
        for (live, target) in self.tensors().zip(snap) {
            let v = s.param(live);
            let d = s.graph.l1_distance(v, target)?;
            total = Some(match total {
                Some(acc) => s.graph.add(acc, d)?,
                None => d,
            });
        }
        Ok(total)
    }

    fn regularization_value(&self) -> Result<Option<f64>> {
        let Some(snap) = &self.snapshot else {
            return Ok(None);
        };
        self.tensors()
            .zip(snap)
            .map(|(l, s)| ops::l1_distance(l, s))
            .sum::<Result<f64>>()
            .map(Some)
    }
}

pub type MethodRegistry = Registry<dyn ContinualMethod, MethodArgs>;

/// All built-in methods.
pub fn methods() -> MethodRegistry {
    let mut r = MethodRegistry::new("method");
    r.register("convprompt", |a| Ok(Box::new(ConvPromptMethod::new(a)?)))
        .register("seq_ft", |_| Ok(Box::new(SeqFtMethod)))
        .register("se_only", |a| Ok(Box::new(SeOnlyMethod::new(a)?)));
    r
}

/// Per-task linear head blocks over the final CLS features.
#[derive(Debug, Clone, Default)]
pub struct Classifier {
    blocks: Vec<ClassBlock>,
}

#[derive(Debug, Clone)]
pub struct ClassBlock {
    pub task: usize,
    pub classes: Vec<usize>,
    /// `|C^t| × d`.
    pub weight: Tensor,
    /// `1 × |C^t|`.
    pub bias: Tensor,
}

impl Classifier {
    pub fn blocks(&self) -> &[ClassBlock] {
        &self.blocks
    }

    pub fn num_classes(&self) -> usize {
        self.blocks.iter().map(|b| b.classes.len()).sum()
    }

    /// Global class labels in logit-column order.
    pub fn columns(&self) -> Vec<usize> {
        self.blocks.iter().flat_map(|b| b.classes.iter().copied()).collect()
    }

    pub fn column_of(&self, label: usize) -> Option<usize> {
        self.blocks
            .iter()
            .flat_map(|b| b.classes.iter())
            .position(|&c| c == label)
    }

    /// Adds a zero-initialized trainable block for task `t`'s classes.
    pub fn grow(&mut self, t: usize, classes: &[usize], dim: usize) -> Result<()> {
        for &c in classes {
            if self.column_of(c).is_some() {
                return Err(Error::LabelCollision(c));
            }
        }
        self.blocks.push(ClassBlock {
            task: t,
            classes: classes.to_vec(),
            weight: Tensor::zeros(&[classes.len(), dim]).trainable(),
            bias: Tensor::zeros(&[1, classes.len()]).trainable(),
        });
        Ok(())
    }

    /// `1 × C` logits for a `1 × d` feature row.
    pub fn logits<'m>(&'m self, s: &mut Session<'m>, features: Var) -> Result<Var> {
        if self.blocks.is_empty() {
            return Err(Error::input("classifier has no classes yet"));
        }
        let ws: Vec<Var> = self.blocks.iter().map(|b| s.param(&b.weight)).collect();
        let bs: Vec<Var> = self.blocks.iter().map(|b| s.param(&b.bias)).collect();
        let w = s.graph.concat_rows(&ws)?;
        let b = s.graph.concat_cols(&bs)?;
        let z = s.graph.matmul_nt(features, w)?;
        s.graph.add(z, b)
    }

    /// Column mask selecting task `t`'s classes.
    pub fn task_mask(&self, t: usize) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| std::iter::repeat_n(b.task == t, b.classes.len()))
            .collect()
    }
}

impl Parameterized for Classifier {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for b in &self.blocks {
            f(&format!("task{}.weight", b.task), &b.weight);
            f(&format!("task{}.bias", b.task), &b.bias);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for b in &mut self.blocks {
            f(&format!("task{}.weight", b.task), &mut b.weight);
            f(&format!("task{}.bias", b.task), &mut b.bias);
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
