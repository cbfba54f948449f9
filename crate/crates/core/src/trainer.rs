//! Class-incremental training and evaluation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{Sample, TaskData};
use crate::error::{Error, Result};
use crate::method::{argmax, methods, Classifier, ContinualMethod, MethodArgs};
use crate::metrics::AccuracyMatrix;
use crate::optimizer::{Adam, AdamConfig};
use crate::prompt::PromptConfig;
use crate::session::{Parameterized, Session};
use crate::similarity::{num_generators, Similarity, SimilarityStrategy, TaskEvidence};
use crate::tensor::Tensor;
use crate::util::derive_rng;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "CONVPROMPT_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the drift penalty from the second task on.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub optimizer: AdamConfig,
    /// Registered method name: convprompt, seq_ft or se_only.
    pub method: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            epochs: 40,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            method: "convprompt".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("train.lambda {} outside [0, 1]", self.lambda)));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if !methods().contains(&self.method) {
            return Err(Error::config(format!(
                "unknown method `{}` (expected one of {:?})",
                self.method,
                methods().names()
            )));
        }
        self.optimizer.validate()
    }
}

/// Trainable-parameter breakdown at the end of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub trainable: usize,
    pub frozen_prompt: usize,
    pub backbone: usize,
    pub classifier: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub t: usize,
    /// Generator budget; absent for methods without generators.
    #[serde(rename = "J_t")]
    pub j_t: Option<usize>,
    /// Similarity to earlier tasks; absent without history or budgeting.
    pub sim_t: Option<f64>,
    pub trainable_params: usize,
    pub frozen_prompt_params: usize,
    /// Mean training loss over the last epoch.
    pub final_train_loss: f64,
    /// Regularization term after the last step, when active.
    pub final_regularization: Option<f64>,
}

/// Loss parts of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub classification: f64,
    pub regularization: Option<f64>,
    pub total: f64,
}

/// Builds a thread pool honoring [`THREADS_ENV`].
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("{THREADS_ENV}={v} is not a thread count")))?;
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::config(format!("thread pool: {e}")))
}

/// Backbone, method and classifier trained task by task.
pub struct Learner {
    pub backbone: Backbone,
    pub method: Box<dyn ContinualMethod>,
    pub classifier: Classifier,
    similarity: Box<dyn SimilarityStrategy>,
    config: TrainConfig,
    j_max: usize,
    seed: u64,
    seen: BTreeSet<usize>,
    tasks_done: usize,
    optimizer: Adam,
    pool: rayon::ThreadPool,
}

impl Learner {
    pub fn new(
        mut backbone: Backbone,
        prompt: &PromptConfig,
        config: TrainConfig,
        similarity: Box<dyn SimilarityStrategy>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let method = methods().create(
            &config.method,
            &MethodArgs {
                backbone: backbone.config().clone(),
                prompt: prompt.clone(),
                seed,
            },
        )?;
        method.configure_backbone(&mut backbone);
        Ok(Self {
            backbone,
            method,
            classifier: Classifier::default(),
            similarity,
            optimizer: Adam::new(config.optimizer),
            config,
            j_max: prompt.j_max,
            seed,
            seen: BTreeSet::new(),
            tasks_done: 0,
            pool: thread_pool()?,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn tasks_done(&self) -> usize {
        self.tasks_done
    }

    /// Visits backbone, method and classifier parameters with prefixed
    /// names, in a fixed order.
    pub fn visit_all(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.backbone.visit_params(&mut |n, t| f(&format!("backbone.{n}"), t));
        self.method.visit_params(&mut |n, t| f(&format!("method.{n}"), t));
        self.classifier.visit_params(&mut |n, t| f(&format!("classifier.{n}"), t));
    }

    fn visit_all_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.backbone.visit_params_mut(&mut |n, t| f(&format!("backbone.{n}"), t));
        self.method.visit_params_mut(&mut |n, t| f(&format!("method.{n}"), t));
        self.classifier.visit_params_mut(&mut |n, t| f(&format!("classifier.{n}"), t));
    }

    pub fn param_counts(&self) -> ParamCounts {
        let backbone = self.backbone.param_count();
        let classifier = self.classifier.param_count();
        let mut trainable = 0;
        self.visit_all(&mut |_, t| {
            if t.requires_grad {
                trainable += t.len()
            }
        });
        ParamCounts {
            trainable,
            frozen_prompt: self.method.prompt_counts().map_or(0, |c| c.frozen_prompt),
            backbone,
            classifier,
        }
    }

    /// Per-class mean final-CLS features of the unprompted backbone.
    pub fn class_means(&self, task: &TaskData) -> Result<Vec<Vec<f64>>> {
        let feats: Vec<Vec<f64>> = self.pool.install(|| {
            task.train
                .par_iter()
                .map(|s| self.backbone.features(&s.image))
                .collect::<Result<_>>()
        })?;
        let mut means = Vec::with_capacity(task.classes.len());
        for &c in &task.classes {
            let rows: Vec<&Vec<f64>> = task
                .train
                .iter()
                .zip(&feats)
                .filter(|(s, _)| s.label == c)
                .map(|(_, f)| f)
                .collect();
            if rows.is_empty() {
                return Err(Error::input(format!("class {c} has no training samples")));
            }
            let mut m = vec![0.0; rows[0].len()];
            for r in &rows {
                m.iter_mut().zip(r.iter()).for_each(|(a, b)| *a += b);
            }
            m.iter_mut().for_each(|v| *v /= rows.len() as f64);
            means.push(m);
        }
        Ok(means)
    }

    /// Similarity and budget for the next task; the pool is updated
    /// afterwards so the task never matches itself.
    fn budget(&mut self, task: &TaskData) -> Result<(Similarity, usize)> {
        let means = if self.similarity.needs_image_features() {
            Some(self.class_means(task)?)
        } else {
            None
        };
        let ev = TaskEvidence {
            attributes: &task.attributes,
            class_means: means.as_deref(),
        };
        let sim = self.similarity.score(&ev)?;
        self.similarity.commit(&ev)?;
        Ok((sim, num_generators(sim, self.j_max)))
    }

    /// Prepares task `task.task` without training it: budgeting, snapshot,
    /// generator allocation and classifier growth.
    pub fn begin_task(&mut self, task: &TaskData) -> Result<(Option<f64>, Option<usize>)> {
        let expected = self.tasks_done + 1;
        if task.task != expected {
            return Err(Error::TaskOrder { expected, got: task.task });
        }
        if let Some(&c) = task.classes.iter().find(|c| self.seen.contains(c)) {
            return Err(Error::LabelCollision(c));
        }
        let (sim, j) = if self.method.uses_similarity() {
            let (sim, j) = self.budget(task)?;
            (sim.value(), Some(j))
        } else {
            (None, None)
        };
        self.method.begin_task(task.task, j.unwrap_or(0))?;
        let dim = self.backbone.config().dim;
        self.classifier.grow(task.task, &task.classes, dim)?;
        self.seen.extend(task.classes.iter().copied());
        self.optimizer.reset();
        Ok((sim, j))
    }

    fn finish_task(&mut self) {
        self.method.end_task();
        self.tasks_done += 1;
    }

    /// Classification loss of one sample and gradients of every trainable
    /// tensor in [`Learner::visit_all`] order.
    fn sample_gradients(&self, sample: &Sample, mask: &[bool]) -> Result<(f64, Vec<Vec<f64>>)> {
        let col = self
            .classifier
            .column_of(sample.label)
            .ok_or_else(|| Error::input(format!("label {} has no classifier column", sample.label)))?;
        let mut s = Session::new();
        let out = self.backbone.forward(&mut s, &sample.image, self.method.provider())?;
        let logits = self.classifier.logits(&mut s, out.final_cls)?;
        let loss = s.graph.cross_entropy(logits, &[col], Some(mask))?;
        let grads = s.graph.backward(loss)?;
        let mut out = Vec::new();
        self.visit_all(&mut |_, t| {
            if t.requires_grad {
                out.push(s.grad_of(&grads, t).map_or_else(|| vec![0.0; t.len()], Tensor::into_data));
            }
        });
        Ok((s.graph.value(loss).data()[0], out))
    }

    fn regularizer_gradients(&self) -> Result<Option<(f64, Vec<Vec<f64>>)>> {
        let mut s = Session::new();
        let Some(reg) = self.method.regularizer(&mut s)? else {
            return Ok(None);
        };
        let grads = s.graph.backward(reg)?;
        let mut out = Vec::new();
        self.visit_all(&mut |_, t| {
            if t.requires_grad {
                out.push(s.grad_of(&grads, t).map_or_else(|| vec![0.0; t.len()], Tensor::into_data));
            }
        });
        Ok(Some((s.graph.value(reg).data()[0], out)))
    }

    /// Loss and gradient of the mini-batch objective
    /// `mean CE + 1(t>1)·λ·reg` without updating anything.
    pub fn batch_gradients(&self, batch: &[&Sample], t: usize) -> Result<(StepLoss, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let mask = self.classifier.task_mask(t);
        let per_sample: Vec<(f64, Vec<Vec<f64>>)> = self.pool.install(|| {
            batch
                .par_iter()
                .map(|s| self.sample_gradients(s, &mask))
                .collect::<Result<_>>()
        })?;
        let n = batch.len() as f64;
        let mut grads: Vec<Vec<f64>> = per_sample[0].1.iter().map(|g| vec![0.0; g.len()]).collect();
        let mut ce = 0.0;
        for (loss, g) in &per_sample {
            ce += loss;
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
            }
        }
        ce /= n;
        grads.iter_mut().flatten().for_each(|v| *v /= n);

        let mut regularization = None;
        let mut total = ce;
        if t > 1 {
            if let Some((reg, rg)) = self.regularizer_gradients()? {
                let lambda = self.config.lambda;
                for (acc, gi) in grads.iter_mut().zip(&rg) {
                    acc.iter_mut().zip(gi).for_each(|(a, b)| *a += lambda * b);
                }
                total += lambda * reg;
                regularization = Some(reg);
            }
        }
        Ok((
            StepLoss {
                classification: ce,
                regularization,
                total,
            },
            grads,
        ))
    }

    /// The same objective assembled in a single graph; used to cross-check
    /// the split computation.
    pub fn assembled_loss(&self, batch: &[&Sample], t: usize) -> Result<f64> {
        let mask = self.classifier.task_mask(t);
        let mut s = Session::new();
        let mut rows = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for sample in batch {
            let out = self.backbone.forward(&mut s, &sample.image, self.method.provider())?;
            rows.push(self.classifier.logits(&mut s, out.final_cls)?);
            labels.push(self.classifier.column_of(sample.label).ok_or_else(|| {
                Error::input(format!("label {} has no classifier column", sample.label))
            })?);
        }
        let logits = s.graph.concat_rows(&rows)?;
        let mut loss = s.graph.cross_entropy(logits, &labels, Some(&mask))?;
        if t > 1 {
            if let Some(reg) = self.method.regularizer(&mut s)? {
                let scaled = s.graph.scale(reg, self.config.lambda);
                loss = s.graph.add(loss, scaled)?;
            }
        }
        Ok(s.graph.value(loss).data()[0])
    }

    /// One optimizer step on a batch of the current task.
    pub fn train_step(&mut self, batch: &[&Sample], t: usize) -> Result<StepLoss> {
        let (loss, grads) = self.batch_gradients(batch, t)?;
        let mut grads = grads.into_iter();
        let mut opt = std::mem::replace(&mut self.optimizer, Adam::new(self.config.optimizer));
        let mut result = Ok(());
        self.visit_all_mut(&mut |name, p| {
            if !p.requires_grad || result.is_err() {
                return;
            }
            let g = grads.next().expect("one gradient per trainable tensor");
            result = opt.step(name, p, &g);
        });
        self.optimizer = opt;
        result?;
        Ok(loss)
    }

    /// Trains one task end to end: budgeting, snapshot, allocation,
    /// classifier growth, the configured epochs, and snapshot release.
    pub fn train_task(&mut self, task: &TaskData) -> Result<TaskReport> {
        let (sim_t, j_t) = self.begin_task(task)?;
        let t = task.task;
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        let mut last_epoch = 0.0;
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut derive_rng(self.seed, "batches", (t * 10_000 + epoch) as u64));
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &task.train[i]).collect();
                total += self.train_step(&batch, t)?.total;
                batches += 1;
            }
            last_epoch = total / batches as f64;
        }
        let final_regularization = if t > 1 { self.method.regularization_value()? } else { None };
        let counts = self.param_counts();
        self.finish_task();
        Ok(TaskReport {
            t,
            j_t,
            sim_t,
            trainable_params: counts.trainable,
            frozen_prompt_params: counts.frozen_prompt,
            final_train_loss: last_epoch,
            final_regularization,
        })
    }

    /// Predicted global label: argmax over every seen class, no task
    /// identity, ties to the lowest column.
    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        let mut s = Session::new();
        let out = self.backbone.forward(&mut s, image, self.method.provider())?;
        let logits = self.classifier.logits(&mut s, out.final_cls)?;
        let col = argmax(s.graph.value(logits).data());
        Ok(self.classifier.columns()[col])
    }

    /// Fraction of `samples` predicted correctly.
    pub fn accuracy(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::input("no samples to evaluate"));
        }
        let correct: Vec<bool> = self.pool.install(|| {
            samples
                .par_iter()
                .map(|s| self.predict(&s.image).map(|p| p == s.label))
                .collect::<Result<_>>()
        })?;
        Ok(correct.iter().filter(|&&c| c).count() as f64 / samples.len() as f64)
    }

    /// Fills column `tasks.len() − 1` of `s` with test accuracies.
    pub fn evaluate(&self, tasks: &[TaskData], s: &mut AccuracyMatrix) -> Result<()> {
        let after = tasks.len().checked_sub(1).ok_or_else(|| Error::input("no tasks"))?;
        for (t, task) in tasks.iter().enumerate() {
            s.set(t, after, self.accuracy(&task.test)?)?;
        }
        Ok(())
    }

    /// Checksum of all backbone parameters.
    pub fn backbone_checksum(&self) -> u64 {
        self.backbone.checksum()
    }
}
