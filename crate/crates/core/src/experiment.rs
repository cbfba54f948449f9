//! Experiment configuration, runs, sweeps and the gradient-check suite.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::BackwardFault;
use crate::backbone::{Backbone, BackboneConfig};
use crate::data::{load_stream, Sample, StreamConfig, TaskStream};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, Objective};
use crate::method::{Classifier, ContinualMethod, ConvPromptMethod, MethodArgs};
use crate::metrics::{average_accuracy, forgetting, AccuracyMatrix};
use crate::prompt::PromptConfig;
use crate::session::{Parameterized, Session};
use crate::similarity::SimilarityConfig;
use crate::tensor::Tensor;
use crate::trainer::{Learner, TaskReport, TrainConfig};
use crate::util::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for prompt, classifier and batch-order randomness.
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub prompt: PromptConfig,
    pub train: TrainConfig,
    pub stream: StreamConfig,
    pub similarity: SimilarityConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone: BackboneConfig::default(),
            prompt: PromptConfig::default(),
            train: TrainConfig::default(),
            stream: StreamConfig::default(),
            similarity: SimilarityConfig::default(),
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.prompt.validate(&self.backbone)?;
        self.train.validate()?;
        self.stream.validate()?;
        self.similarity.validate()?;
        if self.stream.cpds.is_none() && self.backbone.channels != 3 {
            return Err(Error::config("synthetic streams are RGB; set backbone.channels to 3"));
        }
        Ok(())
    }

    /// Uses `seed` everywhere: backbone init, data and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.backbone.seed = seed;
        self.stream.seed = seed;
        self
    }

    pub fn with_method(mut self, method: &str) -> Self {
        self.train.method = method.to_string();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub backbone: usize,
    /// Trainable parameters while learning the last task.
    pub trainable: usize,
    /// Everything needed at inference after the last task.
    pub total: usize,
    pub trainable_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub method: String,
    pub per_task: Vec<TaskReport>,
    #[serde(rename = "S")]
    pub s: AccuracyMatrix,
    #[serde(rename = "A_T")]
    pub a_t: f64,
    #[serde(rename = "F_T")]
    pub f_t: Option<f64>,
    pub forward_passes_per_inference: f64,
    /// Generators allocated over the whole stream, `M_T`.
    pub total_generators: usize,
    pub parameters: ParameterSummary,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Plain-text table of the accuracy matrix and summary metrics.
    pub fn summary(&self) -> String {
        let mut out = format!("method {}\n", self.method);
        out += "task  J_t  sim_t   trainable  ";
        let n = self.s.tasks();
        for tp in 0..n {
            out += &format!(" after{:<2}", tp + 1);
        }
        out += "\n";
        for (t, r) in self.per_task.iter().enumerate() {
            let j = r.j_t.map_or("-".to_string(), |j| j.to_string());
            let sim = r.sim_t.map_or("-".to_string(), |s| format!("{s:.3}"));
            out += &format!("{:<5} {:<4} {:<7} {:<10} ", r.t, j, sim, r.trainable_params);
            for tp in 0..n {
                out += &match self.s.get(t, tp) {
                    Some(v) => format!(" {:>7.3}", v),
                    None => format!(" {:>7}", ""),
                };
            }
            out += "\n";
        }
        out += &format!("A_T {:.4}", self.a_t);
        match self.f_t {
            Some(f) => out += &format!("  F_T {f:.4}"),
            None => out += "  F_T -",
        }
        out += &format!(
            "  M_T {}  trainable {:.2}%  passes/inference {}\n",
            self.total_generators, self.parameters.trainable_percent, self.forward_passes_per_inference
        );
        out
    }
}

/// Trains every task of the configured stream and records the results.
pub fn run(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let stream = load_stream(&config.stream, config.backbone.image_size)?;
    run_on(config, &stream)
}

/// Like [`run`] on an already loaded stream.
pub fn run_on(config: &ExperimentConfig, stream: &TaskStream) -> Result<RunRecord> {
    config.validate()?;
    let shape = config.backbone.image_shape();
    stream.validate(&shape)?;
    let backbone = Backbone::new(config.backbone.clone())?;
    let mut learner = Learner::new(
        backbone,
        &config.prompt,
        config.train.clone(),
        config.similarity.build()?,
        config.seed,
    )?;
    let n = stream.tasks.len();
    let mut s = AccuracyMatrix::new(n);
    let mut per_task = Vec::with_capacity(n);
    let mut passes_per_inference = 0.0;
    for (i, task) in stream.tasks.iter().enumerate() {
        per_task.push(learner.train_task(task)?);
        let before = learner.backbone.forward_passes();
        learner.evaluate(&stream.tasks[..=i], &mut s)?;
        let evaluated: usize = stream.tasks[..=i].iter().map(|t| t.test.len()).sum();
        passes_per_inference = (learner.backbone.forward_passes() - before) as f64 / evaluated as f64;
    }
    let counts = learner.param_counts();
    let prompt_total = learner.method.prompt_counts().map_or(0, |c| c.trainable() + c.frozen_prompt);
    let method_total = if learner.method.prompt_counts().is_some() {
        prompt_total
    } else {
        learner.method.param_count()
    };
    let total = counts.backbone + counts.classifier + method_total;
    Ok(RunRecord {
        config: config.clone(),
        method: learner.method.name().to_string(),
        per_task,
        a_t: average_accuracy(&s, n)?,
        f_t: forgetting(&s, n)?,
        s,
        forward_passes_per_inference: passes_per_inference,
        total_generators: learner.method.generator_counts().iter().sum(),
        parameters: ParameterSummary {
            backbone: counts.backbone,
            trainable: counts.trainable,
            total,
            trainable_percent: 100.0 * counts.trainable as f64 / total as f64,
        },
    })
}

/// Parameters that [`sweep`] can vary.
pub const SWEEP_PARAMS: [&str; 5] = ["lambda", "l_p", "k", "J_max", "prompted_layers"];

/// Returns a copy of `config` with `param` set to `value`. For
/// `prompted_layers` the value is a count `n`, meaning the first `n` layers.
pub fn apply_param(config: &ExperimentConfig, param: &str, value: &str) -> Result<ExperimentConfig> {
    let mut c = config.clone();
    let count = || {
        value
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::config(format!("`{value}` is not a count for {param}")))
    };
    match param {
        "lambda" => {
            c.train.lambda = value
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("`{value}` is not a number for lambda")))?
        }
        "l_p" => c.prompt.prompt_length = count()?,
        "k" => c.prompt.kernel_size = count()?,
        "J_max" => c.prompt.j_max = count()?,
        "prompted_layers" => c.prompt.prompted_layers = (0..count()?).collect(),
        _ => {
            return Err(Error::Unknown {
                kind: "sweep parameter",
                name: param.to_string(),
            })
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub param: String,
    pub value: String,
    pub record: RunRecord,
}

/// Independent runs per value on one shared stream.
pub fn sweep(config: &ExperimentConfig, param: &str, values: &[String]) -> Result<Vec<SweepEntry>> {
    let configs = values
        .iter()
        .map(|v| apply_param(config, param, v))
        .collect::<Result<Vec<_>>>()?;
    let stream = load_stream(&config.stream, config.backbone.image_size)?;
    configs
        .iter()
        .zip(values)
        .map(|(c, v)| {
            Ok(SweepEntry {
                param: param.to_string(),
                value: v.clone(),
                record: run_on(c, &stream)?,
            })
        })
        .collect()
}

/// Tolerance of the gradient-check suite.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// Parameter groups checked by the suite.
pub const GRADCHECK_GROUPS: [&str; 5] = ["SE", "G", "pi", "PN", "classifier"];

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckSuiteReport {
    pub tolerance: f64,
    pub max_relative_error: f64,
    /// Worst relative error per group, in [`GRADCHECK_GROUPS`] order.
    pub groups: Vec<(String, f64)>,
    pub parameters_checked: usize,
    pub passed: bool,
}

fn group_of(name: &str) -> Option<&'static str> {
    let n = name.strip_prefix("method.").unwrap_or(name);
    if n.starts_with("se.") {
        Some("SE")
    } else if n.starts_with("projection.") {
        Some("PN")
    } else if n.starts_with("group") && n.ends_with("prompt_keys") {
        Some("pi")
    } else if n.starts_with("group") {
        Some("G")
    } else if n.starts_with("classifier.") {
        Some("classifier")
    } else {
        None
    }
}

/// Toy model of the suite: second task active, shared state displaced from
/// its snapshot so the drift penalty is differentiable.
struct SuiteModel {
    backbone: Backbone,
    method: ConvPromptMethod,
    classifier: Classifier,
    batch: Vec<Sample>,
    labels: Vec<usize>,
    mask: Vec<bool>,
    lambda: f64,
    names: Vec<String>,
    fault: Option<BackwardFault>,
}

impl SuiteModel {
    fn build() -> Result<Self> {
        let backbone_cfg = BackboneConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            dim: 16,
            heads: 2,
            layers: 2,
            ffn_hidden: 16,
            init_std: 0.3,
            seed: 11,
        };
        let prompt = PromptConfig {
            prompt_length: 2,
            kernel_size: 2,
            prompted_layers: vec![0, 1],
            j_max: 2,
        };
        let backbone = Backbone::new(backbone_cfg.clone())?;
        let args = MethodArgs {
            backbone: backbone_cfg,
            prompt,
            seed: 11,
        };
        let mut method = ConvPromptMethod::new(&args)?;
        let mut classifier = Classifier::default();
        method.begin_task(1, 2)?;
        classifier.grow(1, &[0, 1], 16)?;
        method.end_task();
        method.begin_task(2, 2)?;
        classifier.grow(2, &[2, 3], 16)?;
        let mut rng = derive_rng(11, "gradcheck", 0);
        let mut displaced = 0;
        method.visit_params_mut(&mut |name, t| {
            if name.starts_with("se.") || name.starts_with("projection.") {
                let shift = Tensor::uniform(t.shape(), 0.05, &mut rng);
                t.data_mut().iter_mut().zip(shift.data()).for_each(|(v, d)| *v += d);
                displaced += 1;
            }
        });
        debug_assert!(displaced > 0);
        classifier.visit_params_mut(&mut |_, t| {
            *t = Tensor::uniform(t.shape(), 0.5, &mut rng).trainable();
        });
        let batch: Vec<Sample> = (0..3)
            .map(|i| Sample {
                image: Tensor::gaussian(&[3, 8, 8], 1.0, &mut derive_rng(11, "gradcheck-img", i)),
                label: 2 + (i as usize % 2),
            })
            .collect();
        let labels = batch.iter().map(|s| classifier.column_of(s.label).unwrap()).collect();
        let mask = classifier.task_mask(2);
        let mut names = Vec::new();
        method.visit_params(&mut |n, t| {
            if t.requires_grad {
                names.push(format!("method.{n}"));
            }
        });
        classifier.visit_params(&mut |n, t| {
            if t.requires_grad {
                names.push(format!("classifier.{n}"));
            }
        });
        Ok(Self {
            backbone,
            method,
            classifier,
            batch,
            labels,
            mask,
            lambda: 0.5,
            names,
            fault: None,
        })
    }

    fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.method.visit_params(&mut |n, t| {
            if t.requires_grad {
                out.push((format!("method.{n}"), t.detached()));
            }
        });
        self.classifier.visit_params(&mut |n, t| {
            if t.requires_grad {
                out.push((format!("classifier.{n}"), t.detached()));
            }
        });
        out
    }

    fn load(&mut self, values: &[Tensor]) {
        let mut it = values.iter();
        let mut write = |t: &mut Tensor| {
            if t.requires_grad {
                let v = it.next().expect("one value per trainable tensor");
                t.data_mut().copy_from_slice(v.data());
            }
        };
        self.method.visit_params_mut(&mut |_, t| write(t));
        self.classifier.visit_params_mut(&mut |_, t| write(t));
    }
}

impl Objective for SuiteModel {
    fn evaluate(&mut self, params: &[Tensor], with_grad: bool) -> Result<(f64, Option<Vec<Tensor>>)> {
        self.load(params);
        let me = &*self;
        let mut s = Session::with_fault(me.fault);
        let mut rows = Vec::new();
        for sample in &me.batch {
            let out = me.backbone.forward(&mut s, &sample.image, me.method.provider())?;
            rows.push(me.classifier.logits(&mut s, out.final_cls)?);
        }
        let logits = s.graph.concat_rows(&rows)?;
        let ce = s.graph.cross_entropy(logits, &me.labels, Some(&me.mask))?;
        let reg = self
            .method
            .regularizer(&mut s)?
            .ok_or_else(|| Error::Numerical("suite expects an active regularizer".into()))?;
        let reg = s.graph.scale(reg, me.lambda);
        let loss = s.graph.add(ce, reg)?;
        let value = s.graph.value(loss).data()[0];
        if !with_grad {
            return Ok((value, None));
        }
        let grads = s.graph.backward(loss)?;
        let mut out = Vec::new();
        let mut collect = |t: &Tensor| {
            if t.requires_grad {
                out.push(s.grad_of(&grads, t).unwrap_or_else(|| Tensor::zeros(t.shape())));
            }
        };
        me.method.visit_params(&mut |_, t| collect(t));
        me.classifier.visit_params(&mut |_, t| collect(t));
        Ok((value, Some(out)))
    }
}

/// Finite-difference check of every trainable group on a toy model. With
/// `corrupt`, the convolution kernel backward is deliberately wrong.
pub fn gradcheck_suite(corrupt: bool) -> Result<GradcheckSuiteReport> {
    let mut model = SuiteModel::build()?;
    if corrupt {
        model.fault = Some(BackwardFault::ConvKernelGrad);
    }
    let params = model.params();
    let names = model.names.clone();
    let checked: usize = params.iter().map(|(_, t)| t.len()).sum();
    let report = finite_diff_check(&params, model)?;
    let mut groups: Vec<(String, f64)> = GRADCHECK_GROUPS.iter().map(|g| (g.to_string(), 0.0)).collect();
    for ((name, err), expected) in report.per_parameter_errors.iter().zip(&names) {
        debug_assert_eq!(name, expected);
        let g = group_of(name).ok_or_else(|| Error::Lookup(format!("no group for `{name}`")))?;
        let slot = groups.iter_mut().find(|(n, _)| n == g).expect("known group");
        slot.1 = slot.1.max(*err);
    }
    Ok(GradcheckSuiteReport {
        tolerance: GRADCHECK_TOLERANCE,
        max_relative_error: report.max_relative_error,
        passed: report.passes(GRADCHECK_TOLERANCE),
        groups,
        parameters_checked: checked,
    })
}
