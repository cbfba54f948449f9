//! Convolutional prompt generation: task-shared embeddings, per-task
//! kernel groups with prompt keys, and CLS-driven component weighting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::autograd::Var;
use crate::backbone::{BackboneConfig, LayerPrefix, PromptProvider};
use crate::error::{Error, Result};
use crate::ops;
use crate::session::{Parameterized, Session};
use crate::tensor::Tensor;
use crate::util::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Prefix length `l_p`.
    pub prompt_length: usize,
    /// Generator kernel side `k`.
    pub kernel_size: usize,
    /// 0-based backbone layers that receive prefixes.
    pub prompted_layers: Vec<usize>,
    pub j_max: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            prompt_length: 4,
            kernel_size: 3,
            prompted_layers: vec![0, 1, 2],
            j_max: 3,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.prompt_length == 0 {
            return Err(Error::config("prompt.prompt_length must be positive"));
        }
        if self.kernel_size == 0 {
            return Err(Error::config("prompt.kernel_size must be positive"));
        }
        if self.j_max == 0 {
            return Err(Error::config("prompt.j_max must be positive"));
        }
        if backbone.dim % 4 != 0 {
            return Err(Error::config(format!(
                "backbone.dim {} must be divisible by 4 for the projection network",
                backbone.dim
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &l in &self.prompted_layers {
            if l >= backbone.layers {
                return Err(Error::config(format!(
                    "prompted layer {l} out of range for {} layers",
                    backbone.layers
                )));
            }
            if !seen.insert(l) {
                return Err(Error::config(format!("prompted layer {l} listed twice")));
            }
        }
        Ok(())
    }

    /// Shape of one shared embedding: `(l_p+k−1) × (d_h+k−1)`.
    pub fn shared_shape(&self, head_dim: usize) -> [usize; 2] {
        let pad = self.kernel_size - 1;
        [self.prompt_length + pad, head_dim + pad]
    }
}

/// Shared embeddings of one prompted layer, one per head for K and V.
#[derive(Debug, Clone)]
pub struct SharedLayer {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

/// Two affine layers `d → d/2 → d/4` with ReLU between.
#[derive(Debug, Clone)]
pub struct ProjectionNetwork {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ProjectionNetwork {
    fn new(dim: usize, seed: u64) -> Self {
        let mut rng = derive_rng(seed, "projection", 0);
        let (h, o) = (dim / 2, dim / 4);
        let b1 = 1.0 / (dim as f64).sqrt();
        let b2 = 1.0 / (h as f64).sqrt();
        Self {
            w1: Tensor::uniform(&[dim, h], b1, &mut rng).trainable(),
            b1: Tensor::uniform(&[h], b1, &mut rng).trainable(),
            w2: Tensor::uniform(&[h, o], b2, &mut rng).trainable(),
            b2: Tensor::uniform(&[o], b2, &mut rng).trainable(),
        }
    }

    pub fn forward_graph<'m>(&'m self, s: &mut Session<'m>, cls: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            s.param(&self.w1),
            s.param(&self.b1),
            s.param(&self.w2),
            s.param(&self.b2),
        );
        let h = s.graph.matmul(cls, w1)?;
        let h = s.graph.add_bias(h, b1)?;
        let h = s.graph.relu(h);
        let q = s.graph.matmul(h, w2)?;
        s.graph.add_bias(q, b2)
    }

    pub fn forward(&self, cls: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::new(vec![1, cls.len()], cls.to_vec())?;
        let h = ops::matmul(&x, &self.w1)?;
        let h: Vec<f64> = h.data().iter().zip(self.b1.data()).map(|(a, b)| (a + b).max(0.0)).collect();
        let q = ops::matmul(&Tensor::new(vec![1, h.len()], h)?, &self.w2)?;
        Ok(q.data().iter().zip(self.b2.data()).map(|(a, b)| a + b).collect())
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

/// One group's generators and keys for a single prompted layer.
#[derive(Debug, Clone)]
pub struct GroupLayer {
    /// `[head][m]` kernels, each `k × k`.
    pub key_kernels: Vec<Vec<Tensor>>,
    pub value_kernels: Vec<Vec<Tensor>>,
    /// `J × d_π`, one key per generator, shared by all heads.
    pub prompt_keys: Tensor,
}

/// Generators and keys allocated for one task.
#[derive(Debug, Clone)]
pub struct GeneratorGroup {
    pub task: usize,
    pub count: usize,
    pub frozen: bool,
    pub layers: Vec<GroupLayer>,
}

/// Prompt components of one layer: `[head][m]`, each `l_p × d_h`.
#[derive(Debug, Clone)]
pub struct PromptComponents {
    pub keys: Vec<Vec<Tensor>>,
    pub values: Vec<Vec<Tensor>>,
}

/// Component weights with the degenerate-norm flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentWeights {
    pub s: Vec<f64>,
    pub zero_norm: bool,
}

/// Detached copy of the shared state (embeddings and projection network).
#[derive(Debug, Clone)]
pub struct SharedSnapshot {
    tensors: Vec<(String, Tensor)>,
}

impl SharedSnapshot {
    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }
}

/// Parameter counts of the prompt engine, split by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptParamCounts {
    pub shared_embeddings: usize,
    pub projection: usize,
    pub current_generators: usize,
    pub current_keys: usize,
    pub frozen_prompt: usize,
}

impl PromptParamCounts {
    pub fn trainable(&self) -> usize {
        self.shared_embeddings + self.projection + self.current_generators + self.current_keys
    }
}

#[derive(Debug, Clone)]
pub struct PromptEngine {
    config: PromptConfig,
    dim: usize,
    heads: usize,
    head_dim: usize,
    seed: u64,
    pub shared: Vec<SharedLayer>,
    pub projection: ProjectionNetwork,
    pub groups: Vec<GeneratorGroup>,
}

impl PromptEngine {
    pub fn new(config: PromptConfig, backbone: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate(backbone)?;
        let head_dim = backbone.head_dim();
        let shape = config.shared_shape(head_dim);
        let bound = 1.0 / (shape[1] as f64).sqrt();
        let mut rng = derive_rng(seed, "shared", 0);
        let shared = config
            .prompted_layers
            .iter()
            .map(|_| {
                let mut mk = || {
                    (0..backbone.heads)
                        .map(|_| Tensor::uniform(&shape, bound, &mut rng).trainable())
                        .collect::<Vec<_>>()
                };
                let keys = mk();
                let values = mk();
                SharedLayer { keys, values }
            })
            .collect();
        Ok(Self {
            projection: ProjectionNetwork::new(backbone.dim, seed),
            config,
            dim: backbone.dim,
            heads: backbone.heads,
            head_dim,
            seed,
            shared,
            groups: Vec::new(),
        })
    }

    pub fn config(&self) -> &PromptConfig {
        &self.config
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn key_dim(&self) -> usize {
        self.dim / 4
    }

    /// Total generators allocated so far, `M_t`.
    pub fn total_generators(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }

    pub fn generator_counts(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.count).collect()
    }

    fn layer_slot(&self, layer: usize) -> Option<usize> {
        self.config.prompted_layers.iter().position(|&l| l == layer)
    }

    fn slot(&self, layer: usize) -> Result<usize> {
        self.layer_slot(layer)
            .ok_or_else(|| Error::Lookup(format!("layer {layer} is not prompted")))
    }

    /// Freezes all existing groups and allocates `count` fresh generators
    /// and keys for task `t` (1-based).
    pub fn begin_task(&mut self, t: usize, count: usize) -> Result<()> {
        let expected = self.groups.len() + 1;
        if t != expected {
            return Err(Error::TaskOrder { expected, got: t });
        }
        if count == 0 {
            return Err(Error::input("a task needs at least one generator"));
        }
        for g in &mut self.groups {
            g.frozen = true;
            for l in &mut g.layers {
                for t in l.key_kernels.iter_mut().chain(&mut l.value_kernels).flatten() {
                    t.requires_grad = false;
                }
                l.prompt_keys.requires_grad = false;
            }
        }
        let k = self.config.kernel_size;
        let bound = 1.0 / k as f64;
        let mut rng = derive_rng(self.seed, "group", t as u64);
        let key_dim = self.key_dim();
        let layers = self
            .config
            .prompted_layers
            .iter()
            .map(|_| {
                let mut kernels = || {
                    (0..self.heads)
                        .map(|_| {
                            (0..count)
                                .map(|_| Tensor::uniform(&[k, k], bound, &mut rng).trainable())
                                .collect::<Vec<_>>()
                        })
                        .collect::<Vec<_>>()
                };
                let key_kernels = kernels();
                let value_kernels = kernels();
                let mut keys = Tensor::gaussian(&[count, key_dim], 1.0, &mut rng);
                for r in 0..count {
                    let row = &mut keys.data_mut()[r * key_dim..(r + 1) * key_dim];
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    row.iter_mut().for_each(|v| *v /= n);
                }
                GroupLayer {
                    key_kernels,
                    value_kernels,
                    prompt_keys: keys.trainable(),
                }
            })
            .collect();
        self.groups.push(GeneratorGroup {
            task: t,
            count,
            frozen: false,
            layers,
        });
        Ok(())
    }

    /// `PC = conv2d_valid(SE, G)` for every head and every generator, in
    /// allocation order.
    pub fn generate_components(&self, layer: usize) -> Result<PromptComponents> {
        let slot = self.slot(layer)?;
        if self.groups.is_empty() {
            return Err(Error::input("no generator group allocated"));
        }
        let se = &self.shared[slot];
        let mut keys = vec![Vec::new(); self.heads];
        let mut values = vec![Vec::new(); self.heads];
        for g in &self.groups {
            let gl = &g.layers[slot];
            for h in 0..self.heads {
                for m in 0..g.count {
                    keys[h].push(ops::conv2d_valid(&se.keys[h], &gl.key_kernels[h][m])?);
                    values[h].push(ops::conv2d_valid(&se.values[h], &gl.value_kernels[h][m])?);
                }
            }
        }
        Ok(PromptComponents { keys, values })
    }

    /// All prompt keys of a layer stacked as `M_t × d_π`.
    pub fn stacked_keys(&self, layer: usize) -> Result<Tensor> {
        let slot = self.slot(layer)?;
        let rows: Vec<Vec<f64>> = self
            .groups
            .iter()
            .flat_map(|g| {
                let k = &g.layers[slot].prompt_keys;
                (0..g.count).map(move |r| k.row(r).to_vec())
            })
            .collect();
        if rows.is_empty() {
            return Err(Error::input("no generator group allocated"));
        }
        Tensor::from_rows(&rows)
    }

    /// `s_m = cos(PN(cls), π_m)` over every allocated key of `layer`.
    pub fn compute_weights(&self, cls: &[f64], layer: usize) -> Result<ComponentWeights> {
        if cls.len() != self.dim {
            return Err(Error::dim(format!("cls has {} entries, expected {}", cls.len(), self.dim)));
        }
        let q = self.projection.forward(cls)?;
        let keys = self.stacked_keys(layer)?;
        let mut zero_norm = false;
        let mut s = Vec::with_capacity(keys.shape()[0]);
        for r in 0..keys.shape()[0] {
            let c = ops::cosine_similarity(&q, keys.row(r))?;
            zero_norm |= c.zero_norm;
            s.push(c.value);
        }
        Ok(ComponentWeights { s, zero_norm })
    }

    /// Per-head `Σ_m s_m PC_m` for keys and values.
    pub fn assemble_prompts(&self, layer: usize, s: &[f64]) -> Result<LayerPrefix<Tensor>> {
        let comps = self.generate_components(layer)?;
        let m = comps.keys[0].len();
        if s.len() != m {
            return Err(Error::dim(format!("{} weights for {m} components", s.len())));
        }
        let mix = |parts: &[Tensor]| {
            let mut acc = Tensor::zeros(parts[0].shape());
            for (p, w) in parts.iter().zip(s) {
                acc.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += w * b);
            }
            acc
        };
        Ok(LayerPrefix {
            keys: comps.keys.iter().map(|c| mix(c)).collect(),
            values: comps.values.iter().map(|c| mix(c)).collect(),
        })
    }

    /// Graph version of weighting and assembly for one layer.
    pub fn layer_prefix<'m>(
        &'m self,
        s: &mut Session<'m>,
        layer: usize,
        cls: Var,
    ) -> Result<LayerPrefix> {
        let slot = self.slot(layer)?;
        if self.groups.is_empty() {
            return Err(Error::input("no generator group allocated"));
        }
        let q = self.projection.forward_graph(s, cls)?;
        let key_parts: Vec<Var> = self
            .groups
            .iter()
            .map(|g| s.param(&g.layers[slot].prompt_keys))
            .collect();
        let keys = s.graph.concat_rows(&key_parts)?;
        let weights = s.graph.cosine_rows(q, keys)?;

        let se = &self.shared[slot];
        let mut out = LayerPrefix {
            keys: Vec::with_capacity(self.heads),
            values: Vec::with_capacity(self.heads),
        };
        for h in 0..self.heads {
            let se_k = s.param(&se.keys[h]);
            let se_v = s.param(&se.values[h]);
            let mut pk = Vec::new();
            let mut pv = Vec::new();
            for g in &self.groups {
                let gl = &g.layers[slot];
                for m in 0..g.count {
                    let gk = s.param(&gl.key_kernels[h][m]);
                    let gv = s.param(&gl.value_kernels[h][m]);
                    pk.push(s.graph.conv2d_valid(se_k, gk)?);
                    pv.push(s.graph.conv2d_valid(se_v, gv)?);
                }
            }
            out.keys.push(s.graph.weighted_sum(weights, &pk)?);
            out.values.push(s.graph.weighted_sum(weights, &pv)?);
        }
        Ok(out)
    }

    /// Provider for the backbone; non-prompted layers get no prefix.
    pub fn make_provider(&self) -> &dyn PromptProvider {
        self
    }

    pub fn snapshot_shared(&self) -> SharedSnapshot {
        let mut tensors = Vec::new();
        self.visit_shared(&mut |name, t| tensors.push((name.to_string(), t.detached())));
        SharedSnapshot { tensors }
    }

    fn visit_shared(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (slot, se) in self.shared.iter().enumerate() {
            let l = self.config.prompted_layers[slot];
            for h in 0..self.heads {
                f(&format!("se.l{l}.h{h}.key"), &se.keys[h]);
                f(&format!("se.l{l}.h{h}.value"), &se.values[h]);
            }
        }
        for (name, t) in self.projection.tensors() {
            f(&format!("projection.{name}"), t);
        }
    }

    fn shared_refs(&self) -> Vec<&Tensor> {
        let mut refs = Vec::new();
        for se in &self.shared {
            for h in 0..self.heads {
                refs.push(&se.keys[h]);
                refs.push(&se.values[h]);
            }
        }
        refs.extend(self.projection.tensors().map(|(_, t)| t));
        refs
    }

    fn check_snapshot(&self, snap: &SharedSnapshot) -> Result<Vec<&Tensor>> {
        let refs = self.shared_refs();
        if refs.len() != snap.tensors.len() {
            return Err(Error::dim("snapshot does not match engine layout"));
        }
        for (r, (name, s)) in refs.iter().zip(&snap.tensors) {
            if r.shape() != s.shape() {
                return Err(Error::dim(format!("snapshot `{name}` has a different shape")));
            }
        }
        Ok(refs)
    }

    /// `‖φ − φ_snap‖₁ + Σ ‖SE − SE_snap‖₁`.
    pub fn regularization_loss(&self, snap: &SharedSnapshot) -> Result<f64> {
        let live = self.check_snapshot(snap)?;
        live.iter()
            .zip(&snap.tensors)
            .map(|(l, (_, s))| ops::l1_distance(l, s))
            .sum()
    }

    /// Graph version of [`PromptEngine::regularization_loss`].
    pub fn regularization_graph<'m>(
        &'m self,
        s: &mut Session<'m>,
        snap: &SharedSnapshot,
    ) -> Result<Var> {
        let live = self.check_snapshot(snap)?;
        let mut total: Option<Var> = None;
        for (l, (_, target)) in live.into_iter().zip(&snap.tensors) {
            let v = s.param(l);
            let d = s.graph.l1_distance(v, target)?;
            total = Some(match total {
                Some(acc) => s.graph.add(acc, d)?,
                None => d,
            });
        }
        total.ok_or_else(|| Error::input("engine has no shared parameters"))
    }

    pub fn param_counts(&self) -> PromptParamCounts {
        let shared = self
            .shared
            .iter()
            .flat_map(|s| s.keys.iter().chain(&s.values))
            .map(Tensor::len)
            .sum();
        let projection = self.projection.tensors().iter().map(|(_, t)| t.len()).sum();
        let mut counts = PromptParamCounts {
            shared_embeddings: shared,
            projection,
            current_generators: 0,
            current_keys: 0,
            frozen_prompt: 0,
        };
        for g in &self.groups {
            let gens: usize = g
                .layers
                .iter()
                .flat_map(|l| l.key_kernels.iter().chain(&l.value_kernels).flatten())
                .map(Tensor::len)
                .sum();
            let keys: usize = g.layers.iter().map(|l| l.prompt_keys.len()).sum();
            if g.frozen {
                counts.frozen_prompt += gens + keys;
            } else {
                counts.current_generators += gens;
                counts.current_keys += keys;
            }
        }
        counts
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let tasks: Vec<_> = self
            .groups
            .iter()
            .map(|g| serde_json::json!({"t": g.task, "J_t": g.count, "frozen": g.frozen}))
            .collect();
        let mut a = TensorArchive::new(serde_json::json!({
            "kind": "prompt_state",
            "config": serde_json::to_value(&self.config)?,
            "dim": self.dim,
            "heads": self.heads,
            "seed": self.seed,
            "tasks": tasks,
        }));
        self.visit_params(&mut |name, t| a.push(name, t));
        Ok(a)
    }

    /// Rebuilds an engine from an archive; `backbone` must match the one it
    /// was created for.
    pub fn from_archive(archive: &TensorArchive, backbone: &BackboneConfig) -> Result<Self> {
        let m = &archive.manifest;
        let config: PromptConfig = serde_json::from_value(
            m.get("config").cloned().ok_or_else(|| Error::format("prompt state without config"))?,
        )?;
        let field = |k: &str| {
            m.get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::format(format!("prompt state without `{k}`")))
        };
        if field("dim")? as usize != backbone.dim || field("heads")? as usize != backbone.heads {
            return Err(Error::format("prompt state was saved for another backbone"));
        }
        let mut engine = Self::new(config, backbone, field("seed")?)?;
        let tasks = m
            .get("tasks")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::format("prompt state without task list"))?;
        for task in tasks {
            let t = task.get("t").and_then(|v| v.as_u64());
            let j = task.get("J_t").and_then(|v| v.as_u64());
            let (Some(t), Some(j)) = (t, j) else {
                return Err(Error::format("malformed task entry"));
            };
            engine.begin_task(t as usize, j as usize)?;
        }
        if let Some(last) = tasks.last() {
            if last.get("frozen").and_then(|v| v.as_bool()) == Some(true) {
                engine.freeze_all();
            }
        }
        let mut missing = None;
        engine.visit_params_mut(&mut |name, t| match archive.get(name) {
            Ok(src) if src.shape() == t.shape() => {
                let rg = t.requires_grad;
                *t = src.detached();
                t.requires_grad = rg;
            }
            _ => missing = missing.take().or(Some(name.to_string())),
        });
        if let Some(name) = missing {
            return Err(Error::format(format!("prompt tensor `{name}` missing or misshaped")));
        }
        Ok(engine)
    }

    /// Freezes every group, including the current one.
    pub fn freeze_all(&mut self) {
        for g in &mut self.groups {
            g.frozen = true;
            for l in &mut g.layers {
                for t in l.key_kernels.iter_mut().chain(&mut l.value_kernels).flatten() {
                    t.requires_grad = false;
                }
                l.prompt_keys.requires_grad = false;
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>, backbone: &BackboneConfig) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?, backbone)
    }

    /// Checksum of all frozen groups' generators and keys.
    pub fn frozen_checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        self.visit_groups(&mut |name, t, frozen| {
            if frozen {
                bytes.extend_from_slice(name.as_bytes());
                bytes.extend_from_slice(&t.checksum().to_le_bytes());
            }
        });
        crate::util::fnv1a64(&bytes)
    }

    /// Checksum of the generators and keys of groups `< t` (1-based).
    pub fn groups_checksum_before(&self, t: usize) -> u64 {
        let mut bytes = Vec::new();
        for g in self.groups.iter().filter(|g| g.task < t) {
            for l in &g.layers {
                for k in l.key_kernels.iter().chain(&l.value_kernels).flatten() {
                    bytes.extend_from_slice(&k.checksum().to_le_bytes());
                }
                bytes.extend_from_slice(&l.prompt_keys.checksum().to_le_bytes());
            }
        }
        crate::util::fnv1a64(&bytes)
    }

    fn visit_groups(&self, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        for g in &self.groups {
            for (slot, gl) in g.layers.iter().enumerate() {
                let l = self.config.prompted_layers[slot];
                for h in 0..self.heads {
                    for m in 0..g.count {
                        f(&format!("group{}.l{l}.h{h}.key{m}", g.task), &gl.key_kernels[h][m], g.frozen);
                        f(&format!("group{}.l{l}.h{h}.value{m}", g.task), &gl.value_kernels[h][m], g.frozen);
                    }
                }
                f(&format!("group{}.l{l}.prompt_keys", g.task), &gl.prompt_keys, g.frozen);
            }
        }
    }
}

impl PromptProvider for PromptEngine {
    fn provide<'m>(
        &'m self,
        session: &mut Session<'m>,
        layer: usize,
        cls: Var,
    ) -> Result<Option<LayerPrefix>> {
        if self.layer_slot(layer).is_none() || self.groups.is_empty() {
            return Ok(None);
        }
        self.layer_prefix(session, layer, cls).map(Some)
    }
}

impl Parameterized for PromptEngine {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.visit_shared(f);
        self.visit_groups(&mut |name, t, _| f(name, t));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let heads = self.heads;
        for (slot, se) in self.shared.iter_mut().enumerate() {
            let l = self.config.prompted_layers[slot];
            for h in 0..heads {
                f(&format!("se.l{l}.h{h}.key"), &mut se.keys[h]);
                f(&format!("se.l{l}.h{h}.value"), &mut se.values[h]);
            }
        }
        for (name, t) in self.projection.tensors_mut() {
            f(&format!("projection.{name}"), t);
        }
        for g in &mut self.groups {
            for (slot, gl) in g.layers.iter_mut().enumerate() {
                let l = self.config.prompted_layers[slot];
                for h in 0..heads {
                    for m in 0..g.count {
                        f(&format!("group{}.l{l}.h{h}.key{m}", g.task), &mut gl.key_kernels[h][m]);
                        f(&format!("group{}.l{l}.h{h}.value{m}", g.task), &mut gl.value_kernels[h][m]);
                    }
                }
                f(&format!("group{}.l{l}.prompt_keys", g.task), &mut gl.prompt_keys);
            }
        }
    }
}
