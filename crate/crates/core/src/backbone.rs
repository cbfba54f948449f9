//! Toy vision transformer with prefix-tuning injection points.
//!
//! The encoder is pre-norm: `z' = z + MHSA(LN(z))`, `out = z' + FFN(LN(z'))`.
//! Prefixes are concatenated to each head's already-projected keys and
//! values; queries are never prefixed. Weights start frozen.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::session::{Parameterized, Session};
use crate::tensor::Tensor;
use crate::util::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            dim: 32,
            heads: 4,
            layers: 4,
            ffn_hidden: 64,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("dim", self.dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_hidden", self.ffn_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("backbone.{name} must be positive")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "backbone.dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::config("backbone.init_std must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patches plus the CLS token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_features(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}

/// Per-head key and value prefixes for one layer, each `l_p × d_h`.
#[derive(Debug, Clone)]
pub struct LayerPrefix<T = Var> {
    pub keys: Vec<T>,
    pub values: Vec<T>,
}

/// Concrete prefixes for a set of layers; all share one prefix length.
#[derive(Debug, Clone, Default)]
pub struct PrefixSet {
    pub layers: BTreeMap<usize, LayerPrefix<Tensor>>,
}

impl PrefixSet {
    pub fn prompt_length(&self) -> Option<usize> {
        self.layers
            .values()
            .next()
            .and_then(|p| p.keys.first())
            .map(|t| t.shape()[0])
    }

    pub fn validate(&self, heads: usize, head_dim: usize) -> Result<()> {
        let Some(lp) = self.prompt_length() else {
            return Ok(());
        };
        for (l, p) in &self.layers {
            if p.keys.len() != heads || p.values.len() != heads {
                return Err(Error::dim(format!("layer {l} prefix needs {heads} heads")));
            }
            for t in p.keys.iter().chain(&p.values) {
                if t.shape() != [lp, head_dim] {
                    return Err(Error::dim(format!(
                        "layer {l} prefix has shape {:?}, expected [{lp}, {head_dim}]",
                        t.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Supplies prefixes during a forward pass. `layer` is 0-based and `cls`
/// is the CLS row entering that layer.
pub trait PromptProvider {
    fn provide<'m>(
        &'m self,
        session: &mut Session<'m>,
        layer: usize,
        cls: Var,
    ) -> Result<Option<LayerPrefix>>;
}

/// Provider that never prompts.
pub struct NoPrompts;

impl PromptProvider for NoPrompts {
    fn provide<'m>(&'m self, _: &mut Session<'m>, _: usize, _: Var) -> Result<Option<LayerPrefix>> {
        Ok(None)
    }
}

/// Provider returning fixed prefixes, bound as parameters so gradients
/// reach them when they are trainable.
pub struct StaticPrefixes(pub PrefixSet);

impl PromptProvider for StaticPrefixes {
    fn provide<'m>(
        &'m self,
        session: &mut Session<'m>,
        layer: usize,
        _: Var,
    ) -> Result<Option<LayerPrefix>> {
        Ok(self.0.layers.get(&layer).map(|p| LayerPrefix {
            keys: p.keys.iter().map(|t| session.param(t)).collect(),
            values: p.values.iter().map(|t| session.param(t)).collect(),
        }))
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_ffn1: Tensor,
    pub b_ffn1: Tensor,
    pub w_ffn2: Tensor,
    pub b_ffn2: Tensor,
}

impl EncoderLayer {
    fn fields(&self) -> [(&'static str, &Tensor); 13] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_query", &self.w_query),
            ("w_key", &self.w_key),
            ("w_value", &self.w_value),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_ffn1", &self.w_ffn1),
            ("b_ffn1", &self.b_ffn1),
            ("w_ffn2", &self.w_ffn2),
            ("b_ffn2", &self.b_ffn2),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 13] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("w_query", &mut self.w_query),
            ("w_key", &mut self.w_key),
            ("w_value", &mut self.w_value),
            ("w_out", &mut self.w_out),
            ("b_out", &mut self.b_out),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("w_ffn1", &mut self.w_ffn1),
            ("b_ffn1", &mut self.b_ffn1),
            ("w_ffn2", &mut self.w_ffn2),
            ("b_ffn2", &mut self.b_ffn2),
        ]
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final-norm CLS row, `1 × d`.
    pub final_cls: Var,
    /// CLS row of each layer's output, one per layer.
    pub layerwise_cls: Vec<Var>,
}

#[derive(Debug)]
pub struct Backbone {
    config: BackboneConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub cls_token: Tensor,
    pub positions: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    forward_passes: AtomicU64,
}

impl Clone for Backbone {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            patch_weight: self.patch_weight.clone(),
            patch_bias: self.patch_bias.clone(),
            cls_token: self.cls_token.clone(),
            positions: self.positions.clone(),
            layers: self.layers.clone(),
            final_gain: self.final_gain.clone(),
            final_bias: self.final_bias.clone(),
            forward_passes: AtomicU64::new(self.forward_passes()),
        }
    }
}

impl Backbone {
    /// Seeded Gaussian initialization; every parameter starts frozen.
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(config.seed, "backbone", 0);
        let d = config.dim;
        let std = config.init_std;
        let mut g = |shape: &[usize]| Tensor::gaussian(shape, std, &mut rng);
        let patch_weight = g(&[config.patch_features(), d]);
        let cls_token = g(&[1, d]);
        let positions = g(&[config.tokens(), d]);
        let layers = (0..config.layers)
            .map(|_| EncoderLayer {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                w_query: g(&[d, d]),
                w_key: g(&[d, d]),
                w_value: g(&[d, d]),
                w_out: g(&[d, d]),
                b_out: Tensor::zeros(&[d]),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w_ffn1: g(&[d, config.ffn_hidden]),
                b_ffn1: Tensor::zeros(&[config.ffn_hidden]),
                w_ffn2: g(&[config.ffn_hidden, d]),
                b_ffn2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            patch_weight,
            patch_bias: Tensor::zeros(&[d]),
            cls_token,
            positions,
            layers,
            final_gain: Tensor::full(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
            forward_passes: AtomicU64::new(0),
            config,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Number of completed calls to [`Backbone::forward`].
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    /// Rearranges a `channels × S × S` image into `N × (channels·p·p)`
    /// patch rows, patches in row-major grid order.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if image.shape() != c.image_shape() {
            return Err(Error::dim(format!(
                "image shape {:?}, expected {:?}",
                image.shape(),
                c.image_shape()
            )));
        }
        let (s, p) = (c.image_size, c.patch_size);
        let side = s / p;
        let mut data = Vec::with_capacity(c.num_patches() * c.patch_features());
        for pr in 0..side {
            for pc in 0..side {
                for ch in 0..c.channels {
                    for y in 0..p {
                        let row = (ch * s + pr * p + y) * s + pc * p;
                        data.extend_from_slice(&image.data()[row..row + p]);
                    }
                }
            }
        }
        Tensor::new(vec![c.num_patches(), c.patch_features()], data)
    }

    /// Embeds patches, prepends the CLS token and adds positions:
    /// `(N+1) × d`.
    pub fn patch_embed<'m>(&'m self, s: &mut Session<'m>, image: &Tensor) -> Result<Var> {
        let patches = s.constant(self.patchify(image)?);
        let w = s.param(&self.patch_weight);
        let b = s.param(&self.patch_bias);
        let emb = s.graph.matmul(patches, w)?;
        let emb = s.graph.add_bias(emb, b)?;
        let cls = s.param(&self.cls_token);
        let z = s.graph.concat_rows(&[cls, emb])?;
        let pos = s.param(&self.positions);
        s.graph.add(z, pos)
    }

    fn check_prefix(&self, s: &Session<'_>, prefix: &LayerPrefix) -> Result<()> {
        let (h, dh) = (self.config.heads, self.config.head_dim());
        if prefix.keys.len() != h || prefix.values.len() != h {
            return Err(Error::dim(format!(
                "prefix has {}/{} key/value heads, backbone has {h}",
                prefix.keys.len(),
                prefix.values.len()
            )));
        }
        let lp = s.graph.value(prefix.keys[0]).shape()[0];
        for &v in prefix.keys.iter().chain(&prefix.values) {
            let shape = s.graph.value(v).shape();
            if shape != [lp, dh] {
                return Err(Error::dim(format!(
                    "prefix block {shape:?}, expected [{lp}, {dh}]"
                )));
            }
        }
        Ok(())
    }

    /// Multi-head self-attention of layer `layer` over an already-normalized
    /// input, with optional prefixes. Returns the projected output and the
    /// per-head attention weights.
    pub fn attention_detailed<'m>(
        &'m self,
        s: &mut Session<'m>,
        layer: usize,
        x: Var,
        prefix: Option<&LayerPrefix>,
    ) -> Result<(Var, Vec<Var>)> {
        let lw = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::dim(format!("no layer {layer}")))?;
        if let Some(p) = prefix {
            self.check_prefix(s, p)?;
        }
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let wq = s.param(&lw.w_query);
        let wk = s.param(&lw.w_key);
        let wv = s.param(&lw.w_value);
        let q = s.graph.matmul(x, wq)?;
        let k = s.graph.matmul(x, wk)?;
        let v = s.graph.matmul(x, wv)?;
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut weights = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = s.graph.slice_cols(q, h * dh, dh)?;
            let mut kh = s.graph.slice_cols(k, h * dh, dh)?;
            let mut vh = s.graph.slice_cols(v, h * dh, dh)?;
            if let Some(p) = prefix {
                kh = s.graph.concat_rows(&[p.keys[h], kh])?;
                vh = s.graph.concat_rows(&[p.values[h], vh])?;
            }
            let scores = s.graph.matmul_nt(qh, kh)?;
            let scores = s.graph.scale(scores, scale);
            let attn = s.graph.softmax_rows(scores)?;
            heads.push(s.graph.matmul(attn, vh)?);
            weights.push(attn);
        }
        let cat = s.graph.concat_cols(&heads)?;
        let wo = s.param(&lw.w_out);
        let bo = s.param(&lw.b_out);
        let out = s.graph.matmul(cat, wo)?;
        Ok((s.graph.add_bias(out, bo)?, weights))
    }

    pub fn attention_with_prefix<'m>(
        &'m self,
        s: &mut Session<'m>,
        layer: usize,
        x: Var,
        prefix: Option<&LayerPrefix>,
    ) -> Result<Var> {
        self.attention_detailed(s, layer, x, prefix).map(|(out, _)| out)
    }

    pub fn encoder_layer<'m>(
        &'m self,
        s: &mut Session<'m>,
        layer: usize,
        z: Var,
        prefix: Option<&LayerPrefix>,
    ) -> Result<Var> {
        let lw = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::dim(format!("no layer {layer}")))?;
        let (g1, b1) = (s.param(&lw.ln1_gain), s.param(&lw.ln1_bias));
        let h = s.graph.layer_norm(z, g1, b1)?;
        let attn = self.attention_with_prefix(s, layer, h, prefix)?;
        let z = s.graph.add(z, attn)?;

        let (g2, b2) = (s.param(&lw.ln2_gain), s.param(&lw.ln2_bias));
        let h = s.graph.layer_norm(z, g2, b2)?;
        let (w1, bf1) = (s.param(&lw.w_ffn1), s.param(&lw.b_ffn1));
        let (w2, bf2) = (s.param(&lw.w_ffn2), s.param(&lw.b_ffn2));
        let h = s.graph.matmul(h, w1)?;
        let h = s.graph.add_bias(h, bf1)?;
        let h = s.graph.gelu(h);
        let h = s.graph.matmul(h, w2)?;
        let h = s.graph.add_bias(h, bf2)?;
        s.graph.add(z, h)
    }

    /// One pass over all layers. Before layer `l` runs, the provider sees
    /// the CLS row entering it (the post-embedding CLS for layer 0).
    pub fn forward<'m>(
        &'m self,
        s: &mut Session<'m>,
        image: &Tensor,
        provider: &'m dyn PromptProvider,
    ) -> Result<ForwardOutput> {
        let mut z = self.patch_embed(s, image)?;
        let mut layerwise = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let cls = s.graph.slice_rows(z, 0, 1)?;
            let prefix = provider.provide(s, l, cls)?;
            z = self.encoder_layer(s, l, z, prefix.as_ref())?;
            layerwise.push(s.graph.slice_rows(z, 0, 1)?);
        }
        let last = *layerwise.last().expect("at least one layer");
        let (g, b) = (s.param(&self.final_gain), s.param(&self.final_bias));
        let final_cls = s.graph.layer_norm(last, g, b)?;
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        Ok(ForwardOutput {
            final_cls,
            layerwise_cls: layerwise,
        })
    }

    /// Final CLS features without prompts or gradients.
    pub fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut s = Session::new();
        let out = self.forward(&mut s, image, &NoPrompts)?;
        Ok(s.graph.value(out.final_cls).data().to_vec())
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new(serde_json::json!({
            "kind": "backbone",
            "config": serde_json::to_value(&self.config)?,
        }));
        self.visit_params(&mut |name, t| a.push(name, t));
        Ok(a)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let config: BackboneConfig = serde_json::from_value(
            archive
                .manifest
                .get("config")
                .cloned()
                .ok_or_else(|| Error::format("backbone archive without config"))?,
        )?;
        let mut b = Self::new(config)?;
        let mut missing = None;
        b.visit_params_mut(&mut |name, t| match archive.get(name) {
            Ok(src) if src.shape() == t.shape() => *t = src.detached(),
            Ok(_) | Err(_) => missing = missing.take().or(Some(name.to_string())),
        });
        if let Some(name) = missing {
            return Err(Error::format(format!("weight `{name}` missing or misshaped")));
        }
        Ok(b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }
}

impl Parameterized for Backbone {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("patch.weight", &self.patch_weight);
        f("patch.bias", &self.patch_bias);
        f("cls_token", &self.cls_token);
        f("positions", &self.positions);
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in l.fields() {
                f(&format!("layer{i}.{name}"), t);
            }
        }
        f("final.gain", &self.final_gain);
        f("final.bias", &self.final_bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("patch.weight", &mut self.patch_weight);
        f("patch.bias", &mut self.patch_bias);
        f("cls_token", &mut self.cls_token);
        f("positions", &mut self.positions);
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in l.fields_mut() {
                f(&format!("layer{i}.{name}"), t);
            }
        }
        f("final.gain", &mut self.final_gain);
        f("final.bias", &mut self.final_bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use std::cell::RefCell;

    fn small() -> BackboneConfig {
        BackboneConfig {
            image_size: 16,
            patch_size: 8,
            dim: 8,
            heads: 2,
            layers: 2,
            ffn_hidden: 12,
            init_std: 0.3,
            ..BackboneConfig::default()
        }
    }

    fn image(cfg: &BackboneConfig, seed: u64) -> Tensor {
        Tensor::gaussian(&cfg.image_shape(), 1.0, &mut derive_rng(seed, "img", 0))
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let bad = BackboneConfig { dim: 30, ..BackboneConfig::default() };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig { patch_size: 5, ..BackboneConfig::default() };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig { layers: 0, ..BackboneConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patch_embed_shapes() {
        let cfg = small();
        let b = Backbone::new(cfg.clone()).unwrap();
        let mut s = Session::new();
        let z = b.patch_embed(&mut s, &image(&cfg, 1)).unwrap();
        assert_eq!(s.graph.value(z).shape(), &[5, 8]);

        let cfg8 = BackboneConfig { image_size: 8, ..small() };
        let b8 = Backbone::new(cfg8.clone()).unwrap();
        let mut s = Session::new();
        let z = b8.patch_embed(&mut s, &image(&cfg8, 1)).unwrap();
        assert_eq!(s.graph.value(z).shape(), &[2, 8]);

        let mut s = Session::new();
        assert!(b.patch_embed(&mut s, &Tensor::zeros(&[3, 8, 8])).is_err());
    }

    #[test]
    fn patchify_layout() {
        let cfg = BackboneConfig { image_size: 4, patch_size: 2, channels: 1, dim: 4, heads: 1, ..small() };
        let b = Backbone::new(cfg).unwrap();
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = b.patchify(&img).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn forward_is_deterministic_and_counts_passes() {
        let cfg = small();
        let b = Backbone::new(cfg.clone()).unwrap();
        let img = image(&cfg, 2);
        let f1 = b.features(&img).unwrap();
        let f2 = b.features(&img).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(b.forward_passes(), 2);

        let mut s = Session::new();
        let out = b.forward(&mut s, &img, &NoPrompts).unwrap();
        assert_eq!(out.layerwise_cls.len(), cfg.layers);
        assert_eq!(b.forward_passes(), 3);
    }

    /// Unprefixed multi-head attention computed with eager ops.
    fn reference_attention(b: &Backbone, x: &Tensor) -> Tensor {
        let lw = &b.layers[0];
        let dh = b.config.head_dim();
        let q = ops::matmul(x, &lw.w_query).unwrap();
        let k = ops::matmul(x, &lw.w_key).unwrap();
        let v = ops::matmul(x, &lw.w_value).unwrap();
        let n = x.shape()[0];
        let mut cat = vec![vec![0.0; b.config.dim]; n];
        for h in 0..b.config.heads {
            let cols = |t: &Tensor| {
                Tensor::from_rows(&(0..n).map(|r| t.row(r)[h * dh..(h + 1) * dh].to_vec()).collect::<Vec<_>>())
                    .unwrap()
            };
            let (qh, kh, vh) = (cols(&q), cols(&k), cols(&v));
            let scores = ops::matmul_nt(&qh, &kh).unwrap();
            let scaled = Tensor::new(
                scores.shape().to_vec(),
                scores.data().iter().map(|s| s / (dh as f64).sqrt()).collect(),
            )
            .unwrap();
            let a = ops::softmax(&scaled, 1).unwrap();
            let o = ops::matmul(&a, &vh).unwrap();
            for r in 0..n {
                cat[r][h * dh..(h + 1) * dh].copy_from_slice(o.row(r));
            }
        }
        let cat = Tensor::from_rows(&cat).unwrap();
        let out = ops::matmul(&cat, &lw.w_out).unwrap();
        out
    }

    #[test]
    fn unprefixed_attention_matches_plain_formula() {
        let cfg = small();
        let b = Backbone::new(cfg.clone()).unwrap();
        let x = Tensor::gaussian(&[5, 8], 1.0, &mut derive_rng(3, "x", 0));
        let mut s = Session::new();
        let xv = s.constant(x.clone());
        let out = b.attention_with_prefix(&mut s, 0, xv, None).unwrap();
        let expect = reference_attention(&b, &x);
        for (g, e) in s.graph.value(out).data().iter().zip(expect.data()) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn prefixed_attention_rows_sum_to_one() {
        let cfg = small();
        let b = Backbone::new(cfg.clone()).unwrap();
        let lp = 3;
        let mut s = Session::new();
        let x = s.constant(Tensor::gaussian(&[5, 8], 1.0, &mut derive_rng(4, "x", 0)));
        let mk = |s: &mut Session, i| s.constant(Tensor::gaussian(&[lp, 4], 1.0, &mut derive_rng(5, "p", i)));
        let prefix = LayerPrefix {
            keys: vec![mk(&mut s, 0), mk(&mut s, 1)],
            values: vec![mk(&mut s, 2), mk(&mut s, 3)],
        };
        let (_, weights) = b.attention_detailed(&mut s, 0, x, Some(&prefix)).unwrap();
        for w in weights {
            let t = s.graph.value(w);
            assert_eq!(t.shape(), &[5, lp + 5]);
            for r in 0..5 {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_value_rows_make_output_independent_of_prefix_keys() {
        // One token, one head: every value row equals the token's own value
        // row, so attention is a convex combination of identical rows.
        let cfg = BackboneConfig { image_size: 8, dim: 4, heads: 1, ..small() };
        let b = Backbone::new(cfg).unwrap();
        let x = Tensor::gaussian(&[1, 4], 1.0, &mut derive_rng(6, "x", 0));
        let v_row = ops::matmul(&x, &b.layers[0].w_value).unwrap();
        let pv = Tensor::from_rows(&vec![v_row.data().to_vec(); 3]).unwrap();
        let mut outputs = Vec::new();
        for seed in 0..3 {
            let mut s = Session::new();
            let xv = s.constant(x.clone());
            let pk = s.constant(Tensor::gaussian(&[3, 4], 5.0, &mut derive_rng(seed, "pk", 0)));
            let pvv = s.constant(pv.clone());
            let prefix = LayerPrefix { keys: vec![pk], values: vec![pvv] };
            let out = b.attention_with_prefix(&mut s, 0, xv, Some(&prefix)).unwrap();
            outputs.push(s.graph.value(out).clone());
        }
        let expect = ops::matmul(&v_row, &b.layers[0].w_out).unwrap();
        for o in outputs {
            for (g, e) in o.data().iter().zip(expect.data()) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn malformed_prefix_is_rejected() {
        let cfg = small();
        let b = Backbone::new(cfg.clone()).unwrap();
        let mut s = Session::new();
        let x = s.constant(Tensor::zeros(&[5, 8]));
        let bad = s.constant(Tensor::zeros(&[2, 3]));
        let prefix = LayerPrefix { keys: vec![bad, bad], values: vec![bad, bad] };
        assert!(matches!(
            b.attention_with_prefix(&mut s, 0, x, Some(&prefix)),
            Err(Error::Dimension(_))
        ));
        let prefix = LayerPrefix { keys: vec![bad], values: vec![bad] };
        assert!(b.attention_with_prefix(&mut s, 0, x, Some(&prefix)).is_err());
    }

    #[test]
    fn zero_output_projection_and_ffn_give_identity_layer() {
        let cfg = small();
        let mut b = Backbone::new(cfg).unwrap();
        for l in &mut b.layers {
            l.w_out = Tensor::zeros(l.w_out.shape());
            l.w_ffn2 = Tensor::zeros(l.w_ffn2.shape());
        }
        let z = Tensor::gaussian(&[5, 8], 1.0, &mut derive_rng(7, "z", 0));
        let mut s = Session::new();
        let zv = s.constant(z.clone());
        let out = b.encoder_layer(&mut s, 0, zv, None).unwrap();
        assert_eq!(s.graph.value(out).data(), z.data());
    }

    #[test]
    fn two_layer_stack_equals_composed_layers() {
        let cfg = small();
        let b = Backbone::new(cfg.clone()).unwrap();
        let img = image(&cfg, 8);
        let mut s = Session::new();
        let out = b.forward(&mut s, &img, &NoPrompts).unwrap();
        let stacked = s.graph.value(*out.layerwise_cls.last().unwrap()).clone();

        let mut s2 = Session::new();
        let z0 = b.patch_embed(&mut s2, &img).unwrap();
        let z0 = s2.graph.value(z0).clone();
        let mut s3 = Session::new();
        let zc = s3.constant(z0);
        let z1 = b.encoder_layer(&mut s3, 0, zc, None).unwrap();
        let z1 = s3.graph.value(z1).clone();
        let mut s4 = Session::new();
        let zc = s4.constant(z1);
        let z2 = b.encoder_layer(&mut s4, 1, zc, None).unwrap();
        assert_eq!(s4.graph.value(z2).row(0), stacked.row(0));
    }

    struct Recorder {
        seen: RefCell<Vec<(usize, Vec<f64>)>>,
    }

    impl PromptProvider for Recorder {
        fn provide<'m>(&'m self, s: &mut Session<'m>, layer: usize, cls: Var) -> Result<Option<LayerPrefix>> {
            self.seen.borrow_mut().push((layer, s.graph.value(cls).data().to_vec()));
            Ok(None)
        }
    }

    #[test]
    fn provider_sees_cls_entering_each_layer() {
        let cfg = small();
        let b = Backbone::new(cfg.clone()).unwrap();
        let img = image(&cfg, 9);
        let rec = Recorder { seen: RefCell::new(Vec::new()) };
        let mut s = Session::new();
        let out = b.forward(&mut s, &img, &rec).unwrap();
        let seen = rec.seen.borrow();
        assert_eq!(seen.len(), cfg.layers);
        let mut s2 = Session::new();
        let z0 = b.patch_embed(&mut s2, &img).unwrap();
        assert_eq!(seen[0].1, s2.graph.value(z0).row(0));
        assert_eq!(seen[1].1, s.graph.value(out.layerwise_cls[0]).data());
    }

    #[test]
    fn prefix_gradients_flow_but_backbone_stays_frozen() {
        let cfg = small();
        let b = Backbone::new(cfg.clone()).unwrap();
        let mut set = PrefixSet::default();
        let mk = |i| Tensor::gaussian(&[2, 4], 0.5, &mut derive_rng(10, "pre", i)).trainable();
        set.layers.insert(1, LayerPrefix { keys: vec![mk(0), mk(1)], values: vec![mk(2), mk(3)] });
        set.validate(2, 4).unwrap();
        let provider = StaticPrefixes(set);
        let img = image(&cfg, 11);
        let mut s = Session::new();
        let out = b.forward(&mut s, &img, &provider).unwrap();
        let loss = s.graph.inner(out.final_cls, &Tensor::full(&[1, 8], 1.0)).unwrap();
        let grads = s.graph.backward(loss).unwrap();
        let pk = &provider.0.layers[&1].keys[0];
        assert!(s.grad_of(&grads, pk).is_some());
        assert!(s.grad_of(&grads, &b.layers[0].w_query).is_none());
        let wq = s.bound_var(&b.layers[0].w_query).unwrap();
        assert!(grads.get(wq).is_none());
    }

    #[test]
    fn weight_file_round_trip() {
        let cfg = small();
        let b = Backbone::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.bin");
        b.save(&path).unwrap();
        let back = Backbone::load(&path).unwrap();
        assert_eq!(back.checksum(), b.checksum());
        assert_eq!(back.config(), b.config());
    }
}
