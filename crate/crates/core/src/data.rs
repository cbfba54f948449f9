//! Continual task streams: a procedural synthetic generator and a reader
//! for the `CPDS` raw-tensor dataset format.
//!
//! `CPDS` layout (little-endian): magic `CPDS`, `u32` task count, then per
//! task `u32` class count, that many `u32` class ids, `u32` sample count,
//! and per sample a `CPT1` image followed by a `u32` label.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{AttributeFile, ClassAttributes, TaskAttributes};
use crate::tensor::{read_u32, Tensor};
use crate::util::derive_rng;

const CPDS_MAGIC: &[u8; 4] = b"CPDS";

pub const SHAPES: [(&str, &str); 5] = [
    ("circle", "circular outline"),
    ("square", "square outline"),
    ("triangle", "triangular outline"),
    ("cross", "cross-shaped outline"),
    ("ring", "ring-shaped outline"),
];

pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [1.0, 0.1, 0.1]),
    ("green", [0.1, 0.9, 0.2]),
    ("blue", [0.15, 0.25, 1.0]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("magenta", [0.9, 0.1, 0.85]),
    ("cyan", [0.1, 0.85, 0.9]),
];

/// Stripe name and cycles across the image.
pub const STRIPES: [(&str, f64); 3] = [("low", 1.5), ("medium", 3.5), ("high", 7.0)];

/// One procedural class: shape × color × stripe frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub shape: usize,
    pub color: usize,
    pub stripes: usize,
}

impl Template {
    pub fn space() -> usize {
        SHAPES.len() * COLORS.len() * STRIPES.len()
    }

    pub fn from_index(i: usize) -> Self {
        let stripes = i % STRIPES.len();
        let color = (i / STRIPES.len()) % COLORS.len();
        let shape = i / (STRIPES.len() * COLORS.len());
        Self { shape, color, stripes }
    }

    pub fn name(&self) -> String {
        format!(
            "{} {} {}-stripe",
            COLORS[self.color].0, SHAPES[self.shape].0, STRIPES[self.stripes].0
        )
    }

    pub fn attributes(&self) -> Vec<String> {
        vec![
            format!("{} fill", COLORS[self.color].0),
            SHAPES[self.shape].1.to_string(),
            format!("{}-frequency stripes", STRIPES[self.stripes].0),
        ]
    }

    /// Renders one noisy, jittered sample with pixels scaled to [-1, 1].
    pub fn render<R: Rng + ?Sized>(&self, size: usize, noise: f64, rng: &mut R) -> Tensor {
        let s = size as f64;
        let cx = s / 2.0 + rng.random_range(-0.1..=0.1) * s;
        let cy = s / 2.0 + rng.random_range(-0.1..=0.1) * s;
        let radius = s * rng.random_range(0.28..=0.36);
        let phase = rng.random_range(0.0..2.0 * PI);
        let freq = STRIPES[self.stripes].1;
        let color = COLORS[self.color].1;
        let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
        let mut data = vec![-1.0; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f64 + 0.5 - cx) / radius;
                let dy = (y as f64 + 0.5 - cy) / radius;
                if !self.inside(dx, dy) {
                    continue;
                }
                let stripe = 0.5 + 0.5 * (2.0 * PI * freq * (x as f64 + y as f64) / s + phase).sin();
                let intensity = 0.35 + 0.65 * stripe;
                for c in 0..3 {
                    data[(c * size + y) * size + x] = 2.0 * color[c] * intensity - 1.0;
                }
            }
        }
        if noise > 0.0 {
            data.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
        Tensor::new(vec![3, size, size], data).expect("valid shape")
    }

    fn inside(&self, dx: f64, dy: f64) -> bool {
        match self.shape {
            0 => dx * dx + dy * dy <= 1.0,
            1 => dx.abs() <= 0.85 && dy.abs() <= 0.85,
            2 => dy <= 0.8 && dy >= -1.0 + 2.0 * dx.abs(),
            3 => (dx.abs() <= 0.3 && dy.abs() <= 1.0) || (dy.abs() <= 0.3 && dx.abs() <= 1.0),
            _ => {
                let r2 = dx * dx + dy * dy;
                (0.3..=1.0).contains(&r2)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct TaskData {
    /// 1-based task index.
    pub task: usize,
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub attributes: TaskAttributes,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<TaskData>,
}

impl TaskStream {
    /// Checks disjoint class sets, label membership and image shapes.
    pub fn validate(&self, image_shape: &[usize]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            if t.classes.is_empty() {
                return Err(Error::input(format!("task {} has no classes", t.task)));
            }
            for &c in &t.classes {
                if !seen.insert(c) {
                    return Err(Error::LabelCollision(c));
                }
            }
            for s in t.train.iter().chain(&t.test) {
                if !t.classes.contains(&s.label) {
                    return Err(Error::input(format!(
                        "label {} is not a class of task {}",
                        s.label, t.task
                    )));
                }
                if s.image.shape() != image_shape {
                    return Err(Error::dim(format!(
                        "image shape {:?}, expected {image_shape:?}",
                        s.image.shape()
                    )));
                }
            }
            if t.train.is_empty() || t.test.is_empty() {
                return Err(Error::input(format!("task {} needs train and test samples", t.task)));
            }
        }
        Ok(())
    }

    /// Attribute descriptions of all tasks in order.
    pub fn attribute_file(&self) -> AttributeFile {
        AttributeFile {
            tasks: self.tasks.iter().map(|t| t.attributes.clone()).collect(),
        }
    }

    /// Hash of every image and label, for determinism checks.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for t in &self.tasks {
            for s in t.train.iter().chain(&t.test) {
                bytes.extend_from_slice(&s.image.checksum().to_le_bytes());
                bytes.extend_from_slice(&(s.label as u64).to_le_bytes());
            }
        }
        crate::util::fnv1a64(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Read tasks from a `CPDS` file instead of generating them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cpds: Option<PathBuf>,
    /// Attribute file for `CPDS` streams; class ids name the classes
    /// otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attributes: Option<PathBuf>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            tasks: 5,
            classes_per_task: 4,
            samples_per_class: 64,
            noise_std: 0.1,
            seed: 0,
            cpds: None,
            attributes: None,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cpds.is_some() {
            return Ok(());
        }
        if self.tasks == 0 || self.classes_per_task == 0 {
            return Err(Error::config("stream needs at least one task and class"));
        }
        if self.samples_per_class < 2 {
            return Err(Error::config("stream.samples_per_class must be at least 2"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("stream.noise_std must be non-negative"));
        }
        let needed = self.tasks * self.classes_per_task;
        if needed > Template::space() {
            return Err(Error::config(format!(
                "{needed} classes requested but only {} templates exist",
                Template::space()
            )));
        }
        Ok(())
    }
}

/// Number of training samples out of `n` under the 80/20 split.
pub fn train_count(n: usize) -> usize {
    (n * 4 / 5).clamp(1, n.saturating_sub(1).max(1))
}

/// Builds the synthetic stream for `image_size × image_size` RGB images.
pub fn generate_stream(config: &StreamConfig, image_size: usize) -> Result<TaskStream> {
    config.validate()?;
    let mut order: Vec<usize> = (0..Template::space()).collect();
    order.shuffle(&mut derive_rng(config.seed, "templates", 0));
    let mut tasks = Vec::with_capacity(config.tasks);
    for t in 0..config.tasks {
        let mut classes = Vec::new();
        let mut descs = Vec::new();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for c in 0..config.classes_per_task {
            let label = t * config.classes_per_task + c;
            let template = Template::from_index(order[label]);
            let mut rng = derive_rng(config.seed, "samples", label as u64);
            let n_train = train_count(config.samples_per_class);
            for i in 0..config.samples_per_class {
                let sample = Sample {
                    image: template.render(image_size, config.noise_std, &mut rng),
                    label,
                };
                if i < n_train {
                    train.push(sample);
                } else {
                    test.push(sample);
                }
            }
            classes.push(label);
            descs.push(ClassAttributes {
                name: template.name(),
                attributes: template.attributes(),
                embeddings: None,
            });
        }
        tasks.push(TaskData {
            task: t + 1,
            classes,
            train,
            test,
            attributes: TaskAttributes {
                id: t + 1,
                classes: descs,
            },
        });
    }
    Ok(TaskStream { tasks })
}

/// Writes tasks in `CPDS` format; train samples precede test samples.
pub fn write_cpds(stream: &TaskStream, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CPDS_MAGIC)?;
    w.write_all(&(stream.tasks.len() as u32).to_le_bytes())?;
    for t in &stream.tasks {
        w.write_all(&(t.classes.len() as u32).to_le_bytes())?;
        for &c in &t.classes {
            w.write_all(&(c as u32).to_le_bytes())?;
        }
        let samples: Vec<&Sample> = t.train.iter().chain(&t.test).collect();
        w.write_all(&(samples.len() as u32).to_le_bytes())?;
        for s in samples {
            s.image.write_cpt1(&mut w)?;
            w.write_all(&(s.label as u32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a `CPDS` file. Each class's samples are split 80/20 in file
/// order. Without `attributes`, each class is named after its id and
/// described by that name.
pub fn read_cpds(path: impl AsRef<Path>, attributes: Option<&AttributeFile>) -> Result<TaskStream> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CPDS_MAGIC {
        return Err(Error::format("not a CPDS file"));
    }
    let n_tasks = read_u32(&mut r)? as usize;
    if let Some(a) = attributes {
        if a.tasks.len() != n_tasks {
            return Err(Error::input(format!(
                "attribute file describes {} tasks, dataset has {n_tasks}",
                a.tasks.len()
            )));
        }
    }
    let mut tasks = Vec::with_capacity(n_tasks);
    for ti in 0..n_tasks {
        let n_classes = read_u32(&mut r)? as usize;
        let classes = (0..n_classes)
            .map(|_| read_u32(&mut r).map(|c| c as usize))
            .collect::<Result<Vec<_>>>()?;
        let n_samples = read_u32(&mut r)? as usize;
        let mut by_class: Vec<Vec<Sample>> = vec![Vec::new(); n_classes];
        for _ in 0..n_samples {
            let image = Tensor::read_cpt1(&mut r)?;
            let label = read_u32(&mut r)? as usize;
            let slot = classes.iter().position(|&c| c == label).ok_or_else(|| {
                Error::input(format!("label {label} is not a class of task {}", ti + 1))
            })?;
            by_class[slot].push(Sample { image, label });
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for samples in by_class {
            let n_train = train_count(samples.len());
            for (i, s) in samples.into_iter().enumerate() {
                if i < n_train {
                    train.push(s);
                } else {
                    test.push(s);
                }
            }
        }
        let attrs = match attributes {
            Some(a) => {
                let t = a.tasks[ti].clone();
                if t.classes.len() != n_classes {
                    return Err(Error::input(format!(
                        "attribute file lists {} classes for task {}, dataset has {n_classes}",
                        t.classes.len(),
                        ti + 1
                    )));
                }
                t
            }
            None => TaskAttributes {
                id: ti + 1,
                classes: classes
                    .iter()
                    .map(|c| ClassAttributes {
                        name: format!("class {c}"),
                        attributes: vec![format!("class {c}")],
                        embeddings: None,
                    })
                    .collect(),
            },
        };
        tasks.push(TaskData {
            task: ti + 1,
            classes,
            train,
            test,
            attributes: attrs,
        });
    }
    Ok(TaskStream { tasks })
}

/// Loads the stream described by `config`.
pub fn load_stream(config: &StreamConfig, image_size: usize) -> Result<TaskStream> {
    match &config.cpds {
        Some(p) => {
            let attrs = config.attributes.as_ref().map(AttributeFile::load).transpose()?;
            read_cpds(p, attrs.as_ref())
        }
        None => generate_stream(config, image_size),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StreamConfig {
        StreamConfig {
            tasks: 2,
            classes_per_task: 3,
            samples_per_class: 10,
            seed: 7,
            ..StreamConfig::default()
        }
    }

    #[test]
    fn template_indexing_covers_space() {
        let all: BTreeSet<_> = (0..Template::space())
            .map(|i| {
                let t = Template::from_index(i);
                (t.shape, t.color, t.stripes)
            })
            .collect();
        assert_eq!(all.len(), 90);
    }

    #[test]
    fn stream_is_deterministic() {
        let a = generate_stream(&small(), 16).unwrap();
        let b = generate_stream(&small(), 16).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = generate_stream(&StreamConfig { seed: 8, ..small() }, 16).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn default_stream_labels_and_split() {
        let s = generate_stream(&StreamConfig::default(), 32).unwrap();
        s.validate(&[3, 32, 32]).unwrap();
        let labels: Vec<usize> = s.tasks.iter().flat_map(|t| t.classes.clone()).collect();
        assert_eq!(labels, (0..20).collect::<Vec<_>>());
        assert_eq!(s.tasks[0].train.len(), 4 * 51);
        assert_eq!(s.tasks[0].test.len(), 4 * 13);
    }

    #[test]
    fn too_many_classes_is_rejected() {
        let cfg = StreamConfig { tasks: 10, classes_per_task: 10, ..StreamConfig::default() };
        assert!(matches!(generate_stream(&cfg, 16), Err(Error::Config(_))));
    }

    #[test]
    fn collision_is_detected() {
        let mut s = generate_stream(&small(), 16).unwrap();
        s.tasks[1].classes[0] = 0;
        assert!(matches!(s.validate(&[3, 16, 16]), Err(Error::LabelCollision(0))));
    }

    #[test]
    fn cpds_round_trip() {
        let s = generate_stream(&small(), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stream.cpds");
        write_cpds(&s, &path).unwrap();
        let back = read_cpds(&path, Some(&s.attribute_file())).unwrap();
        back.validate(&[3, 8, 8]).unwrap();
        assert_eq!(back.tasks.len(), 2);
        assert_eq!(back.tasks[1].classes, s.tasks[1].classes);
        assert_eq!(back.tasks[0].train.len(), s.tasks[0].train.len());
        assert_eq!(back.tasks[0].attributes, s.tasks[0].attributes);
        let plain = read_cpds(&path, None).unwrap();
        assert_eq!(plain.tasks[0].attributes.classes[0].name, "class 0");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cpds");
        std::fs::write(&path, b"NOPE\0\0\0\0").unwrap();
        assert!(matches!(read_cpds(&path, None), Err(Error::Format(_))));
    }
}
