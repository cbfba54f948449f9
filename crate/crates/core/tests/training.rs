use convprompt::backbone::{Backbone, BackboneConfig};
use convprompt::data::{generate_stream, load_stream, write_cpds, Sample, StreamConfig, TaskData, Template};
use convprompt::prompt::PromptConfig;
use convprompt::similarity::{AttributeSimilarity, Embedder, SimilarityConfig, SimilarityStrategy, TaskEvidence};
use convprompt::trainer::{Learner, TrainConfig};
use convprompt::{Error, Tensor};

fn backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: 16,
        ..BackboneConfig::default()
    }
}

fn stream(tasks: usize, classes: usize, samples: usize, seed: u64) -> StreamConfig {
    StreamConfig {
        tasks,
        classes_per_task: classes,
        samples_per_class: samples,
        seed,
        ..StreamConfig::default()
    }
}

fn learner(method: &str, train: TrainConfig) -> Learner {
    Learner::new(
        Backbone::new(backbone()).unwrap(),
        &PromptConfig::default(),
        TrainConfig {
            method: method.into(),
            ..train
        },
        SimilarityConfig::default().build().unwrap(),
        1,
    )
    .unwrap()
}

/// Plain logistic regression on fixed features, trained by full-batch
/// gradient descent; returns training accuracy.
fn logistic_oracle(features: &[Vec<f64>], labels: &[usize]) -> f64 {
    let d = features[0].len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..5000 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (f, &y) in features.iter().zip(labels) {
            let z: f64 = b + f.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let e = p - y as f64;
            gw.iter_mut().zip(f).for_each(|(g, x)| *g += e * x);
            gb += e;
        }
        w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= 0.5 * g / features.len() as f64);
        b -= 0.5 * gb / features.len() as f64;
    }
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(f, &y)| {
            let z: f64 = b + f.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            usize::from(z > 0.0) == y
        })
        .count();
    correct as f64 / features.len() as f64
}

#[test]
fn separable_toy_task_is_fit_within_200_steps() {
    let mut s = stream(1, 2, 10, 5);
    s.noise_std = 0.05;
    let data = generate_stream(&s, 16).unwrap();
    let mut task: TaskData = data.tasks[0].clone();
    task.train.truncate(16);
    let bb = Backbone::new(backbone()).unwrap();
    let feats: Vec<Vec<f64>> = task.train.iter().map(|x| bb.features(&x.image).unwrap()).collect();
    let labels: Vec<usize> = task.train.iter().map(|x| usize::from(x.label == task.classes[1])).collect();
    assert_eq!(logistic_oracle(&feats, &labels), 1.0, "oracle cannot separate the toy task");

    let mut l = learner("convprompt", TrainConfig::default());
    l.begin_task(&task).unwrap();
    let batch: Vec<&Sample> = task.train.iter().collect();
    let mut steps = 0;
    while l.accuracy(&task.train).unwrap() < 1.0 {
        assert!(steps < 200, "not fit after 200 steps");
        l.train_step(&batch, 1).unwrap();
        steps += 1;
    }
}

#[test]
fn tasks_must_arrive_in_order_with_fresh_labels() {
    let data = generate_stream(&stream(3, 2, 6, 2), 16).unwrap();
    let mut l = learner("convprompt", TrainConfig { epochs: 1, ..TrainConfig::default() });
    assert!(matches!(l.begin_task(&data.tasks[1]), Err(Error::TaskOrder { .. })));
    l.train_task(&data.tasks[0]).unwrap();
    let mut clash = data.tasks[1].clone();
    clash.classes[0] = data.tasks[0].classes[0];
    for smp in clash.train.iter_mut().chain(clash.test.iter_mut()) {
        if smp.label == data.tasks[1].classes[0] {
            smp.label = clash.classes[0];
        }
    }
    assert!(matches!(l.begin_task(&clash), Err(Error::LabelCollision(_))));
}

#[test]
fn strong_regularization_limits_drift() {
    let data = generate_stream(&stream(2, 2, 10, 4), 16).unwrap();
    let drift = |lambda: f64| {
        let mut l = learner("convprompt", TrainConfig { epochs: 3, lambda, ..TrainConfig::default() });
        l.train_task(&data.tasks[0]).unwrap();
        l.begin_task(&data.tasks[1]).unwrap();
        let batch: Vec<&Sample> = data.tasks[1].train.iter().collect();
        for _ in 0..15 {
            l.train_step(&batch, 2).unwrap();
        }
        l.method.regularization_value().unwrap().unwrap()
    };
    let free = drift(0.0);
    let tied = drift(1.0);
    assert!(tied < free, "drift with lambda 1: {tied}, with 0: {free}");
}

#[test]
fn zero_classifier_scores_chance_with_lowest_index_ties() {
    let data = generate_stream(&stream(1, 4, 10, 8), 16).unwrap();
    let mut l = learner("convprompt", TrainConfig::default());
    l.begin_task(&data.tasks[0]).unwrap();
    let acc = l.accuracy(&data.tasks[0].test).unwrap();
    assert!((acc - 0.25).abs() < 1e-12, "{acc}");
    for s in &data.tasks[0].test {
        assert_eq!(l.predict(&s.image).unwrap(), data.tasks[0].classes[0]);
    }
}

#[test]
fn seq_ft_moves_the_backbone_and_se_only_keeps_it() {
    let data = generate_stream(&stream(1, 2, 6, 3), 16).unwrap();
    // The head starts at zero, so the first step leaves the features alone.
    for (method, moves) in [("seq_ft", true), ("se_only", false), ("convprompt", false)] {
        let mut l = learner(method, TrainConfig { epochs: 2, ..TrainConfig::default() });
        let before = l.backbone_checksum();
        l.train_task(&data.tasks[0]).unwrap();
        assert_eq!(l.backbone_checksum() != before, moves, "{method}");
    }
}

#[test]
fn streams_are_seeded_and_disjoint() {
    let a = generate_stream(&stream(5, 4, 8, 7), 32).unwrap();
    let b = generate_stream(&stream(5, 4, 8, 7), 32).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    let mut labels: Vec<usize> = a.tasks.iter().flat_map(|t| t.classes.clone()).collect();
    labels.sort();
    assert_eq!(labels, (0..20).collect::<Vec<_>>());
    let c = generate_stream(&stream(5, 4, 8, 8), 32).unwrap();
    assert_ne!(a.checksum(), c.checksum());
    assert!(generate_stream(&stream(10, 10, 4, 0), 32).is_err());
}

#[test]
fn related_tasks_score_higher_than_unrelated() {
    let task = |id, templates: &[Template]| convprompt::similarity::TaskAttributes {
        id,
        classes: templates
            .iter()
            .map(|t| convprompt::similarity::ClassAttributes {
                name: t.name(),
                attributes: t.attributes(),
                embeddings: None,
            })
            .collect(),
    };
    let t = |shape, color, stripes| Template { shape, color, stripes };
    let base = task(1, &[t(0, 0, 0), t(1, 0, 1)]);
    let related = task(2, &[t(0, 0, 2), t(1, 0, 0)]);
    let unrelated = task(2, &[t(2, 3, 2), t(3, 4, 2)]);
    let score = |next: &convprompt::similarity::TaskAttributes| {
        let mut s = AttributeSimilarity::new(Embedder::deterministic(64).unwrap());
        let first = TaskEvidence { attributes: &base, class_means: None };
        s.commit(&first).unwrap();
        s.score(&TaskEvidence { attributes: next, class_means: None }).unwrap().value().unwrap()
    };
    assert!(score(&related) > score(&unrelated));
}

#[test]
fn cpds_round_trip_feeds_training() {
    let data = generate_stream(&stream(2, 2, 5, 6), 16).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stream.cpds");
    write_cpds(&data, &path).unwrap();
    let cfg = StreamConfig {
        cpds: Some(path),
        ..StreamConfig::default()
    };
    let back = load_stream(&cfg, 16).unwrap();
    assert_eq!(back.tasks.len(), 2);
    for (a, b) in back.tasks.iter().zip(&data.tasks) {
        assert_eq!(a.classes, b.classes);
        let imgs = |t: &TaskData| -> Vec<Tensor> { t.train.iter().chain(&t.test).map(|s| s.image.clone()).collect() };
        let mut x = imgs(a);
        let mut y = imgs(b);
        x.sort_by_key(|t| t.checksum());
        y.sort_by_key(|t| t.checksum());
        assert_eq!(x, y);
    }
    let mut l = learner("convprompt", TrainConfig { epochs: 1, ..TrainConfig::default() });
    l.train_task(&back.tasks[0]).unwrap();
}
