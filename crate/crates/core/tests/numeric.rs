use convprompt::archive::TensorArchive;
use convprompt::autograd::BackwardFault;
use convprompt::gradcheck::{finite_diff_check, GraphObjective};
use convprompt::ops;
use convprompt::Tensor;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn matrix(max_r: usize, max_c: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| tensor(vec![r, c]))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in matrix(5, 7)) {
        let p = ops::softmax(&x, 1).unwrap();
        let c = x.shape()[1];
        for r in 0..x.shape()[0] {
            let row = &p.data()[r * c..(r + 1) * c];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(x in matrix(4, 8)) {
        let c = x.shape()[1];
        let y = ops::layer_norm(&x, &Tensor::full(&[c], 1.0), &Tensor::zeros(&[c])).unwrap();
        for r in 0..x.shape()[0] {
            let row = &y.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn conv_is_linear_in_the_kernel(
        (x, k1, k2) in (2usize..7, 2usize..7)
            .prop_flat_map(|(a, b)| (Just(a), Just(b), 1..=a, 1..=b))
            .prop_flat_map(|(a, b, p, q)| (tensor(vec![a, b]), tensor(vec![p, q]), tensor(vec![p, q]))),
        alpha in -2.0f64..2.0,
    ) {
        let mix = Tensor::new(
            k1.shape().to_vec(),
            k1.data().iter().zip(k2.data()).map(|(a, b)| a + alpha * b).collect(),
        ).unwrap();
        let lhs = ops::conv2d_valid(&x, &mix).unwrap();
        let y1 = ops::conv2d_valid(&x, &k1).unwrap();
        let y2 = ops::conv2d_valid(&x, &k2).unwrap();
        prop_assert_eq!(lhs.shape(), &[x.shape()[0] - k1.shape()[0] + 1, x.shape()[1] - k1.shape()[1] + 1]);
        for i in 0..lhs.len() {
            prop_assert!((lhs.data()[i] - y1.data()[i] - alpha * y2.data()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(u in prop::collection::vec(-5.0f64..5.0, 1..10)) {
        let v: Vec<f64> = u.iter().rev().map(|x| x * 0.5 - 1.0).collect();
        let a = ops::cosine_similarity(&u, &v).unwrap();
        let b = ops::cosine_similarity(&v, &u).unwrap();
        prop_assert!((-1.0..=1.0).contains(&a.value));
        prop_assert!((a.value - b.value).abs() < 1e-15);
    }

    #[test]
    fn cpt1_round_trip_is_bit_exact(x in matrix(6, 6)) {
        let back = Tensor::from_cpt1_bytes(&x.to_cpt1_bytes()).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        prop_assert!(back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn matmul_with_identity() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
    let id = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    assert_eq!(ops::matmul(&a, &id).unwrap(), a);
    assert!(ops::matmul(&id, &a).is_err());
}

#[test]
fn archive_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weights.bin");
    let mut a = TensorArchive::new(serde_json::json!({"kind": "test", "version": 1}));
    a.push("w", &Tensor::from_rows(&[vec![0.1, -0.2], vec![1e-300, f64::MAX]]).unwrap());
    a.push("b", &Tensor::vector(vec![3.0]).unwrap());
    a.save(&path).unwrap();
    let back = TensorArchive::load(&path).unwrap();
    assert_eq!(back, a);
    assert!(back.get("missing").is_err());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, bytes).unwrap();
    assert!(TensorArchive::load(&path).is_err());
}

#[test]
fn composite_graph_gradients_match_finite_differences() {
    let se = Tensor::from_rows(&[vec![0.3, -0.1, 0.7, 0.2], vec![0.5, 0.9, -0.4, 0.1], vec![-0.6, 0.2, 0.8, 0.3]]).unwrap();
    let g1 = Tensor::from_rows(&[vec![0.2, -0.5], vec![0.4, 0.1]]).unwrap();
    let g2 = Tensor::from_rows(&[vec![-0.3, 0.6], vec![0.2, 0.7]]).unwrap();
    let q = Tensor::from_rows(&[vec![0.4, -0.2, 0.9]]).unwrap();
    let keys = Tensor::from_rows(&[vec![0.1, 0.5, -0.3], vec![0.6, -0.2, 0.4]]).unwrap();
    let params = vec![
        ("se".to_string(), se),
        ("g1".to_string(), g1),
        ("g2".to_string(), g2),
        ("q".to_string(), q),
        ("keys".to_string(), keys),
    ];
    let build = |g: &mut convprompt::autograd::Graph, v: &[convprompt::autograd::Var]| {
        let p1 = g.conv2d_valid(v[0], v[1])?;
        let p2 = g.conv2d_valid(v[0], v[2])?;
        let w = g.cosine_rows(v[3], v[4])?;
        let mixed = g.weighted_sum(w, &[p1, p2])?;
        let target = Tensor::full(&[2, 3], 0.05);
        g.l1_distance(mixed, &target)
    };
    let report = finite_diff_check(&params, GraphObjective::new(build)).unwrap();
    assert!(report.passes(1e-5), "{report:?}");
    let bad = finite_diff_check(&params, GraphObjective::new(build).with_fault(BackwardFault::ConvKernelGrad)).unwrap();
    assert!(!bad.passes(1e-5));
}
