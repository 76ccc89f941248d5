use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_identity_is_identity() {
    let g = Graph::new(Precision::F64);
    let eye = g.constant(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let x = g.constant(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let y = eye.matmul(&x);
    assert_eq!(y.values(), x.values());
    assert_eq!(y.shape(), vec![3, 2]);
}

#[test]
fn grad_of_sum_of_squares() {
    let g = Graph::new(Precision::F64);
    let p = Param::new("x", &[3], vec![1.0, 2.0, 3.0]);
    let x = g.param(&p);
    let loss = x.sqr().sum();
    loss.backward();
    assert_eq!(p.grad(), vec![2.0, 4.0, 6.0]);
}

#[test]
fn max_over_axis_columns() {
    let g = Graph::new(Precision::F64);
    let x = g.constant(&[2, 2], &[1.0, 5.0, 3.0, 2.0]);
    let m = x.max_axis(0);
    assert_eq!(m.values(), vec![3.0, 5.0]);
}

#[test]
#[should_panic(expected = "matmul")]
fn matmul_shape_mismatch_names_shapes() {
    let g = Graph::new(Precision::F64);
    let a = g.constant(&[2, 3], &[0.0; 6]);
    let b = g.constant(&[2, 3], &[0.0; 6]);
    let _ = a.matmul(&b);
}

#[test]
#[should_panic(expected = "broadcast")]
fn add_shape_mismatch() {
    let g = Graph::new(Precision::F64);
    let a = g.constant(&[2, 3], &[0.0; 6]);
    let b = g.constant(&[4], &[0.0; 4]);
    let _ = a.add(&b);
}

#[test]
fn broadcast_add_row_vector() {
    let g = Graph::new(Precision::F64);
    let p = Param::new("b", &[3], vec![10.0, 20.0, 30.0]);
    let a = g.constant(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let b = g.param(&p);
    let y = a.add(&b);
    assert_eq!(y.values(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    y.sum().backward();
    assert_eq!(p.grad(), vec![2.0, 2.0, 2.0]);
}

#[test]
fn finite_difference_on_primitives() {
    // randomized inputs, chain rule on every primitive op
    let mut r = rng(7);
    use rand::Rng;
    let x: Vec<f64> = (0..12).map(|_| r.gen_range(0.25..1.5)).collect();
    let cases: Vec<(&str, Box<dyn Fn(&Graph, &Value) -> Value>)> = vec![
        ("add", Box::new(|g: &Graph, v: &Value| {
            let c = g.constant(&[3, 4], &[0.5; 12]);
            v.add(&c).sqr().sum()
        })),
        ("sub_mul", Box::new(|g: &Graph, v: &Value| {
            let c = g.constant(&[3, 4], &[0.25; 12]);
            v.sub(&c).mul(v).sum()
        })),
        ("div", Box::new(|g: &Graph, v: &Value| {
            let c = g.constant(&[3, 4], &[2.0; 12]);
            c.div(v).sum()
        })),
        ("matmul", Box::new(|g: &Graph, v: &Value| {
            let w = g.constant(&[4, 2], &[0.3, -0.2, 0.1, 0.4, -0.5, 0.2, 0.6, -0.1]);
            v.matmul(&w).sqr().sum()
        })),
        ("exp", Box::new(|_: &Graph, v: &Value| v.exp().sum())),
        ("sqrt", Box::new(|_: &Graph, v: &Value| v.sqrt().sum())),
        ("sin_cos", Box::new(|_: &Graph, v: &Value| v.sin().mul(&v.cos()).sum())),
        ("sigmoid", Box::new(|_: &Graph, v: &Value| v.sigmoid().sum())),
        ("elu", Box::new(|_: &Graph, v: &Value| v.add_scalar(-0.8).elu().sqr().sum())),
        ("mean", Box::new(|_: &Graph, v: &Value| v.sqr().mean())),
        ("sum_axis", Box::new(|_: &Graph, v: &Value| v.sum_axis(0).sqr().sum())),
        ("max_axis", Box::new(|_: &Graph, v: &Value| v.max_axis(1).sqr().sum())),
        ("layer_norm", Box::new(|_: &Graph, v: &Value| v.layer_norm(1e-5).sqr().sum())),
        ("slice_concat", Box::new(|_: &Graph, v: &Value| {
            let a = v.slice(1, 0, 2);
            let b = v.slice(1, 2, 2);
            Value::concat(&[&b, &a], 1).sqr().sum()
        })),
        ("transpose", Box::new(|_: &Graph, v: &Value| {
            let t = v.transpose();
            t.matmul(v).sum()
        })),
        ("reshape", Box::new(|_: &Graph, v: &Value| v.reshape(&[2, 6]).sqr().sum())),
        ("neg_scale", Box::new(|_: &Graph, v: &Value| v.neg().scale(1.5).exp().sum())),
        ("swish", Box::new(|_: &Graph, v: &Value| v.swish().sum())),
    ];
    for (name, f) in cases {
        let err = finite_difference_check(f.as_ref(), Precision::F64, &[3, 4], &x, 1e-5);
        assert!(err < 1e-6, "{}: finite difference error {} too large", name, err);
    }
}

#[test]
fn fd_check_sum_of_squares_random() {
    let mut r = rng(1);
    use rand::Rng;
    let x: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
    let err = finite_difference_check(
        |_, v| v.sqr().sum(),
        Precision::F64,
        &[8],
        &x,
        1e-5,
    );
    assert!(err < 1e-6, "error {}", err);
}

#[test]
fn fd_check_constant_function_is_zero() {
    let err = finite_difference_check(
        |g, v| v.scale(0.0).sum().add(&g.scalar(3.0)),
        Precision::F64,
        &[4],
        &[1.0, 2.0, 3.0, 4.0],
        1e-4,
    );
    assert_eq!(err, 0.0);
}

#[test]
fn gradient_accumulates_across_backward_passes() {
    let p = Param::new("x", &[2], vec![1.0, 2.0]);
    for _ in 0..2 {
        let g = Graph::new(Precision::F64);
        let x = g.param(&p);
        x.sqr().sum().backward();
    }
    assert_eq!(p.grad(), vec![4.0, 8.0]);
    p.zero_grad();
    assert_eq!(p.grad(), vec![0.0, 0.0]);
}

#[test]
fn forward_identical_with_grads_disabled() {
    let run = |enabled: bool| {
        let g = Graph::new(Precision::F32);
        g.set_grad_enabled(enabled);
        let p = Param::new("w", &[2, 2], vec![0.1, -0.7, 0.33, 1.25]);
        let x = g.constant(&[2, 2], &[1.5, -0.25, 0.125, 2.0]);
        x.matmul(&g.param(&p)).elu().layer_norm(1e-5).sum().values()
    };
    let a = run(true);
    let b = run(false);
    assert_eq!(a[0].to_bits(), b[0].to_bits());
}

#[test]
fn determinism_same_seed_same_results() {
    let run = || {
        let mut r = rng(99);
        let g = Graph::new(Precision::F32);
        let p = Param::randn("w", &[4, 4], 0.5, &mut r);
        let x = g.param(&p);
        let y = x.matmul(&x).sigmoid().mean();
        y.backward();
        (y.values(), p.grad())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1[0].to_bits(), v2[0].to_bits());
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn f32_mode_rounds_values() {
    let g = Graph::new(Precision::F32);
    let x = g.constant(&[1], &[0.1]);
    assert_eq!(x.values()[0], 0.1f32 as f64);
}

#[test]
fn container_round_trip_bitexact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    let mut r = rng(5);
    let tensors = vec![
        NamedTensor {
            name: "a".into(),
            shape: vec![2, 3],
            values: (0..6).map(|i| i as f64 * 0.37).collect(),
            dtype: DType::F64,
        },
        NamedTensor {
            name: "b.weight".into(),
            shape: vec![4],
            values: {
                use rand::Rng;
                (0..4).map(|_| r.gen_range(-1.0f64..1.0) as f32 as f64).collect()
            },
            dtype: DType::F32,
        },
    ];
    write_tensors(&path, &tensors).unwrap();
    let back = read_tensors(&path).unwrap();
    assert_eq!(back.len(), 2);
    for (t, b) in tensors.iter().zip(&back) {
        assert_eq!(t.name, b.name);
        assert_eq!(t.shape, b.shape);
        for (x, y) in t.values.iter().zip(&b.values) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn container_corrupt_header_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.bin");
    std::fs::write(&path, b"NOPE").unwrap();
    assert!(matches!(read_tensors(&path), Err(ContainerError::BadHeader)));
}

#[test]
fn container_truncated_record_names_index() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bin");
    let tensors = vec![NamedTensor {
        name: "x".into(),
        shape: vec![8],
        values: vec![1.0; 8],
        dtype: DType::F64,
    }];
    write_tensors(&path, &tensors).unwrap();
    let data = std::fs::read(&path).unwrap();
    std::fs::write(&path, &data[..data.len() - 10]).unwrap();
    match read_tensors(&path) {
        Err(ContainerError::BadRecord { index: 0, .. }) => {}
        other => panic!("expected BadRecord, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn adam_minimizes_quadratic() {
    let mut params = ParamSet::new();
    let p = params.add(Param::new("x", &[2], vec![5.0, -3.0]));
    let mut opt = Adam::new(&params, 0.1);
    for _ in 0..500 {
        params.zero_grad();
        let g = Graph::new(Precision::F64);
        let x = g.param(&p);
        x.sqr().sum().backward();
        opt.step(&params);
    }
    let v = p.values();
    assert!(v[0].abs() < 1e-3 && v[1].abs() < 1e-3, "{:?}", v);
}

#[test]
fn adamw_lr_decay() {
    let params = ParamSet::new();
    let mut opt = AdamW::new(&params, 5e-3);
    opt.lr_decay = 0.00023;
    for _ in 0..10 {
        opt.step(&params);
    }
    let expected = 5e-3 * (1.0 - 0.00023f64).powi(10);
    assert!((opt.lr - expected).abs() < 1e-12);
}

#[test]
fn detach_blocks_gradient() {
    let g = Graph::new(Precision::F64);
    let p = Param::new("x", &[2], vec![1.0, 2.0]);
    let x = g.param(&p);
    let y = x.detach().mul(&x).sum();
    y.backward();
    // d/dx (c * x) = c, with c = values of x
    assert_eq!(p.grad(), vec![1.0, 2.0]);
}
