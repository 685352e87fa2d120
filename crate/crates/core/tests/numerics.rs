mod common;

use common::{rand_tensor, rng};
use dsmoe::error::Error;
use dsmoe::numerics::{checkpoint, softmax, Adam, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn product(a: &Tensor, b: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
    let z = t.matmul(x, y).unwrap();
    t.value(z).clone()
}

/// Textbook triple loop.
fn reference_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, p, q) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * q];
    for i in 0..m {
        for j in 0..q {
            for k in 0..p {
                out[i * q + j] += a.get(i, k) * b.get(k, j);
            }
        }
    }
    out
}

#[test]
fn matmul_examples() {
    let b = mat(&[&[5.0, 6.0], &[7.0, 8.0]]);
    assert_eq!(product(&Tensor::identity(2), &b), b);
    assert_eq!(product(&mat(&[&[1.0, 2.0], &[3.0, 4.0]]), &b).data(), &[19.0, 22.0, 43.0, 50.0]);
    let z = product(&Tensor::zeros(&[3, 4]), &rand_tensor(&mut rng(1), &[4, 2], 1.0));
    assert_eq!(z, Tensor::zeros(&[3, 2]));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(2);
    for _ in 0..200 {
        let (m, p, q) = (r.gen_range(1..7), r.gen_range(1..19), r.gen_range(1..7));
        let a = rand_tensor(&mut r, &[m, p], 2.0);
        let b = rand_tensor(&mut r, &[p, q], 2.0);
        let got = product(&a, &b);
        for (g, w) in got.data().iter().zip(reference_matmul(&a, &b)) {
            assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()), "{m}x{p}x{q}: {g} vs {w}");
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4, 2]));
    match t.matmul(a, b) {
        Err(Error::Shape(msg)) => assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}"),
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn mac_counter_is_exact() {
    let mut r = rng(3);
    let mut t = Tape::new();
    let dims = [(3, 5), (5, 2), (2, 7), (7, 1)];
    let mut x = t.constant(rand_tensor(&mut r, &[4, 3], 1.0));
    let mut want = 0u64;
    let mut rows = 4u64;
    for (p, q) in dims {
        let w = t.constant(rand_tensor(&mut r, &[p, q], 1.0));
        x = t.matmul(x, w).unwrap();
        want += rows * p as u64 * q as u64;
        rows = 4;
    }
    assert_eq!(t.macs(), want);
    t.set_profiling(false);
    let w = t.constant(Tensor::zeros(&[1, 3]));
    t.matmul(x, w).unwrap();
    assert_eq!(t.macs(), want);
    // elementwise ops never count
    let y = t.gelu(x);
    t.add(x, y).unwrap();
    assert_eq!(t.macs(), want);
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
    for (a, b) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((a - b).abs() < 1e-15);
    }
    let p = softmax(&[1000.0, 0.0]).unwrap();
    assert!(p.iter().all(|v| v.is_finite()));
    assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
    assert!(matches!(softmax(&[f64::NAN, 0.0]), Err(Error::Numeric(_))));
    let mut t = Tape::new();
    let x = t.constant(Tensor::row(&[f64::INFINITY, 0.0]));
    assert!(matches!(t.softmax(x), Err(Error::Numeric(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn softmax_rows_normalize_and_ignore_shifts(
        row in prop::collection::vec(-50.0f64..50.0, 1..20),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&row).unwrap();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let q = softmax(&shifted).unwrap();
        let diff = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff < 1e-12, "{}", diff);
    }
}

#[test]
fn cross_entropy_examples() {
    let ce = |logits: Tensor, y: &[usize]| {
        let mut t = Tape::new();
        let x = t.constant(logits);
        let l = t.cross_entropy(x, y)?;
        Ok::<f64, Error>(t.scalar(l))
    };
    assert!((ce(Tensor::zeros(&[1, 4]), &[2]).unwrap() - 4f64.ln()).abs() < 1e-15);
    assert!(ce(Tensor::row(&[20.0, -20.0]), &[0]).unwrap() < 1e-15);
    assert!(matches!(ce(Tensor::zeros(&[1, 4]), &[4]), Err(Error::Label(_))));

    let mut r = rng(4);
    let logits = rand_tensor(&mut r, &[6, 5], 4.0);
    let targets = [0, 4, 1, 1, 3, 2];
    let mut want = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let row = logits.row_slice(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        want -= (row[y].exp() / z).ln();
    }
    want /= 6.0;
    let got = ce(logits, &targets).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!(got > 0.0);
}

#[test]
fn backward_examples() {
    let mut s = ParamStore::new();
    let w = s.add("w", rand_tensor(&mut rng(5), &[3, 4], 1.0));
    let unused = s.add("unused", Tensor::row(&[1.0, 2.0]));
    let xv = [0.5, -1.0, 2.0, 3.0];
    s.zero_grad();
    let mut t = Tape::new();
    let wv = t.param(&s, w);
    let x = t.constant(Tensor::new(vec![4, 1], xv.to_vec()).unwrap());
    let y = t.matmul(wv, x).unwrap();
    let l = t.sum(y);
    t.backward(l, &mut s).unwrap();
    // d sum(Wx) / dW = 1 x^T
    let g = s.grad(w).unwrap();
    for i in 0..3 {
        assert_eq!(&g[i * 4..i * 4 + 4], &xv);
    }
    assert!(s.grad(unused).unwrap().iter().all(|&v| v == 0.0));
    assert!(matches!(t.backward(y, &mut s), Err(Error::Contract(_))));
}

#[test]
fn backward_accumulates_across_calls() {
    let mut s = ParamStore::new();
    let a = s.add("a", Tensor::row(&[1.0, -2.0]));
    s.zero_grad();
    for _ in 0..3 {
        let mut t = Tape::new();
        let v = t.param(&s, a);
        let l = t.sum(v);
        t.backward(l, &mut s).unwrap();
    }
    assert_eq!(s.grad(a).unwrap(), &[3.0, 3.0]);
}

fn training_run(seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let w = s.add("w", rand_tensor(&mut r, &[4, 3], 1.0));
    let x = rand_tensor(&mut r, &[5, 4], 1.0);
    let mut opt = Adam::new(1e-2);
    for _ in 0..50 {
        s.zero_grad();
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.param(&s, w));
        let y = t.matmul(xv, wv).unwrap();
        let l = t.cross_entropy(y, &[0, 1, 2, 1, 0]).unwrap();
        t.backward(l, &mut s).unwrap();
        opt.step(&mut s).unwrap();
    }
    assert_eq!(opt.steps(), 50);
    s
}

#[test]
fn identical_runs_are_bit_identical() {
    let a = training_run(6);
    let b = training_run(6);
    let ids: Vec<_> = a.ids().collect();
    assert_eq!(a.checksum(&ids), b.checksum(&ids));
    assert_eq!(checkpoint::encode(&a), checkpoint::encode(&b));
}

#[test]
fn checkpoint_file_round_trip() {
    let s = training_run(7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ckpt");
    checkpoint::save(&s, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    for (id, p) in s.iter() {
        let q = back.get(id);
        assert_eq!(p.name, q.name);
        assert_eq!(p.value.shape(), q.value.shape());
        assert!(p.value.data().iter().zip(q.value.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(checkpoint::decode(&bytes).is_err());
}
