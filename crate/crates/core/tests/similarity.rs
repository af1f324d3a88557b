mod common;

use common::*;
use fedmcp_core::similarity::{cka, cosine_mean, hsic, DEFAULT_EPS};
use fedmcp_core::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn cka_value(x: &Tensor, y: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let c = cka(&mut tape, a, b, DEFAULT_EPS).unwrap();
    tape.item(c)
}

fn gram(x: &Tensor) -> Vec<Vec<f64>> {
    let rows = to_rows(x);
    rows.iter()
        .map(|a| rows.iter().map(|b| a.iter().zip(b).map(|(p, q)| p * q).sum()).collect())
        .collect()
}

#[test]
fn hsic_matches_double_sum_oracle() {
    let mut r = rng(11);
    let x = random_tensor(&mut r, &[4, 2]);
    let y = random_tensor(&mut r, &[4, 3]);
    let (k, l) = (gram(&x), gram(&y));
    let mut tape = Tape::new();
    let kv = tape.constant(Tensor::from_rows(&k));
    let lv = tape.constant(Tensor::from_rows(&l));
    let h = hsic(&mut tape, kv, lv).unwrap();
    assert!((tape.item(h) - hsic_double_sum(&k, &l)).abs() < 1e-10);
}

#[test]
fn cka_matches_centered_feature_oracle() {
    let mut r = rng(12);
    let x = random_tensor(&mut r, &[6, 4]);
    let y = random_tensor(&mut r, &[6, 4]);
    let expected = cka_centered_features(&to_rows(&x), &to_rows(&y));
    assert!((cka_value(&x, &y) - expected).abs() < 1e-8);
}

#[test]
fn cka_self_scale_and_rotation() {
    let mut r = rng(13);
    let x = random_tensor(&mut r, &[5, 3]);
    assert!((cka_value(&x, &x) - 1.0).abs() < 1e-10);
    let scaled = Tensor::new(vec![5, 3], x.data().iter().map(|v| -3.5 * v).collect()).unwrap();
    assert!((cka_value(&x, &scaled) - 1.0).abs() < 1e-10);
    let q = random_orthogonal(&mut r, 3);
    let rotated = Tensor::from_rows(&matmul_plain(&to_rows(&x), &q));
    assert!((cka_value(&x, &rotated) - 1.0).abs() < 1e-10);
}

#[test]
fn cka_gradient_matches_finite_differences() {
    let mut r = rng(14);
    let inputs = [random_tensor(&mut r, &[4, 3]), random_tensor(&mut r, &[4, 3])];
    let worst = gradcheck(&inputs, 1e-4, 1e-7, |t, v| cka(t, v[0], v[1], DEFAULT_EPS).unwrap());
    assert!(worst <= 1.0, "worst ratio {worst}");
}

#[test]
fn cosine_gradient_matches_finite_differences() {
    let mut r = rng(15);
    let inputs = [random_tensor(&mut r, &[4, 3]), random_tensor(&mut r, &[4, 3])];
    let worst =
        gradcheck(&inputs, 1e-4, 1e-7, |t, v| cosine_mean(t, v[0], v[1], DEFAULT_EPS).unwrap());
    assert!(worst <= 1.0, "worst ratio {worst}");
}

fn matrix(n: usize, h: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, n * h)
        .prop_map(move |d| Tensor::new(vec![n, h], d).unwrap())
}

fn pair() -> impl Strategy<Value = (Tensor, Tensor, u64, f64)> {
    (3usize..=8, 2usize..=6, 2usize..=6).prop_flat_map(|(n, h1, h2)| {
        (matrix(n, h1), matrix(n, h2), any::<u64>(), 0.1f64..10.0)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn cka_properties((x, y, seed, scale) in pair()) {
        let xy = cka_value(&x, &y);
        prop_assert!((cka_value(&x, &x) - 1.0).abs() < 1e-10);
        prop_assert!((xy - cka_value(&y, &x)).abs() < 1e-12);
        prop_assert!((-1e-9..=1.0 + 1e-9).contains(&xy));

        let q = random_orthogonal(&mut rng(seed), y.cols());
        let mut ty = matmul_plain(&to_rows(&y), &q);
        ty.iter_mut().flatten().for_each(|v| *v *= scale);
        prop_assert!((cka_value(&x, &Tensor::from_rows(&ty)) - xy).abs() < 1e-8);

        let (k, l) = (gram(&x), gram(&y));
        let mut tape = Tape::new();
        let kv = tape.constant(Tensor::from_rows(&k));
        let lv = tape.constant(Tensor::from_rows(&l));
        let h = hsic(&mut tape, kv, lv).unwrap();
        prop_assert!((tape.item(h) - hsic_double_sum(&k, &l)).abs() < 1e-10);

        let ones = tape.constant(Tensor::filled(&[x.rows(), x.rows()], 1.0));
        let z = hsic(&mut tape, kv, ones).unwrap();
        prop_assert!(tape.item(z).abs() < 1e-12);
    }
}
