#![allow(dead_code)]

use fedmcp_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central finite difference of `f` with respect to every coordinate of `x`.
pub fn central_difference(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_EPS;
            let up = f(&probe);
            probe[i] = orig - FD_EPS;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

/// Compares tape gradients of `build` with finite differences for every input.
/// Returns the worst ratio |analytic - numeric| / max(rel*|analytic|, abs).
pub fn gradcheck(
    inputs: &[Tensor],
    rel: f64,
    abs: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().trainable())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let eval = |values: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.item(loss)
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let numeric = central_difference(input.data(), |probe| {
            let mut values = inputs.to_vec();
            values[i] = Tensor::new(input.shape().to_vec(), probe.to_vec()).unwrap();
            eval(&values)
        });
        for (a, n) in analytic[i].iter().zip(&numeric) {
            let tol = (rel * a.abs()).max(abs);
            worst = worst.max((a - n).abs() / tol);
        }
    }
    worst
}

/// Orthogonal `d x d` matrix from Gram-Schmidt on a random Gaussian-ish matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..2 {
            for u in &q {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    q
}

pub fn matmul_plain(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// HSIC by explicit double sums over a centered `K`.
pub fn hsic_double_sum(k: &[Vec<f64>], l: &[Vec<f64>]) -> f64 {
    let n = k.len();
    let nf = n as f64;
    let row_mean: Vec<f64> = k.iter().map(|r| r.iter().sum::<f64>() / nf).collect();
    let col_mean: Vec<f64> = (0..n).map(|j| k.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let grand = row_mean.iter().sum::<f64>() / nf;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let kc = k[i][j] - row_mean[i] - col_mean[j] + grand;
            total += kc * l[j][i];
        }
    }
    total / ((n - 1) * (n - 1)) as f64
}

/// CKA via centered features: ||Xc^T Yc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F).
pub fn cka_centered_features(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    fn center(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = m.len() as f64;
        let d = m[0].len();
        let means: Vec<f64> = (0..d).map(|j| m.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        m.iter()
            .map(|r| r.iter().zip(&means).map(|(v, mu)| v - mu).collect())
            .collect()
    }
    fn cross_fro_sq(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let (da, db) = (a[0].len(), b[0].len());
        let mut total = 0.0;
        for p in 0..da {
            for q in 0..db {
                let s: f64 = a.iter().zip(b).map(|(ra, rb)| ra[p] * rb[q]).sum();
                total += s * s;
            }
        }
        total
    }
    let (xc, yc) = (center(x), center(y));
    cross_fro_sq(&xc, &yc) / (cross_fro_sq(&xc, &xc).sqrt() * cross_fro_sq(&yc, &yc).sqrt())
}

use fedmcp_core::losses::{build_objective, ObjectiveOptions};
use fedmcp_core::model::{
    randomize_adapters, AdapterSet, BoundAdapterSet, BoundModel, EncoderConfig, ModelParams,
    TokenBatch,
};

/// Dual-adapter model with every trainable tensor perturbed away from its
/// identity initialization, plus a distinct broadcast snapshot.
pub fn perturbed_model(cfg: &EncoderConfig, seed: u64) -> (ModelParams, AdapterSet) {
    let mut params = ModelParams::init(cfg).unwrap();
    let mut r = rng(seed);
    randomize_adapters(&mut params.theta_g, &mut r, 0.3);
    randomize_adapters(params.theta_p.as_mut().unwrap(), &mut r, 0.3);
    for (_, _, t) in params.named_trainable_mut() {
        if t.shape().len() == 1 {
            t.data_mut().iter_mut().for_each(|x| *x += r.random_range(-0.1..0.1));
        }
    }
    let mut snapshot = params.theta_g.clone();
    randomize_adapters(&mut snapshot, &mut r, 0.3);
    (params, snapshot)
}

pub fn random_batch(cfg: &EncoderConfig, n: usize, seed: u64) -> (TokenBatch, Vec<usize>) {
    let mut r = rng(seed);
    let seqs: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let mut s = vec![1];
            s.extend((1..cfg.max_seq_len).map(|_| r.random_range(3..cfg.vocab_size)));
            s
        })
        .collect();
    let labels = (0..n).map(|i| i % cfg.num_classes).collect();
    (TokenBatch::new(&seqs, cfg).unwrap(), labels)
}

pub fn objective_value(
    params: &ModelParams,
    snapshot: &AdapterSet,
    batch: &TokenBatch,
    labels: &[usize],
    opts: &ObjectiveOptions,
) -> f64 {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, params, false);
    let snap = BoundAdapterSet::bind(&mut tape, snapshot, false);
    let g = build_objective(&mut tape, &bound, Some(&snap), batch, labels, opts).unwrap();
    tape.item(g.total)
}

pub struct GradcheckReport {
    pub checked: usize,
    pub worst_ratio: f64,
    pub worst_name: String,
}

/// Analytic gradient of the whole objective against central differences on
/// every trainable coordinate. Tolerance per coordinate: max(rel*|g|, abs).
pub fn objective_gradcheck(
    params: &ModelParams,
    snapshot: &AdapterSet,
    batch: &TokenBatch,
    labels: &[usize],
    opts: &ObjectiveOptions,
    rel: f64,
    abs: f64,
) -> GradcheckReport {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, params, true);
    let snap = BoundAdapterSet::bind(&mut tape, snapshot, false);
    let g = build_objective(&mut tape, &bound, Some(&snap), batch, labels, opts).unwrap();
    tape.backward(g.total).unwrap();
    let analytic: Vec<Vec<f64>> = bound
        .trainable_vars()
        .iter()
        .map(|(_, v)| tape.grad(*v).unwrap().to_vec())
        .collect();
    assert!(tape.grad(snap.points[0].w_down).is_none());

    let names: Vec<String> = params.named_trainable().into_iter().map(|(_, n, _)| n).collect();
    let mut report = GradcheckReport {
        checked: 0,
        worst_ratio: 0.0,
        worst_name: String::new(),
    };
    let mut probe = params.clone();
    for (ti, name) in names.iter().enumerate() {
        for (ci, &a) in analytic[ti].iter().enumerate() {
            let orig = probe.named_trainable_mut()[ti].2.data()[ci];
            let at = |v: f64, probe: &mut ModelParams| {
                probe.named_trainable_mut()[ti].2.data_mut()[ci] = v;
                objective_value(probe, snapshot, batch, labels, opts)
            };
            let up = at(orig + FD_EPS, &mut probe);
            let down = at(orig - FD_EPS, &mut probe);
            probe.named_trainable_mut()[ti].2.data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let ratio = (a - numeric).abs() / (rel * a.abs()).max(abs);
            if ratio > report.worst_ratio {
                report.worst_ratio = ratio;
                report.worst_name = format!("{name}[{ci}]");
            }
            report.checked += 1;
        }
    }
    report
}

/// Set to regenerate golden files instead of comparing against them.
pub const REGEN_ENV: &str = "FEDMCP_REGEN_GOLDEN";

pub fn golden_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares named tensors with a golden file pair, or rewrites it when
/// [`REGEN_ENV`] is set.
pub fn check_golden(name: &str, tensors: &[(String, Tensor)], tol: f64) {
    use fedmcp_core::model::serialize;
    let stem = golden_path(name);
    if std::env::var_os(REGEN_ENV).is_some() {
        let (m, p) = serialize::encode(tensors.iter().map(|(n, t)| (n.clone(), t)));
        serialize::write_files(&stem, &m, &p).unwrap();
        return;
    }
    let (m, p) = serialize::read_files(&stem)
        .unwrap_or_else(|e| panic!("missing golden {name} ({e}); rerun with {REGEN_ENV}=1"));
    let stored = serialize::decode(&m, &p).unwrap();
    assert_eq!(stored.len(), tensors.len());
    for ((sn, st), (n, t)) in stored.iter().zip(tensors) {
        assert_eq!(sn, n);
        assert_eq!(st.shape(), t.shape());
        assert!(st.max_abs_diff(t) <= tol, "{name}/{n}: {}", st.max_abs_diff(t));
    }
}
