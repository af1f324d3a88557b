//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use fedmcp_core::data::FederationSpec;
use fedmcp_core::experiment::{
    accounting, build_clients, run_experiment, run_seed, seed_csv_path, ExperimentConfig, Method,
};
use fedmcp_core::fl::{aggregate, AggregationWeighting, ServerState, WireTrace};
use fedmcp_core::losses::{build_objective, ContrastiveAnchor, LossWeights, ObjectiveOptions};
use fedmcp_core::model::{
    randomize_adapters, serialize, AdapterSet, AdapterSource, BoundAdapterSet, BoundModel,
    EncoderConfig, ModelParams, ParamGroup, Pooling,
};
use fedmcp_core::similarity::{cka, hsic, SimilarityKind, SimilarityMetric, DEFAULT_EPS};
use fedmcp_core::tensor::{Tape, Tensor};
use rand::Rng;

const BIN: &str = env!("CARGO_BIN_EXE_fedmcp");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn say(line: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}

fn master_gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = EncoderConfig::default();
    let (params, snapshot) = perturbed_model(&cfg, 1);
    let (batch, labels) = random_batch(&cfg, 2, 2);
    let r = objective_gradcheck(&params, &snapshot, &batch, &labels, &ObjectiveOptions::default(), 1e-4, 1e-7);
    let secs = start.elapsed().as_secs_f64();
    let expected = params.count_parameters().trainable;
    outcome(
        r.worst_ratio <= 1.0 && r.checked == expected && secs < 60.0,
        format!(
            "{} coordinates, worst error/tolerance {:.2e} at {}, {secs:.1}s",
            r.checked, r.worst_ratio, r.worst_name
        ),
    )
}

fn cka_value(x: &Tensor, y: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let c = cka(&mut tape, a, b, DEFAULT_EPS).unwrap();
    tape.item(c)
}

fn gram(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|a| rows.iter().map(|b| a.iter().zip(b).map(|(p, q)| p * q).sum()).collect())
        .collect()
}

fn cka_property_suite() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2024);
    let trials = 1000;
    let mut worst = [0.0f64; 5];
    let mut range_ok = true;
    for _ in 0..trials {
        let n = r.random_range(3..=8);
        let h = r.random_range(2..=6);
        let h2 = r.random_range(2..=6);
        let x = random_tensor(&mut r, &[n, h]);
        let y = random_tensor(&mut r, &[n, h2]);
        let self_sim = cka_value(&x, &x);
        worst[0] = worst[0].max((self_sim - 1.0).abs());
        let (xy, yx) = (cka_value(&x, &y), cka_value(&y, &x));
        worst[1] = worst[1].max((xy - yx).abs());
        range_ok &= (-1e-9..=1.0 + 1e-9).contains(&xy);
        let q = random_orthogonal(&mut r, h2);
        let c = r.random_range(0.1..10.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let yq: Vec<Vec<f64>> = matmul_plain(&to_rows(&y), &q)
            .into_iter()
            .map(|row| row.into_iter().map(|v| c * v).collect())
            .collect();
        let transformed = cka_value(&x, &Tensor::from_rows(&yq));
        worst[2] = worst[2].max((transformed - xy).abs());
        let qx = random_orthogonal(&mut r, h);
        let xq = Tensor::from_rows(&matmul_plain(&to_rows(&x), &qx));
        worst[3] = worst[3].max((cka_value(&x, &xq) - self_sim).abs());
        let (k, l) = (gram(&to_rows(&x)), gram(&to_rows(&y)));
        let mut tape = Tape::new();
        let kv = tape.constant(Tensor::from_rows(&k));
        let lv = tape.constant(Tensor::from_rows(&l));
        let hv = hsic(&mut tape, kv, lv).unwrap();
        worst[4] = worst[4].max((tape.item(hv) - hsic_double_sum(&k, &l)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst[0] <= 1e-10
        && worst[1] <= 1e-12
        && range_ok
        && worst[2] <= 1e-8
        && worst[3] <= 1e-8
        && worst[4] <= 1e-10
        && secs < 30.0;
    outcome(
        pass,
        format!(
            "{trials} trials: self {:.1e}, symmetry {:.1e}, range {}, invariance {:.1e}/{:.1e}, hsic {:.1e}, {secs:.1}s",
            worst[0],
            worst[1],
            if range_ok { "ok" } else { "violated" },
            worst[2],
            worst[3],
            worst[4]
        ),
    )
}

fn three_clients(rounds: usize) -> ExperimentConfig {
    ExperimentConfig {
        rounds,
        seeds: vec![1],
        checkpoints: false,
        federation: FederationSpec {
            num_clients: 3,
            ..FederationSpec::default()
        },
        ..ExperimentConfig::default()
    }
}

fn private_windows(p: &ModelParams) -> Vec<Vec<u8>> {
    p.named_trainable()
        .into_iter()
        .filter(|(g, _, _)| *g != ParamGroup::ThetaG)
        .flat_map(|(_, _, t)| {
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            bytes.chunks_exact(16).map(<[u8]>::to_vec).collect::<Vec<_>>()
        })
        .filter(|w| w.iter().any(|&b| b != 0))
        .collect()
}

fn protocol_invariants() -> Outcome {
    let cfg = three_clients(5);
    let (theta0, mut clients) = build_clients(&cfg, 1).unwrap();
    let backbone = |p: &ModelParams| serialize::encode(p.backbone.named()).1;
    let before: Vec<Vec<u8>> = clients.iter().map(|c| backbone(&c.params)).collect();
    let mut prints: Vec<Vec<u8>> = clients.iter().flat_map(|c| private_windows(&c.params)).collect();
    let mut server = ServerState::new(theta0, vec![0, 1, 2], AggregationWeighting::Uniform);
    let mut trace = WireTrace::default();
    for _ in 0..5 {
        server.run_round(&mut clients, &mut trace, false).unwrap();
        prints.extend(clients.iter().flat_map(|c| private_windows(&c.params)));
    }
    let records = trace.len();
    let names_ok = trace.records.iter().all(|r| r.only_global());
    let backbone_ok = clients.iter().zip(&before).all(|(c, b)| &backbone(&c.params) == b);
    let leaked = prints.iter().filter(|p| trace.contains_bytes(p)).count();
    outcome(
        records == 30 && names_ok && backbone_ok && leaked == 0,
        format!(
            "{records} records, names global-only: {names_ok}, backbone unchanged: {backbone_ok}, \
             {} private fingerprints scanned, {leaked} found",
            prints.len()
        ),
    )
}

fn aggregation_oracle() -> Outcome {
    let cfg = EncoderConfig::default();
    let mut r = rng(77);
    let (mut worst_u, mut worst_w) = (0.0f64, 0.0f64);
    for trial in 0..50 {
        let m = 2 + trial % 7;
        let sets: Vec<AdapterSet> = (0..m)
            .map(|_| {
                let mut s = AdapterSet::zeros(&cfg);
                randomize_adapters(&mut s, &mut r, 1.0);
                s
            })
            .collect();
        let weights: Vec<f64> = (0..m).map(|_| r.random_range(1..500) as f64).collect();
        let flat: Vec<Vec<f64>> = sets.iter().map(AdapterSet::flat_values).collect();
        let total: f64 = weights.iter().sum();
        let u = aggregate(&sets, None).unwrap().flat_values();
        let w = aggregate(&sets, Some(&weights)).unwrap().flat_values();
        for i in 0..u.len() {
            let mean = flat.iter().map(|f| f[i]).sum::<f64>() / m as f64;
            let wmean = flat.iter().zip(&weights).map(|(f, w)| w * f[i]).sum::<f64>() / total;
            worst_u = worst_u.max((u[i] - mean).abs());
            worst_w = worst_w.max((w[i] - wmean).abs());
        }
    }
    outcome(
        worst_u <= 1e-15 && worst_w <= 1e-15,
        format!("50 trials, max deviation uniform {worst_u:.1e}, weighted {worst_w:.1e}"),
    )
}

fn branch_collapse() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..6 {
        let cfg = EncoderConfig {
            num_classes: 2 + (seed as usize % 2),
            seed,
            ..EncoderConfig::default()
        };
        let (mut params, _) = perturbed_model(&cfg, seed + 10);
        params.collapse_branches();
        for pooling in [Pooling::MeanPool, Pooling::ClsToken] {
            let (batch, _) = random_batch(&cfg, 8, seed + 20);
            let a = params.logits_full(&batch, pooling).unwrap();
            let b = params.logits_global(&batch, pooling).unwrap();
            worst = worst.max(a.max_abs_diff(&b));
        }
    }
    outcome(worst <= 1e-12, format!("12 random batches, max |full - global| {worst:.1e}"))
}

fn fedmcp_run(config: &Path, out: &Path, extra: &[&str]) -> bool {
    Command::new(BIN)
        .args(["run", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env_remove("FEDMCP_OUTPUT_ROOT")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let base = ExperimentConfig {
        rounds: 2,
        seeds: vec![1, 2],
        checkpoints: false,
        ..ExperimentConfig::default()
    };
    let seq = dir.path().join("seq.toml");
    let par = dir.path().join("par.toml");
    std::fs::write(&seq, base.to_toml()).unwrap();
    std::fs::write(&par, ExperimentConfig { parallel_clients: true, ..base.clone() }.to_toml()).unwrap();
    let runs = [
        (seq.clone(), dir.path().join("a"), vec![]),
        (seq, dir.path().join("b"), vec![]),
        (par.clone(), dir.path().join("c"), vec![]),
        (par, dir.path().join("d"), vec!["--parallel-seeds"]),
    ];
    let mut ok = true;
    for (cfg, out, extra) in &runs {
        ok &= fedmcp_run(cfg, out, extra);
    }
    let mut identical = 0;
    let mut compared = 0;
    for seed in &base.seeds {
        let reference = std::fs::read(seed_csv_path(&runs[0].1, *seed)).unwrap_or_default();
        for (_, out, _) in &runs[1..] {
            compared += 1;
            let other = std::fs::read(seed_csv_path(out, *seed)).unwrap_or_default();
            identical += usize::from(!reference.is_empty() && other == reference);
        }
    }
    outcome(
        ok && identical == compared,
        format!("4 runs (sequential x2, parallel clients, parallel clients + seeds): {identical}/{compared} CSV pairs byte-identical"),
    )
}

fn per_seed_averages(cfg: &ExperimentConfig, dir: &Path) -> Vec<f64> {
    let report = run_experiment(cfg, dir, false).unwrap();
    report.summary.per_seed_average.values().copied().collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn directional_experiment() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let base = ExperimentConfig {
        checkpoints: false,
        ..ExperimentConfig::default()
    };
    let arms: [(&str, ExperimentConfig); 4] = [
        ("fedmcp", base.clone()),
        ("fedavg_peft", ExperimentConfig { method: Method::FedavgPeft, ..base.clone() }),
        ("fedmcp mu=0", ExperimentConfig { loss: LossWeights { mu: 0.0, ..base.loss }, ..base.clone() }),
        ("fedmcp gamma=0", ExperimentConfig { loss: LossWeights { gamma: 0.0, ..base.loss }, ..base.clone() }),
    ];
    // Per-seed averages for every arm; extending the seed set only runs the new seeds.
    let mut per_seed: Vec<Vec<f64>> = vec![Vec::new(); arms.len()];
    let run = |per_seed: &mut Vec<Vec<f64>>, seeds: &[u64]| {
        for (i, (name, cfg)) in arms.iter().enumerate() {
            let cfg = ExperimentConfig { seeds: seeds.to_vec(), ..cfg.clone() };
            let sub = format!("{}_{}", name.replace([' ', '='], "_"), seeds[0]);
            per_seed[i].extend(per_seed_averages(&cfg, &dir.path().join(sub)));
        }
    };
    let ordered = |m: &[f64]| m[0] >= m[1] + 0.01 && m[0] >= m[2] && m[0] >= m[3];
    run(&mut per_seed, &[1, 2, 3]);
    let mut means: Vec<f64> = per_seed.iter().map(|v| mean(v)).collect();
    let mut extended = false;
    if !ordered(&means) {
        say("  ordering not met on 3 seeds; adding seeds 4 and 5");
        run(&mut per_seed, &[4, 5]);
        means = per_seed.iter().map(|v| mean(v)).collect();
        extended = true;
    }
    say("  | arm | mean final test acc (%) | per seed |");
    say("  |---|---|---|");
    for ((name, _), (m, per)) in arms.iter().zip(means.iter().zip(&per_seed)) {
        let per: Vec<String> = per.iter().map(|v| format!("{:.2}", 100.0 * v)).collect();
        say(&format!("  | {name} | {:.2} | {} |", 100.0 * m, per.join(", ")));
    }
    let elapsed = start.elapsed();
    outcome(
        ordered(&means) && elapsed < Duration::from_secs(30 * 60),
        format!(
            "{} seeds{}, fedmcp - fedavg_peft = {:+.2} pts, fedmcp - mu0 = {:+.2}, fedmcp - gamma0 = {:+.2}, {:.0}s",
            per_seed[0].len(),
            if extended { " (extended)" } else { "" },
            100.0 * (means[0] - means[1]),
            100.0 * (means[0] - means[2]),
            100.0 * (means[0] - means[3]),
            elapsed.as_secs_f64()
        ),
    )
}

fn parameter_accounting() -> Outcome {
    let rows = accounting(&ExperimentConfig::default(), 2).unwrap();
    let ratio = rows.iter().find(|r| r.method == Method::Fedmcp).unwrap().communicated_over_trainable_adapters;
    let out = Command::new(BIN).arg("params").output().unwrap();
    let printed = String::from_utf8_lossy(&out.stdout).contains("fedmcp communicated / trainable adapters = 0.5");
    outcome(
        ratio == 0.5 && printed && out.status.success(),
        format!("communicated / trainable adapters = {ratio}, reported by `fedmcp params`: {printed}"),
    )
}

fn broadcast_fidelity() -> Outcome {
    let run = run_seed(&three_clients(4), 3, None).unwrap();
    let worst_gap = run.broadcast_gaps.iter().map(|g| g.2).fold(0.0, f64::max);
    let gaps_ok = run.broadcast_gaps.len() == 4 * 3 && worst_gap <= 1e-12;

    // Right after a broadcast the local global and broadcast representations
    // coincide, so X compared against either gives the same similarity. With
    // the private anchor these are exactly the two terms of the contrastive loss.
    let (_, clients) = build_clients(&three_clients(1), 3).unwrap();
    let mut c = clients[0].clone();
    let mut broadcast = run.final_theta_g.clone();
    randomize_adapters(&mut broadcast, &mut rng(5), 0.2);
    c.params.theta_g = broadcast.clone();
    let samples: Vec<&[usize]> = c.data.train[..16].iter().map(|s| s.tokens.as_slice()).collect();
    let labels: Vec<usize> = c.data.train[..16].iter().map(|s| s.label).collect();
    let batch = fedmcp_core::model::TokenBatch::new(&samples, &c.params.config).unwrap();
    let mut worst_terms = 0.0f64;
    for anchor in [ContrastiveAnchor::PrivateAnchor, ContrastiveAnchor::GlobalAnchor] {
        for kind in [SimilarityKind::Cka, SimilarityKind::CosineMean] {
            for pooling in [Pooling::MeanPool, Pooling::ClsToken] {
                let opts = ObjectiveOptions {
                    metric: SimilarityMetric::new(kind),
                    pooling,
                    anchor,
                    weights: LossWeights::default(),
                };
                let mut tape = Tape::new();
                let model = BoundModel::bind(&mut tape, &c.params, false);
                let snap = BoundAdapterSet::bind(&mut tape, &broadcast, false);
                let g = build_objective(&mut tape, &model, Some(&snap), &batch, &labels, &opts).unwrap();
                let reps = g.contrastive.unwrap();
                let x = reps[0];
                let idx = |s: AdapterSource| anchor.sources().iter().position(|&v| v == s).unwrap();
                let local = reps[idx(AdapterSource::LocalGlobal)];
                let avg = reps[idx(AdapterSource::AverageGlobal)];
                let first = opts.metric.apply(&mut tape, x, local).unwrap();
                let second = opts.metric.apply(&mut tape, x, avg).unwrap();
                worst_terms = worst_terms.max((tape.item(first) - tape.item(second)).abs());
                if anchor == ContrastiveAnchor::PrivateAnchor {
                    worst_terms = worst_terms.max(tape.item(g.l_c.unwrap()).abs());
                }
                let (yv, zv) = (tape.value(local), tape.value(avg));
                worst_terms = worst_terms.max(yv.max_abs_diff(zv));
            }
        }
    }
    outcome(
        gaps_ok && worst_terms <= 1e-12,
        format!(
            "{} round starts, max |Y - Z| {worst_gap:.1e}; 8 settings, max |Sim(X, local global) - Sim(X, broadcast)| and |l_c| {worst_terms:.1e}",
            run.broadcast_gaps.len()
        ),
    )
}

fn main() {
    // Honour `cargo test -- <filter>` style invocations that target other tests.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("master gradient check", master_gradient_check),
        ("CKA property suite", cka_property_suite),
        ("protocol invariants", protocol_invariants),
        ("aggregation oracle", aggregation_oracle),
        ("branch-collapse identity", branch_collapse),
        ("determinism", determinism),
        ("directional experiment", directional_experiment),
        ("parameter accounting", parameter_accounting),
        ("broadcast fidelity", broadcast_fidelity),
    ];
    // FEDMCP_ACCEPTANCE_ONLY=3,9 runs a subset.
    let only: Option<Vec<usize>> = std::env::var("FEDMCP_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let o = run();
        say(&format!(
            "criterion {} [{}] {name}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        ));
        if !o.pass {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        say("acceptance: all selected criteria passed");
    } else {
        say(&format!("acceptance: failed criteria {failed:?}"));
        std::process::exit(1);
    }
}
