use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::data::build_federation;
use crate::error::{Error, Result};
use crate::fl::{run_local_phase, ClientState, Direction, LocalReport, ServerState, Split, WireTrace};
use crate::losses::LossBreakdown;
use crate::model::{serialize, AdapterSet, Classifier, ModelParams, ParamGroup};

/// One row of the per-seed metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub seed: u64,
    pub round: usize,
    pub client_id: usize,
    pub split: String,
    pub accuracy: f64,
    pub loss_a: f64,
    pub loss_b: f64,
    pub loss_c: f64,
    pub loss_total: f64,
    pub wire_bytes_up: usize,
    pub wire_bytes_down: usize,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "seed",
    "round",
    "client_id",
    "split",
    "accuracy",
    "loss_a",
    "loss_b",
    "loss_c",
    "loss_total",
    "wire_bytes_up",
    "wire_bytes_down",
];

/// Everything produced by one seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub rows: Vec<CsvRow>,
    pub trace: WireTrace,
    /// Server adapter after the last round (initial adapter when nothing was communicated).
    pub final_theta_g: AdapterSet,
    pub clients: Vec<ClientState>,
    /// `max |Y - Z|` at the first local step of each round, per client.
    pub broadcast_gaps: Vec<(usize, usize, f64)>,
}

/// Seed streams for the federation, shared weights and per-client state.
mod streams {
    pub const DATA: u64 = 1;
    pub const MODEL: u64 = 2;
    pub const CLIENT: u64 = 100;
    pub const SHUFFLE: u64 = 200;
}

/// Builds the server's initial global adapter and every client.
///
/// All clients share the frozen backbone and start from the same global
/// adapter; private adapters and heads are drawn per client.
pub fn build_clients(cfg: &ExperimentConfig, seed: u64) -> Result<(AdapterSet, Vec<ClientState>)> {
    cfg.validate()?;
    let specs = cfg
        .federation
        .client_specs(crate::derive_seed(seed, streams::DATA), cfg.model.vocab_size);
    let datasets = build_federation(&specs)?;
    let model_seed = crate::derive_seed(seed, streams::MODEL);
    let options = cfg.objective();
    let mut clients = Vec::with_capacity(specs.len());
    let mut theta_g0 = None;
    for (k, (spec, data)) in specs.iter().zip(datasets).enumerate() {
        let enc = cfg.model.encoder(spec.num_classes, model_seed);
        let mut params = if cfg.method.dual() {
            ModelParams::init(&enc)?
        } else {
            ModelParams::init_single(&enc)?
        };
        let mut rng = crate::seeded_rng(crate::derive_seed(seed, streams::CLIENT + k as u64));
        let (h, c, hidden) = (enc.hidden_size, enc.num_classes, enc.classifier_hidden);
        if let Some(p) = params.theta_p.as_mut() {
            *p = AdapterSet::init(&enc, &mut rng);
        }
        params.phi_a = Classifier::init(h, c, hidden, &mut rng);
        if let Some(b) = params.phi_b.as_mut() {
            *b = Classifier::init(h, c, hidden, &mut rng);
        }
        theta_g0.get_or_insert_with(|| params.theta_g.clone());
        clients.push(ClientState::new(
            k,
            params,
            cfg.optimizer.clone(),
            data,
            options,
            cfg.local_epochs,
            crate::derive_seed(seed, streams::SHUFFLE + k as u64),
        ));
    }
    Ok((theta_g0.expect("at least two clients"), clients))
}

fn eval_rows(
    seed: u64,
    round: usize,
    client: &ClientState,
    loss: LossBreakdown,
    trace: &WireTrace,
) -> Result<Vec<CsvRow>> {
    [Split::Validation, Split::Test]
        .into_iter()
        .map(|split| {
            Ok(CsvRow {
                seed,
                round,
                client_id: client.id,
                split: split.as_str().to_string(),
                accuracy: client.evaluate(split)?,
                loss_a: loss.l_a,
                loss_b: loss.l_b,
                loss_c: loss.l_c,
                loss_total: loss.total,
                wire_bytes_up: trace.bytes(round, client.id, Direction::Up),
                wire_bytes_down: trace.bytes(round, client.id, Direction::Down),
            })
        })
        .collect()
}

/// Runs all rounds for one seed. Round 0 rows hold the untrained model's
/// accuracy and its objective on the training batches.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, checkpoint_dir: Option<&Path>) -> Result<SeedRun> {
    let (theta_g0, mut clients) = build_clients(cfg, seed)?;
    let mut trace = WireTrace::default();
    let mut rows = Vec::new();
    let mut gaps = Vec::new();
    let snapshot0 = cfg.method.dual().then_some(&theta_g0);
    for c in &clients {
        rows.extend(eval_rows(seed, 0, c, c.probe_loss(snapshot0)?, &trace)?);
    }
    let mut server = ServerState::new(
        theta_g0.clone(),
        clients.iter().map(|c| c.id).collect(),
        cfg.aggregation,
    );
    let checkpoint = |round: usize, set: &AdapterSet| -> Result<()> {
        if let Some(dir) = checkpoint_dir {
            let (m, p) = set.encode(ParamGroup::ThetaG.prefix());
            serialize::write_files(&dir.join(format!("round_{round:03}")), &m, &p)?;
        }
        Ok(())
    };
    if cfg.method.communicates() {
        checkpoint(0, &server.theta_g)?;
    }
    for round in 1..=cfg.rounds {
        let reports: Vec<LocalReport> = if cfg.method.communicates() {
            let rec = server.run_round(&mut clients, &mut trace, cfg.parallel_clients)?;
            checkpoint(round, &server.theta_g)?;
            rec.reports
        } else {
            run_local_phase(&mut clients, round, None, cfg.parallel_clients)
                .into_iter()
                .collect::<Result<_>>()?
        };
        for (c, r) in clients.iter().zip(&reports) {
            if let Some(g) = r.broadcast_gap {
                gaps.push((round, c.id, g));
            }
            rows.extend(eval_rows(seed, round, c, r.mean_loss(), &trace)?);
        }
    }
    Ok(SeedRun {
        seed,
        rows,
        trace,
        final_theta_g: server.theta_g,
        clients,
        broadcast_gaps: gaps,
    })
}

/// Runs every configured seed, optionally on one thread per seed. Results
/// are returned in seed order.
pub fn run_seeds(
    cfg: &ExperimentConfig,
    parallel_seeds: bool,
    checkpoint_root: Option<&Path>,
) -> Vec<Result<SeedRun>> {
    let dir = |seed: u64| checkpoint_root.map(|r| r.join(format!("seed_{seed}")));
    if !parallel_seeds {
        return cfg
            .seeds
            .iter()
            .map(|&s| run_seed(cfg, s, dir(s).as_deref()))
            .collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&s| {
                let d = dir(s);
                scope.spawn(move || run_seed(cfg, s, d.as_deref()))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Data("seed worker panicked".into()))))
            .collect()
    })
}
