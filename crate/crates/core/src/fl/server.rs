use std::thread;

use serde::{Deserialize, Serialize};

use super::client::{ClientState, LocalReport};
use super::wire::{Direction, WireRecord, WireTrace};
use crate::error::{Error, Result};
use crate::model::{AdapterSet, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationWeighting {
    #[default]
    Uniform,
    BySampleCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub round: usize,
    pub theta_g: AdapterSet,
    pub clients: Vec<usize>,
    pub weighting: AggregationWeighting,
}

/// Running (weighted) mean of adapter sets, reduced in the given order.
///
/// Uses `mean += (w_k / W_k) * (x_k - mean)` so that identical inputs
/// reproduce themselves bit for bit.
pub fn aggregate(sets: &[AdapterSet], weights: Option<&[f64]>) -> Result<AdapterSet> {
    let first = sets.first().ok_or_else(|| Error::Payload("nothing to aggregate".into()))?;
    if let Some(w) = weights {
        if w.len() != sets.len() || w.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::Payload("aggregation weights must be positive, one per client".into()));
        }
    }
    let mut mean = first.clone();
    let mut seen = weights.map_or(1.0, |w| w[0]);
    for (k, set) in sets.iter().enumerate().skip(1) {
        if !set.same_shape(&mean) {
            return Err(Error::Payload(format!("client adapter {k} has a different shape")));
        }
        let w = weights.map_or(1.0, |w| w[k]);
        seen += w;
        let frac = w / seen;
        for (m, x) in mean.points.iter_mut().zip(&set.points) {
            for ((_, mt), (_, xt)) in m.tensors_mut().into_iter().zip(x.tensors()) {
                for (a, b) in mt.data_mut().iter_mut().zip(xt.data()) {
                    *a += frac * (b - *a);
                }
            }
        }
    }
    Ok(mean)
}

/// What one completed round produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    /// Local reports in client order.
    pub reports: Vec<LocalReport>,
}

fn decode_adapter(template: &AdapterSet, record: &WireRecord) -> Result<AdapterSet> {
    let mut out = template.clone();
    out.load(ParamGroup::ThetaG.prefix(), &record.manifest, &record.payload)?;
    Ok(out)
}

/// Runs `local_update` on every client, optionally on scoped threads.
/// Results come back in client order either way.
pub fn run_local_phase(
    clients: &mut [ClientState],
    round: usize,
    broadcasts: Option<&[AdapterSet]>,
    parallel: bool,
) -> Vec<Result<LocalReport>> {
    let received = |i: usize| broadcasts.map(|b| &b[i]);
    if !parallel {
        return clients
            .iter_mut()
            .enumerate()
            .map(|(i, c)| c.local_update(round, received(i)))
            .collect();
    }
    thread::scope(|s| {
        let handles: Vec<_> = clients
            .iter_mut()
            .enumerate()
            .map(|(i, c)| {
                let b = received(i);
                s.spawn(move || c.local_update(round, b))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client worker panicked"))
            .collect()
    })
}

impl ServerState {
    pub fn new(theta_g: AdapterSet, clients: Vec<usize>, weighting: AggregationWeighting) -> Self {
        Self {
            round: 0,
            theta_g,
            clients,
            weighting,
        }
    }

    /// One communication round: broadcast, local updates, upload, aggregate.
    ///
    /// On any client failure the round is aborted: the trace keeps what was
    /// already transmitted and the server adapter is left unchanged.
    pub fn run_round(
        &mut self,
        clients: &mut [ClientState],
        trace: &mut WireTrace,
        parallel: bool,
    ) -> Result<RoundRecord> {
        let ids: Vec<usize> = clients.iter().map(|c| c.id).collect();
        if ids != self.clients {
            return Err(Error::Payload(format!(
                "registered clients {:?} differ from participants {ids:?}",
                self.clients
            )));
        }
        let round = self.round + 1;
        let (manifest, payload) = self.theta_g.encode(ParamGroup::ThetaG.prefix());
        let mut received = Vec::with_capacity(clients.len());
        for &id in &ids {
            let rec = WireRecord::new(round, Direction::Down, id, manifest.clone(), payload.clone());
            received.push(decode_adapter(&self.theta_g, &rec)?);
            trace.push(rec);
        }

        let results = run_local_phase(clients, round, Some(&received), parallel);

        let mut uploads = Vec::with_capacity(clients.len());
        let mut reports = Vec::with_capacity(clients.len());
        let mut failure = None;
        for (client, result) in clients.iter().zip(results) {
            match result {
                Ok(report) => {
                    let (m, p) = client.params.theta_g.encode(ParamGroup::ThetaG.prefix());
                    let rec = WireRecord::new(round, Direction::Up, client.id, m, p);
                    uploads.push(decode_adapter(&self.theta_g, &rec)?);
                    trace.push(rec);
                    reports.push(report);
                }
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }

        let weights: Option<Vec<f64>> = match self.weighting {
            AggregationWeighting::Uniform => None,
            AggregationWeighting::BySampleCount => {
                Some(clients.iter().map(|c| c.num_train() as f64).collect())
            }
        };
        self.theta_g = aggregate(&uploads, weights.as_deref())?;
        self.round = round;
        Ok(RoundRecord { round, reports })
    }
}
