//! Server round loop, local client training and the wire trace.

mod client;
mod optim;
mod server;
mod wire;

pub use client::{accuracy, ClientState, InjectedFailure, LocalReport, Split};
pub use optim::{Adam, OptimizerConfig};
pub use server::{aggregate, run_local_phase, AggregationWeighting, RoundRecord, ServerState};
pub use wire::{Direction, WireRecord, WireTrace};
