//! Round protocols: ZorBA and the FedZO, DeComFL and FedIT baselines.
//!
//! Clients work on their own parameter copies, possibly in parallel; the
//! server always combines uploads in ascending client order and every party
//! applies an update with the same code path (seeds in order, then blocks in
//! order), which is what keeps all copies bit-identical.

mod ledger;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use ledger::{CommCounts, CommLedger};

use crate::error::{Error, Result};
use crate::metrics::BlockActivationMatrix;
use crate::rng::{derive_seed, generate_perturbation, BlockLayout, PerturbationMode, SeedPool};
use crate::workloads::{BlockModel, ClientDataset, Objective};
use crate::zo::{estimate_gradient, finite_difference_with, FdScheme, FiniteDifference, PerturbationScope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Zorba,
    Fedzo,
    Decomfl,
    Fedit,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Zorba => "zorba",
            Scheme::Fedzo => "fedzo",
            Scheme::Decomfl => "decomfl",
            Scheme::Fedit => "fedit",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// When clients draw their mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// One batch per (round, client), shared by all `Q` perturbations.
    #[default]
    PerRound,
    /// A fresh batch for every perturbation.
    PerPerturbation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub q: usize,
    pub eta: f64,
    pub mu: f64,
    pub batch_size: usize,
    pub mode: PerturbationMode,
    pub scope: PerturbationScope,
    pub fd: FdScheme,
    pub batch_mode: BatchMode,
    /// FedZO clients use the server's round seeds instead of private ones.
    pub fedzo_shared_perturbation: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            q: 10,
            eta: 5e-5,
            mu: 1e-4,
            batch_size: 8,
            mode: PerturbationMode::UnitSphere,
            scope: PerturbationScope::Masked,
            fd: FdScheme::Forward,
            batch_mode: BatchMode::PerRound,
            fedzo_shared_perturbation: false,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::invalid("Q must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("eta must be positive and finite"));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::invalid("mu must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub params: Vec<f64>,
    pub activation: BlockActivationMatrix,
    pub pool: SeedPool,
    pub eta: f64,
    /// Rounds completed so far.
    pub round: usize,
    pub ledger: CommLedger,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client: usize,
    pub params: Vec<f64>,
    pub mask: Vec<bool>,
    pub data: ClientDataset,
}

/// `Q` seeds and the `Q×M` matrix of averaged differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BroadcastPacket {
    pub round: usize,
    pub seeds: Vec<u64>,
    pub rbar: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub scheme: Scheme,
    /// Server-selected seeds (empty for FedIT, private seeds for FedZO are in `diffs`).
    pub seeds: Vec<u64>,
    /// Client uploads in canonical order: client ascending, then seed position.
    pub diffs: Vec<FiniteDifference>,
    /// Broadcast averages; one column for DeComFL.
    pub rbar: Vec<Vec<f64>>,
    pub train_loss: f64,
    pub comm: CommCounts,
    /// SHA-256 of the server parameters after the round.
    pub params_digest: String,
}

/// Server and clients bundled with the model they share.
#[derive(Debug, Clone)]
pub struct Federation {
    pub model: BlockModel,
    pub config: ProtocolConfig,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

impl Federation {
    /// Every client starts from a copy of `params`, with mask column `n` of `activation`.
    pub fn new(
        model: BlockModel,
        config: ProtocolConfig,
        params: Vec<f64>,
        activation: BlockActivationMatrix,
        pool: SeedPool,
        data: Vec<ClientDataset>,
    ) -> Result<Self> {
        config.validate()?;
        if params.len() != model.dim() {
            return Err(Error::invalid("initial parameters do not match the model"));
        }
        if activation.blocks() != model.layout().num_blocks() {
            return Err(Error::invalid(format!(
                "activation matrix has {} blocks, model has {}",
                activation.blocks(),
                model.layout().num_blocks()
            )));
        }
        if activation.clients() != data.len() {
            return Err(Error::invalid(format!(
                "activation matrix has {} clients, {} datasets given",
                activation.clients(),
                data.len()
            )));
        }
        if config.q > pool.len() {
            return Err(Error::invalid(format!("Q = {} exceeds pool size {}", config.q, pool.len())));
        }
        let clients = data
            .into_iter()
            .enumerate()
            .map(|(n, d)| ClientState {
                client: n,
                params: params.clone(),
                mask: activation.column(n),
                data: d,
            })
            .collect();
        Ok(Self {
            server: ServerState {
                params,
                activation,
                pool,
                eta: config.eta,
                round: 0,
                ledger: CommLedger::default(),
            },
            model,
            config,
            clients,
        })
    }

    pub fn run_round(&mut self, scheme: Scheme) -> Result<RoundRecord> {
        let (model, cfg) = (&self.model, &self.config);
        match scheme {
            Scheme::Zorba => run_round_zorba(model, cfg, &mut self.server, &mut self.clients),
            Scheme::Fedzo => run_round_fedzo(model, cfg, &mut self.server, &mut self.clients),
            Scheme::Decomfl => run_round_decomfl(model, cfg, &mut self.server, &mut self.clients),
            Scheme::Fedit => run_round_fedit(model, cfg, &mut self.server, &mut self.clients),
        }
    }
}

pub fn params_digest(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in params {
        h.update(x.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn check_in_sync(server: &ServerState, clients: &[ClientState], round: usize) -> Result<()> {
    for c in clients {
        let same = c.params.len() == server.params.len()
            && c.params
                .iter()
                .zip(&server.params)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::ProtocolViolation {
                round,
                detail: format!("client {} parameters differ from the server", c.client),
            });
        }
    }
    Ok(())
}

/// Per-client ρ for each seed, plus the loss at the unperturbed point.
fn client_differences(
    model: &BlockModel,
    cfg: &ProtocolConfig,
    client: &mut ClientState,
    seeds: &[u64],
    mask: &[bool],
    round: usize,
) -> Result<(Vec<FiniteDifference>, f64)> {
    let layout = model.layout();
    let mut diffs = Vec::with_capacity(seeds.len());
    let mut base_sum = 0.0;
    let shared_batch = client.data.batch(round, 0, cfg.batch_size);
    let shared_base = match cfg.batch_mode {
        BatchMode::PerRound => Some(model.loss(&client.params, &shared_batch)?),
        BatchMode::PerPerturbation => None,
    };
    for (q, &seed) in seeds.iter().enumerate() {
        let v = generate_perturbation(seed, layout, cfg.mode);
        let (batch, base) = match shared_base {
            Some(b) => (None, b),
            None => {
                let batch = client.data.batch(round, q + 1, cfg.batch_size);
                let b = model.loss(&client.params, &batch)?;
                (Some(batch), b)
            }
        };
        let batch = batch.as_ref().unwrap_or(&shared_batch);
        diffs.push(finite_difference_with(
            model,
            &mut client.params,
            mask,
            &v,
            cfg.mu,
            batch,
            cfg.fd,
            Some(base),
        )?);
        base_sum += base;
    }
    Ok((diffs, base_sum / seeds.len() as f64))
}

/// `w_i −= (η·ρ̄_{q,m})·v_{q,i}` for q ascending, then blocks ascending.
/// Blocks flagged in `skip` (activated by nobody) are left untouched.
pub fn apply_packet(
    params: &mut [f64],
    layout: &BlockLayout,
    packet: &BroadcastPacket,
    eta: f64,
    mode: PerturbationMode,
    skip: &[bool],
) -> Result<()> {
    if packet.seeds.len() != packet.rbar.len() {
        return Err(Error::invalid("packet seeds and averages differ in length"));
    }
    for (seed, row) in packet.seeds.iter().zip(&packet.rbar) {
        let v = generate_perturbation(*seed, layout, mode);
        if row.len() == 1 {
            let s = eta * row[0];
            for (w, x) in params.iter_mut().zip(&v.values) {
                *w -= s * x;
            }
            continue;
        }
        if row.len() != layout.num_blocks() {
            return Err(Error::invalid("packet row length differs from the number of blocks"));
        }
        for (m, range) in layout.ranges().enumerate() {
            if skip.get(m).copied().unwrap_or(false) {
                continue;
            }
            let s = eta * row[m];
            for i in range {
                params[i] -= s * v.values[i];
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finish_round(
    server: &mut ServerState,
    clients: &[ClientState],
    scheme: Scheme,
    round: usize,
    seeds: Vec<u64>,
    diffs: Vec<FiniteDifference>,
    rbar: Vec<Vec<f64>>,
    losses: &[f64],
    comm: CommCounts,
) -> Result<RoundRecord> {
    check_in_sync(server, clients, round)?;
    server.round = round;
    server.ledger.record(comm);
    let mut loss = 0.0;
    for l in losses {
        loss += l;
    }
    Ok(RoundRecord {
        round,
        scheme,
        seeds,
        diffs,
        rbar,
        train_loss: loss / losses.len() as f64,
        comm,
        params_digest: params_digest(&server.params),
    })
}

/// Aggregation weights `a_{m,n} / Σ_{n'} a_{m,n'}` (zero for unpopulated blocks).
pub fn aggregation_weights(a: &BlockActivationMatrix) -> Vec<Vec<f64>> {
    let pop = a.row_sums();
    (0..a.blocks())
        .map(|m| {
            (0..a.clients())
                .map(|n| if a.get(m, n) { 1.0 / pop[m] as f64 } else { 0.0 })
                .collect()
        })
        .collect()
}

fn shared_round(
    model: &BlockModel,
    cfg: &ProtocolConfig,
    server: &mut ServerState,
    clients: &mut [ClientState],
    per_block: bool,
) -> Result<RoundRecord> {
    let round = server.round + 1;
    check_in_sync(server, clients, round)?;
    let n_clients = clients.len();
    let blocks = model.layout().num_blocks();
    let seeds = server.pool.select_round_seeds(round, cfg.q)?;
    let full = vec![true; blocks];

    let uploads: Vec<(Vec<FiniteDifference>, f64)> = clients
        .par_iter_mut()
        .map(|c| {
            let mask = if per_block && cfg.scope == PerturbationScope::Masked {
                c.mask.clone()
            } else {
                full.clone()
            };
            client_differences(model, cfg, c, &seeds, &mask, round)
        })
        .collect::<Result<_>>()?;

    let q_len = cfg.q as f64;
    let rbar: Vec<Vec<f64>> = if per_block {
        let weights = aggregation_weights(&server.activation);
        (0..cfg.q)
            .map(|q| {
                (0..blocks)
                    .map(|m| {
                        let mut acc = 0.0;
                        for (n, (diffs, _)) in uploads.iter().enumerate() {
                            if server.activation.get(m, n) {
                                acc += weights[m][n] * diffs[q].rho;
                            }
                        }
                        acc / q_len
                    })
                    .collect()
            })
            .collect()
    } else {
        let w = 1.0 / n_clients as f64;
        (0..cfg.q)
            .map(|q| {
                let mut acc = 0.0;
                for (diffs, _) in &uploads {
                    acc += w * diffs[q].rho;
                }
                vec![acc / q_len]
            })
            .collect()
    };

    let packet = BroadcastPacket {
        round,
        seeds: seeds.clone(),
        rbar,
    };
    let skip: Vec<bool> = if per_block {
        server.activation.row_sums().iter().map(|&c| c == 0).collect()
    } else {
        vec![false; blocks]
    };
    let layout = model.layout();
    apply_packet(&mut server.params, layout, &packet, server.eta, cfg.mode, &skip)?;
    let eta = server.eta;
    clients
        .par_iter_mut()
        .map(|c| apply_packet(&mut c.params, layout, &packet, eta, cfg.mode, &skip))
        .collect::<Result<Vec<()>>>()?;

    let q = cfg.q as u64;
    let n = n_clients as u64;
    let down = if per_block { q * blocks as u64 } else { q };
    let comm = CommCounts {
        up_scalars: n * q,
        up_seed_ids: n * q,
        down_scalars: down,
        down_seed_ids: q,
    };
    let losses: Vec<f64> = uploads.iter().map(|(_, l)| *l).collect();
    let diffs = uploads.into_iter().flat_map(|(d, _)| d).collect();
    let scheme = if per_block { Scheme::Zorba } else { Scheme::Decomfl };
    finish_round(server, clients, scheme, round, seeds, diffs, packet.rbar, &losses, comm)
}

/// One ZorBA round with per-block weighted aggregation.
pub fn run_round_zorba(
    model: &BlockModel,
    cfg: &ProtocolConfig,
    server: &mut ServerState,
    clients: &mut [ClientState],
) -> Result<RoundRecord> {
    shared_round(model, cfg, server, clients, true)
}

/// Shared seeds, full activation, uniform weights and a `Q`-scalar broadcast.
pub fn run_round_decomfl(
    model: &BlockModel,
    cfg: &ProtocolConfig,
    server: &mut ServerState,
    clients: &mut [ClientState],
) -> Result<RoundRecord> {
    shared_round(model, cfg, server, clients, false)
}

/// Average of client vectors with uniform weights, accumulated in client order.
fn average(vectors: &[Vec<f64>]) -> Vec<f64> {
    let w = 1.0 / vectors.len() as f64;
    let mut out = vec![0.0; vectors[0].len()];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

fn model_broadcast(server: &ServerState, clients: &mut [ClientState]) {
    for c in clients {
        c.params.copy_from_slice(&server.params);
    }
}

/// Private perturbations per client; full estimated gradients travel both ways.
pub fn run_round_fedzo(
    model: &BlockModel,
    cfg: &ProtocolConfig,
    server: &mut ServerState,
    clients: &mut [ClientState],
) -> Result<RoundRecord> {
    let round = server.round + 1;
    check_in_sync(server, clients, round)?;
    let layout = model.layout();
    let full = vec![true; layout.num_blocks()];
    let shared = if cfg.fedzo_shared_perturbation {
        server.pool.select_round_seeds(round, cfg.q)?
    } else {
        Vec::new()
    };
    let master = server.pool.master_seed();

    let uploads: Vec<(Vec<f64>, Vec<FiniteDifference>, f64)> = clients
        .par_iter_mut()
        .map(|c| {
            let seeds: Vec<u64> = if cfg.fedzo_shared_perturbation {
                shared.clone()
            } else {
                (0..cfg.q)
                    .map(|q| derive_seed(master, &[0xF0, round as u64, c.client as u64, q as u64]))
                    .collect()
            };
            let (diffs, loss) = client_differences(model, cfg, c, &seeds, &full, round)?;
            let vs: Vec<_> = seeds
                .iter()
                .map(|&s| generate_perturbation(s, layout, cfg.mode))
                .collect();
            let g = estimate_gradient(&diffs, &vs, layout, &full)?;
            Ok((g, diffs, loss))
        })
        .collect::<Result<_>>()?;

    let grads: Vec<Vec<f64>> = uploads.iter().map(|(g, _, _)| g.clone()).collect();
    let g = average(&grads);
    for (w, x) in server.params.iter_mut().zip(&g) {
        *w -= server.eta * x;
    }
    model_broadcast(server, clients);

    let d = layout.dim() as u64;
    let comm = CommCounts {
        up_scalars: clients.len() as u64 * d,
        up_seed_ids: 0,
        down_scalars: d,
        down_seed_ids: 0,
    };
    let losses: Vec<f64> = uploads.iter().map(|u| u.2).collect();
    let diffs = uploads.into_iter().flat_map(|u| u.1).collect();
    finish_round(server, clients, Scheme::Fedzo, round, shared, diffs, Vec::new(), &losses, comm)
}

/// First-order baseline on the quadratic backend.
pub fn run_round_fedit(
    model: &BlockModel,
    cfg: &ProtocolConfig,
    server: &mut ServerState,
    clients: &mut [ClientState],
) -> Result<RoundRecord> {
    let round = server.round + 1;
    check_in_sync(server, clients, round)?;
    let uploads: Vec<(Vec<f64>, f64)> = clients
        .par_iter()
        .map(|c| {
            let batch = c.data.batch(round, 0, cfg.batch_size);
            let g = model.analytic_gradient(&c.params, &batch)?;
            let loss = model.loss(&c.params, &batch)?;
            Ok((g, loss))
        })
        .collect::<Result<_>>()?;
    let grads: Vec<Vec<f64>> = uploads.iter().map(|u| u.0.clone()).collect();
    let g = average(&grads);
    for (w, x) in server.params.iter_mut().zip(&g) {
        *w -= server.eta * x;
    }
    model_broadcast(server, clients);

    let d = model.dim() as u64;
    let comm = CommCounts {
        up_scalars: clients.len() as u64 * d,
        up_seed_ids: 0,
        down_scalars: d,
        down_seed_ids: 0,
    };
    let losses: Vec<f64> = uploads.iter().map(|u| u.1).collect();
    finish_round(server, clients, Scheme::Fedit, round, Vec::new(), Vec::new(), Vec::new(), &losses, comm)
}

/// Rebuilds the parameter trajectory from seeds and broadcast averages alone,
/// checking each round's digest.
pub fn replay_trace(
    layout: &BlockLayout,
    initial: &[f64],
    records: &[RoundRecord],
    eta: f64,
    mode: PerturbationMode,
    activation: Option<&BlockActivationMatrix>,
) -> Result<Vec<f64>> {
    let mut params = initial.to_vec();
    let skip: Vec<bool> = match activation {
        Some(a) => a.row_sums().iter().map(|&c| c == 0).collect(),
        None => vec![false; layout.num_blocks()],
    };
    for r in records {
        if !matches!(r.scheme, Scheme::Zorba | Scheme::Decomfl) {
            return Err(Error::invalid(format!(
                "{} rounds transmit full vectors and cannot be replayed from scalars",
                r.scheme
            )));
        }
        let packet = BroadcastPacket {
            round: r.round,
            seeds: r.seeds.clone(),
            rbar: r.rbar.clone(),
        };
        apply_packet(&mut params, layout, &packet, eta, mode, &skip)?;
        if params_digest(&params) != r.params_digest {
            return Err(Error::ProtocolViolation {
                round: r.round,
                detail: "replayed parameters do not match the recorded digest".into(),
            });
        }
    }
    Ok(params)
}
