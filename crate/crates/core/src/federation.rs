//! The federated round loop: client sampling, teacher buffering and
//! ensembling, per-strategy local training, and weighted aggregation.

use std::collections::VecDeque;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Dataset};
use crate::diagnostics::{self, DiagnosticsState, DriftReport, InexactnessProbe};
use crate::error::{Error, Result};
use crate::losses::{evaluate_model, DistillConfig, Objective, ProxConfig, Strategy, Teachers};
use crate::nn::{init_params, sgd_step, MlpSpec, MomentumBuffer, ParamVector, SgdHyper};
use crate::rng::{derive_seed, stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub strategy: Strategy,
    pub num_clients: usize,
    /// Fraction `C` of clients sampled per round.
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Number `M` of past global models kept on the server.
    pub buffer_size: usize,
    pub distill: DistillConfig,
    pub prox: ProxConfig,
    pub sgd: SgdHyper,
    pub vote_lambda: f64,
    pub vote_beta: f64,
    pub seed: u64,
    /// Threads used for client updates within a round; 1 runs them inline.
    pub workers: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            strategy: Strategy::FedAvg,
            num_clients: 20,
            participation: 0.2,
            rounds: 100,
            local_epochs: 20,
            batch_size: 64,
            buffer_size: 5,
            distill: DistillConfig::default(),
            prox: ProxConfig::default(),
            sgd: SgdHyper::default(),
            vote_lambda: 0.1,
            vote_beta: 1.0 / 5.0,
            seed: 0,
            workers: 1,
        }
    }
}

impl FedConfig {
    /// `⌈C·K⌉`
    pub fn clients_per_round(&self) -> usize {
        (self.participation * self.num_clients as f64 - 1e-9).ceil().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("federation.num_clients", "must be at least 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config("federation.participation", "must lie in (0, 1]"));
        }
        let m = self.clients_per_round();
        if m < 1 || m > self.num_clients {
            return Err(Error::config(
                "federation.participation",
                format!("ceil(C*K) = {m} must lie in [1, {}]", self.num_clients),
            ));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("federation.local_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("federation.batch_size", "must be at least 1"));
        }
        if self.buffer_size == 0 {
            return Err(Error::config("federation.buffer_size", "must be at least 1"));
        }
        if !(self.vote_lambda > 0.0 && self.vote_lambda.is_finite()) {
            return Err(Error::config("federation.vote_lambda", "must be positive"));
        }
        if !(self.vote_beta > 0.0 && self.vote_beta.is_finite()) {
            return Err(Error::config("federation.vote_beta", "must be positive"));
        }
        self.distill.validate()?;
        self.prox.validate()?;
        self.sgd.validate()
    }
}

/// The last `M` global models, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBuffer {
    capacity: usize,
    entries: VecDeque<(usize, ParamVector)>,
}

impl TeacherBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("teacher buffer capacity must be >= 1".into()));
        }
        Ok(TeacherBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn push(&mut self, round: usize, params: ParamVector) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((round, params));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn round_tags(&self) -> Vec<usize> {
        self.entries.iter().map(|(r, _)| *r).collect()
    }

    pub fn latest(&self) -> Option<&ParamVector> {
        self.entries.back().map(|(_, p)| p)
    }

    /// Buffered models, most recent first.
    pub fn newest_first(&self) -> Vec<ParamVector> {
        self.entries.iter().rev().map(|(_, p)| p.clone()).collect()
    }

    fn iter(&self) -> impl Iterator<Item = &ParamVector> {
        self.entries.iter().map(|(_, p)| p)
    }
}

/// Uniform sample of `⌈C·K⌉` distinct client ids, sorted ascending. The draw
/// depends only on the master seed and the round.
pub fn sample_clients(round: usize, cfg: &FedConfig) -> Vec<usize> {
    let mut rng = stream_rng(cfg.seed, Stream::Sampling, &[round as u64]);
    let mut ids = index::sample(&mut rng, cfg.num_clients, cfg.clients_per_round()).into_vec();
    ids.sort_unstable();
    ids
}

/// Running weighted mean; reproduces its input exactly when every vector is
/// identical.
fn weighted_mean<'a>(items: impl IntoIterator<Item = (f64, &'a ParamVector)>) -> Result<ParamVector> {
    let mut acc: Option<ParamVector> = None;
    let mut total = 0.0;
    for (weight, v) in items {
        total += weight;
        match acc.as_mut() {
            None => acc = Some(v.clone()),
            Some(a) => {
                a.check_len(v.len(), "weighted mean")?;
                let share = weight / total;
                for (x, &y) in a.iter_mut().zip(v.iter()) {
                    *x += share * (y - *x);
                }
            }
        }
    }
    acc.ok_or_else(|| Error::InvalidArgument("mean of an empty set".into()))
}

/// Elementwise mean of every buffered model.
pub fn ensemble_teacher(buf: &TeacherBuffer) -> Result<ParamVector> {
    if buf.is_empty() {
        return Err(Error::InvalidArgument("teacher buffer is empty".into()));
    }
    weighted_mean(buf.iter().map(|p| (1.0, p)))
}

/// Per-teacher distillation coefficients `γ_i = 2λ·softmax(−L/β)_i`.
pub fn vote_coefficients(val_losses: &[f64], lambda: f64, beta: f64) -> Result<Vec<f64>> {
    if val_losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("validation losses"));
    }
    if val_losses.is_empty() {
        return Ok(Vec::new());
    }
    let scaled: Vec<f64> = val_losses.iter().map(|l| -l / beta).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| 2.0 * lambda * e / sum).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientResult {
    pub client_id: usize,
    pub params: ParamVector,
    pub n_k: usize,
    /// Mean objective over the batches of the final local epoch.
    pub train_loss: f64,
    pub clamped: usize,
    pub steps: usize,
}

/// Teachers as shipped to one client.
#[derive(Debug, Clone)]
pub enum TeacherPayload {
    None,
    Ensemble(ParamVector),
    Vote {
        models: Vec<ParamVector>,
        coefficients: Vec<f64>,
    },
}

impl TeacherPayload {
    fn as_teachers(&self) -> Teachers<'_> {
        match self {
            TeacherPayload::None => Teachers::None,
            TeacherPayload::Ensemble(p) => Teachers::Ensemble(p),
            TeacherPayload::Vote {
                models,
                coefficients,
            } => Teachers::Vote {
                models,
                coefficients,
            },
        }
    }
}

pub fn client_rng(seed: u64, round: usize, client_id: usize) -> ChaCha8Rng {
    stream_rng(seed, Stream::Client, &[round as u64, client_id as u64])
}

/// `E` epochs of minibatch SGD from the global model on the strategy's local
/// objective. Batches follow a fresh shuffle each epoch.
pub fn client_update(
    shard: &ClientShard,
    global: &ParamVector,
    teachers: &TeacherPayload,
    spec: &MlpSpec,
    cfg: &FedConfig,
    round: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ClientResult> {
    let objective = Objective::new(
        cfg.strategy,
        spec,
        global,
        teachers.as_teachers(),
        cfg.distill,
        cfg.prox,
    )?;
    let abort = |reason: String| Error::ClientAbort {
        round,
        client_id: shard.client_id,
        reason,
    };
    let data = &shard.train;
    let mut w = global.clone();
    let mut velocity = MomentumBuffer::new(w.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = 0.0;
    let mut clamped = 0;
    let mut steps = 0;
    for epoch in 0..cfg.local_epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let xs = data.xs.select(ndarray::Axis(0), batch);
            let ys: Vec<usize> = batch.iter().map(|&i| data.ys[i]).collect();
            let (loss, grad, c) = objective.loss_and_grad(&w, xs.view(), &ys)?;
            if !loss.is_finite() {
                return Err(abort(format!("non-finite loss in epoch {epoch}, step {steps}")));
            }
            sgd_step(&mut w, &grad, &mut velocity, &cfg.sgd)
                .map_err(|e| abort(format!("epoch {epoch}, step {steps}: {e}")))?;
            loss_sum += loss;
            clamped += c;
            batches += 1;
            steps += 1;
        }
        epoch_loss = loss_sum / batches.max(1) as f64;
    }
    Ok(ClientResult {
        client_id: shard.client_id,
        params: w,
        n_k: data.len(),
        train_loss: epoch_loss,
        clamped,
        steps,
    })
}

/// `Σ (n_k / Σn) w_k` over the given results.
pub fn aggregate(results: &[ClientResult]) -> Result<ParamVector> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no client results to aggregate".into()));
    }
    weighted_mean(results.iter().map(|r| (r.n_k as f64, &r.params)))
}

/// Model copies sent to each sampled client, relative to plain FedAvg.
pub fn payload_multiplier(strategy: Strategy, buffer_size: usize, occupancy: usize) -> usize {
    match strategy {
        Strategy::FedAvg | Strategy::FedProx => 1,
        Strategy::FedGkd if buffer_size == 1 => 1,
        Strategy::FedGkd => 2,
        Strategy::FedGkdVote => occupancy,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub mean_client_train_loss: f64,
    pub payload_multiplier: usize,
    pub sampled_clients: Vec<usize>,
    pub clamp_events: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diag: Option<DriftReport>,
    /// Wall-clock seconds; kept out of the serialized record so that metric
    /// streams stay byte-reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Server state between rounds.
pub struct Simulation {
    cfg: FedConfig,
    spec: MlpSpec,
    shards: Vec<ClientShard>,
    test: Dataset,
    global: ParamVector,
    buffer: TeacherBuffer,
    round: usize,
    diagnostics: Option<DiagnosticsState>,
    pool: Option<rayon::ThreadPool>,
}

impl Simulation {
    pub fn new(
        cfg: FedConfig,
        spec: MlpSpec,
        shards: Vec<ClientShard>,
        test: Dataset,
        probe: Option<InexactnessProbe>,
    ) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        if shards.len() != cfg.num_clients {
            return Err(Error::config(
                "federation.num_clients",
                format!("{} clients configured but {} shards given", cfg.num_clients, shards.len()),
            ));
        }
        for (i, s) in shards.iter().enumerate() {
            if s.client_id != i {
                return Err(Error::InvalidArgument(format!("shard {i} carries client id {}", s.client_id)));
            }
            if s.train.feature_dim() != spec.input_width() {
                return Err(Error::config(
                    "model.layer_widths",
                    format!("input width {} but data has {} features", spec.input_width(), s.train.feature_dim()),
                ));
            }
            if s.train.num_classes != spec.num_classes() {
                return Err(Error::config(
                    "model.layer_widths",
                    format!("output width {} but data has {} classes", spec.num_classes(), s.train.num_classes),
                ));
            }
        }
        if cfg.strategy == Strategy::FedGkdVote && shards.iter().all(|s| s.val.as_ref().is_none_or(Dataset::is_empty)) {
            return Err(Error::config(
                "partition.val_fraction",
                "fedgkd_vote scores teachers on client validation data, but no client has any",
            ));
        }
        if test.feature_dim() != spec.input_width() || test.num_classes != spec.num_classes() {
            return Err(Error::config("eval", "test set does not match the model shape"));
        }
        let diagnostics = probe
            .map(|p| DiagnosticsState::new(p, &shards))
            .transpose()?;
        let pool = if cfg.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.workers)
                    .build()
                    .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?,
            )
        } else {
            None
        };
        let global = init_params(&spec, derive_seed(cfg.seed, Stream::Init, &[]));
        let mut buffer = TeacherBuffer::new(cfg.buffer_size)?;
        buffer.push(0, global.clone());
        Ok(Simulation {
            cfg,
            spec,
            shards,
            test,
            global,
            buffer,
            round: 0,
            diagnostics,
            pool,
        })
    }

    pub fn config(&self) -> &FedConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn buffer(&self) -> &TeacherBuffer {
        &self.buffer
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    /// Replaces the current global model, resetting the teacher history to it.
    pub fn set_global(&mut self, params: ParamVector) -> Result<()> {
        params.check_len(self.spec.param_count(), "set_global")?;
        self.buffer = TeacherBuffer::new(self.cfg.buffer_size)?;
        self.buffer.push(self.round, params.clone());
        self.global = params;
        Ok(())
    }

    /// Teachers each sampled client receives this round.
    pub fn teacher_payloads(&self, sampled: &[usize]) -> Result<Vec<TeacherPayload>> {
        match self.cfg.strategy {
            Strategy::FedAvg | Strategy::FedProx => Ok(vec![TeacherPayload::None; sampled.len()]),
            Strategy::FedGkd => {
                let teacher = ensemble_teacher(&self.buffer)?;
                Ok(vec![TeacherPayload::Ensemble(teacher); sampled.len()])
            }
            Strategy::FedGkdVote => {
                let models = self.buffer.newest_first();
                sampled
                    .iter()
                    .map(|&k| {
                        // shards too small to split score teachers on their training data
                        let shard = &self.shards[k];
                        let val = shard.val.as_ref().filter(|v| !v.is_empty()).unwrap_or(&shard.train);
                        let losses = models
                            .iter()
                            .map(|m| evaluate_model(m, &self.spec, val.x(), &val.ys).map(|(l, _)| l))
                            .collect::<Result<Vec<_>>>()?;
                        let coefficients =
                            vote_coefficients(&losses, self.cfg.vote_lambda, self.cfg.vote_beta)?;
                        Ok(TeacherPayload::Vote {
                            models: models.clone(),
                            coefficients,
                        })
                    })
                    .collect()
            }
        }
    }

    fn run_clients(&self, round: usize, sampled: &[usize], payloads: &[TeacherPayload]) -> Vec<Result<ClientResult>> {
        let work = |(&k, payload): (&usize, &TeacherPayload)| {
            let mut rng = client_rng(self.cfg.seed, round, k);
            client_update(&self.shards[k], &self.global, payload, &self.spec, &self.cfg, round, &mut rng)
        };
        match &self.pool {
            Some(pool) => pool.install(|| sampled.par_iter().zip(payloads.par_iter()).map(work).collect()),
            None => sampled.iter().zip(payloads).map(work).collect(),
        }
    }

    /// One server round. On error the state is left untouched.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let started = Instant::now();
        let round = self.round + 1;
        let sampled = sample_clients(round, &self.cfg);
        let payloads = self.teacher_payloads(&sampled)?;
        let results = self
            .run_clients(round, &sampled, &payloads)
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let next = aggregate(&results)?;
        if !next.is_finite() {
            return Err(Error::ClientAbort {
                round,
                client_id: usize::MAX,
                reason: "aggregated model is not finite".into(),
            });
        }
        let diag = match &mut self.diagnostics {
            Some(state) => Some(diagnostics::drift_report(
                state,
                &self.spec,
                &self.global,
                &results,
                &self.shards,
            )?),
            None => None,
        };
        let (test_loss, test_accuracy) = evaluate_model(&next, &self.spec, self.test.x(), &self.test.ys)?;
        let payload = payload_multiplier(self.cfg.strategy, self.cfg.buffer_size, self.buffer.len());

        self.buffer.push(round, next.clone());
        self.global = next;
        self.round = round;

        let mean_client_train_loss =
            results.iter().map(|r| r.train_loss).sum::<f64>() / results.len() as f64;
        Ok(RoundRecord {
            round,
            test_accuracy,
            test_loss,
            mean_client_train_loss,
            payload_multiplier: payload,
            sampled_clients: sampled,
            clamp_events: results.iter().map(|r| r.clamped).sum(),
            diag,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }

    /// Runs the configured number of rounds, passing each record to `sink`.
    pub fn run<F>(&mut self, mut sink: F) -> Result<()>
    where
        F: FnMut(&RoundRecord) -> Result<()>,
    {
        while self.round < self.cfg.rounds {
            let record = self.run_round()?;
            sink(&record)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    fn result(n_k: usize, params: &[f64]) -> ClientResult {
        ClientResult {
            client_id: 0,
            params: pv(params),
            n_k,
            train_loss: 0.0,
            clamped: 0,
            steps: 0,
        }
    }

    #[test]
    fn sampling_sizes_and_determinism() {
        let cfg = FedConfig {
            num_clients: 20,
            participation: 0.2,
            seed: 5,
            ..Default::default()
        };
        let ids = sample_clients(3, &cfg);
        assert_eq!(ids.len(), 4);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(ids, sample_clients(3, &cfg));

        let full = FedConfig {
            participation: 1.0,
            ..cfg
        };
        for t in 1..5 {
            assert_eq!(sample_clients(t, &full), (0..20).collect::<Vec<_>>());
        }
    }

    #[test]
    fn buffer_keeps_last_m() {
        let mut buf = TeacherBuffer::new(2).unwrap();
        for r in 0..4 {
            buf.push(r, pv(&[r as f64]));
            assert_eq!(buf.len(), (r + 1).min(2));
        }
        assert_eq!(buf.round_tags(), vec![2, 3]);
        assert_eq!(buf.newest_first(), vec![pv(&[3.0]), pv(&[2.0])]);
        assert!(TeacherBuffer::new(0).is_err());
    }

    #[test]
    fn ensemble_cases() {
        let mut buf = TeacherBuffer::new(3).unwrap();
        assert!(ensemble_teacher(&buf).is_err());
        buf.push(0, pv(&[0.0]));
        buf.push(1, pv(&[2.0]));
        assert_eq!(ensemble_teacher(&buf).unwrap(), pv(&[1.0]));

        let x = pv(&[0.1, -0.7, 1e-3]);
        let mut same = TeacherBuffer::new(5).unwrap();
        for r in 0..5 {
            same.push(r, x.clone());
        }
        assert_eq!(ensemble_teacher(&same).unwrap(), x);

        let mut one = TeacherBuffer::new(1).unwrap();
        one.push(0, pv(&[1.0]));
        one.push(1, pv(&[4.0]));
        assert_eq!(ensemble_teacher(&one).unwrap(), pv(&[4.0]));
    }

    #[test]
    fn vote_coefficient_cases() {
        let g = vote_coefficients(&[0.7; 4], 0.1, 0.2).unwrap();
        for v in &g {
            assert_abs_diff_eq!(*v, 0.05, epsilon = 1e-15);
        }
        let beta = 0.5;
        let g = vote_coefficients(&[0.0, beta * 3f64.ln()], 0.1, beta).unwrap();
        assert_abs_diff_eq!(g[0], 0.15, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.05, epsilon = 1e-15);
        let g = vote_coefficients(&[1e4, -1e4, 3.0], 0.1, 0.01).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(g.iter().sum::<f64>(), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn aggregate_cases() {
        assert!(aggregate(&[]).is_err());
        assert_eq!(aggregate(&[result(7, &[1.5, 2.0])]).unwrap(), pv(&[1.5, 2.0]));
        assert_eq!(aggregate(&[result(1, &[0.0]), result(3, &[4.0])]).unwrap(), pv(&[3.0]));
        let avg = aggregate(&[result(5, &[1.0, 0.0]), result(5, &[3.0, 2.0])]).unwrap();
        assert_eq!(avg, pv(&[2.0, 1.0]));
    }

    #[test]
    fn payload_accounting() {
        assert_eq!(payload_multiplier(Strategy::FedAvg, 5, 5), 1);
        assert_eq!(payload_multiplier(Strategy::FedProx, 5, 5), 1);
        assert_eq!(payload_multiplier(Strategy::FedGkd, 1, 1), 1);
        assert_eq!(payload_multiplier(Strategy::FedGkd, 5, 1), 2);
        assert_eq!(payload_multiplier(Strategy::FedGkdVote, 5, 3), 3);
    }

    #[test]
    fn config_validation() {
        assert!(FedConfig::default().validate().is_ok());
        let bad = FedConfig {
            participation: 0.01,
            num_clients: 20,
            ..Default::default()
        };
        // ceil(0.2) = 1 is still a valid round
        assert!(bad.validate().is_ok());
        assert!(FedConfig { participation: 0.0, ..Default::default() }.validate().is_err());
        assert!(FedConfig { buffer_size: 0, ..Default::default() }.validate().is_err());
        assert!(FedConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
