//! Client-drift and inexactness instrumentation, plus the finite-difference
//! gradient self-check. Nothing here mutates training state.

use ndarray::Array2;
use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::federation::ClientResult;
use crate::losses::{
    cross_entropy, kl_div, DistillConfig, Objective, ProxConfig, RegularizerKind, Strategy,
    Teachers,
};
use crate::nn::{backprop, forward, init_params, predict, softmax_rows, MlpSpec, ParamVector};
use crate::rng::{stream_rng, Stream};

/// Stand-in for the unmeasurable composite constant multiplying the
/// displacement term of the inexactness condition.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InexactnessProbe {
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDrift {
    pub client_id: usize,
    pub param_distance: f64,
    pub output_kl: f64,
    pub inexactness_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub clients: Vec<ClientDrift>,
    pub mean_param_distance: f64,
    pub mean_output_kl: f64,
    /// Full-batch `‖∇f(w_t)‖` over every client's training data.
    pub global_grad_norm: f64,
    /// Running minimum of `global_grad_norm` over the rounds so far.
    pub min_global_grad_norm: f64,
}

pub struct DiagnosticsState {
    probe: InexactnessProbe,
    pooled: Dataset,
    min_grad_norm: f64,
}

impl DiagnosticsState {
    pub fn new(probe: InexactnessProbe, shards: &[ClientShard]) -> Result<Self> {
        if !(probe.coefficient >= 0.0 && probe.coefficient.is_finite()) {
            return Err(Error::config("diagnostics.inexactness_c", "must be nonnegative"));
        }
        let parts: Vec<&Dataset> = shards.iter().map(|s| &s.train).collect();
        Ok(DiagnosticsState {
            probe,
            pooled: Dataset::concat(&parts)?,
            min_grad_norm: f64::INFINITY,
        })
    }
}

/// Full-batch gradient of the mean cross-entropy on `ds`.
pub fn full_batch_ce_grad(spec: &MlpSpec, params: &ParamVector, ds: &Dataset) -> Result<ParamVector> {
    let (logits, cache) = forward(params, spec, ds.x())?;
    let probs = softmax_rows(&logits, 1.0)?;
    let ce = cross_entropy(&probs, &ds.ys)?;
    backprop(&cache, params, spec, &ce.dloss_dlogits)
}

/// `‖∇F_k(w_after) + c(w_after − w_before)‖ / max(‖∇F_k(w_before)‖, 1e-12)`
pub fn inexactness_ratio(
    spec: &MlpSpec,
    train: &Dataset,
    w_before: &ParamVector,
    w_after: &ParamVector,
    probe: &InexactnessProbe,
) -> Result<f64> {
    let mut lhs = full_batch_ce_grad(spec, w_after, train)?;
    let mut displacement = w_after.clone();
    displacement.add_scaled(w_before, -1.0)?;
    lhs.add_scaled(&displacement, probe.coefficient)?;
    let rhs = full_batch_ce_grad(spec, w_before, train)?.norm();
    Ok(lhs.norm() / rhs.max(1e-12))
}

/// Mean `KL(global ‖ local)` between output distributions on `ds`.
pub fn output_kl(spec: &MlpSpec, global: &ParamVector, local: &ParamVector, ds: &Dataset) -> Result<f64> {
    let p = softmax_rows(&predict(global, spec, ds.x())?, 1.0)?;
    let q = softmax_rows(&predict(local, spec, ds.x())?, 1.0)?;
    let mut total = 0.0;
    for (pr, qr) in p.rows().into_iter().zip(q.rows()) {
        total += kl_div(pr.as_slice().expect("standard"), qr.as_slice().expect("standard"))?;
    }
    Ok(total / ds.len() as f64)
}

pub fn drift_report(
    state: &mut DiagnosticsState,
    spec: &MlpSpec,
    global_before: &ParamVector,
    results: &[ClientResult],
    shards: &[ClientShard],
) -> Result<DriftReport> {
    let clients = results
        .iter()
        .map(|r| {
            let train = &shards[r.client_id].train;
            Ok(ClientDrift {
                client_id: r.client_id,
                param_distance: r.params.distance(global_before)?,
                output_kl: output_kl(spec, global_before, &r.params, train)?,
                inexactness_ratio: inexactness_ratio(spec, train, global_before, &r.params, &state.probe)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let global_grad_norm = full_batch_ce_grad(spec, global_before, &state.pooled)?.norm();
    state.min_grad_norm = state.min_grad_norm.min(global_grad_norm);
    let n = clients.len().max(1) as f64;
    Ok(DriftReport {
        mean_param_distance: clients.iter().map(|c| c.param_distance).sum::<f64>() / n,
        mean_output_kl: clients.iter().map(|c| c.output_kl).sum::<f64>() / n,
        clients,
        global_grad_norm,
        min_global_grad_norm: state.min_grad_norm,
    })
}

/// Which composite objective a gradient check exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSelector {
    CrossEntropy,
    DistillKl,
    DistillMse,
    Proximal,
    Vote,
}

impl LossSelector {
    pub const ALL: [LossSelector; 5] = [
        LossSelector::CrossEntropy,
        LossSelector::DistillKl,
        LossSelector::DistillMse,
        LossSelector::Proximal,
        LossSelector::Vote,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossSelector::CrossEntropy => "ce",
            LossSelector::DistillKl => "ce+kd-kl",
            LossSelector::DistillMse => "ce+kd-mse",
            LossSelector::Proximal => "ce+prox",
            LossSelector::Vote => "ce+vote",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter block ("layer 1 bias", ...) where the worst error occurred.
    pub worst_block: String,
    pub points: usize,
}

pub const FD_STEP: f64 = 1e-5;
/// Pre-activations closer than this to a ReLU kink force a resample, since a
/// central difference straddling the kink is not a derivative.
const KINK_MARGIN: f64 = 1e-3;

fn near_kink(spec: &MlpSpec, params: &ParamVector, x: &Array2<f64>) -> Result<bool> {
    if spec.activation != crate::nn::Activation::Relu {
        return Ok(false);
    }
    let (_, cache) = forward(params, spec, x.view())?;
    Ok(cache
        .pre_activations
        .iter()
        .any(|z| z.iter().any(|v| v.abs() < KINK_MARGIN)))
}

fn random_params<R: Rng>(spec: &MlpSpec, rng: &mut R) -> ParamVector {
    let mut p = init_params(spec, rng.random());
    let bias = Uniform::new(-0.5, 0.5).expect("finite bounds");
    for layer in spec.layers() {
        for b in &mut p[layer.bias] {
            *b = bias.sample(rng);
        }
    }
    p
}

/// Relative error of each parameter block, `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`.
fn block_errors(spec: &MlpSpec, analytic: &ParamVector, numeric: &[f64]) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (l, layer) in spec.layers().into_iter().enumerate() {
        for (name, range) in [("weights", layer.weights), ("bias", layer.bias)] {
            let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
            for i in range {
                diff += (analytic[i] - numeric[i]).powi(2);
                na += analytic[i].powi(2);
                nn += numeric[i].powi(2);
            }
            let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-8);
            out.push((format!("layer {l} {name}"), rel));
        }
    }
    out
}

/// Compares analytic gradients of the selected objective against central
/// differences at `points` random (parameters, batch) draws.
pub fn finite_diff_check(spec: &MlpSpec, selector: LossSelector, seed: u64, points: usize) -> Result<GradCheckReport> {
    finite_diff_check_with(spec, selector, seed, points, |_| {})
}

/// As [`finite_diff_check`], but passes every analytic gradient through
/// `tamper` first. Used to confirm the check catches broken gradients.
pub fn finite_diff_check_with<F>(
    spec: &MlpSpec,
    selector: LossSelector,
    seed: u64,
    points: usize,
    tamper: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut ParamVector),
{
    spec.validate()?;
    let mut rng = stream_rng(seed, Stream::Init, &[0xfd]);
    let feature = Uniform::new(-2.0, 2.0).expect("finite bounds");
    let batch = 4;
    let mut worst = (String::from("none"), 0.0f64);
    let mut done = 0;
    let mut attempts = 0;
    while done < points {
        attempts += 1;
        if attempts > points * 200 + 1000 {
            return Err(Error::InvalidArgument(
                "could not draw points away from activation kinks".into(),
            ));
        }
        let student = random_params(spec, &mut rng);
        let x = Array2::from_shape_fn((batch, spec.input_width()), |_| feature.sample(&mut rng));
        if near_kink(spec, &student, &x)? {
            continue;
        }
        let ys: Vec<usize> = (0..batch).map(|_| rng.random_range(0..spec.num_classes())).collect();
        let anchor = random_params(spec, &mut rng);
        let teachers = [random_params(spec, &mut rng), random_params(spec, &mut rng)];
        let coefficients = [0.15, 0.05];
        let (strategy, kind, t) = match selector {
            LossSelector::CrossEntropy => (Strategy::FedAvg, RegularizerKind::Kl, Teachers::None),
            LossSelector::DistillKl => (Strategy::FedGkd, RegularizerKind::Kl, Teachers::Ensemble(&teachers[0])),
            LossSelector::DistillMse => (Strategy::FedGkd, RegularizerKind::Mse, Teachers::Ensemble(&teachers[0])),
            LossSelector::Proximal => (Strategy::FedProx, RegularizerKind::Kl, Teachers::None),
            LossSelector::Vote => (
                Strategy::FedGkdVote,
                RegularizerKind::Kl,
                Teachers::Vote {
                    models: &teachers,
                    coefficients: &coefficients,
                },
            ),
        };
        let distill = DistillConfig {
            gamma: 0.2,
            temperature: 1.0,
            kind,
        };
        let objective = Objective::new(strategy, spec, &anchor, t, distill, ProxConfig { mu: 0.01 })?;
        let (_, mut analytic, _) = objective.loss_and_grad(&student, x.view(), &ys)?;
        tamper(&mut analytic);
        let mut probe = student.clone();
        let mut numeric = vec![0.0; student.len()];
        for i in 0..student.len() {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = objective.loss(&probe, x.view(), &ys)?;
            probe[i] = orig - FD_STEP;
            let down = objective.loss(&probe, x.view(), &ys)?;
            probe[i] = orig;
            numeric[i] = (up - down) / (2.0 * FD_STEP);
        }
        for (block, err) in block_errors(spec, &analytic, &numeric) {
            if err > worst.1 || !err.is_finite() {
                worst = (block, err);
            }
        }
        done += 1;
    }
    Ok(GradCheckReport {
        max_relative_error: worst.1,
        worst_block: worst.0,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_toy_dataset;
    use crate::nn::{Activation, SgdHyper, MomentumBuffer, sgd_step};

    #[test]
    fn gradient_checks_pass_for_every_objective() {
        for act in [Activation::Relu, Activation::Tanh] {
            let spec = MlpSpec::new(vec![3, 5, 4], act).unwrap();
            for sel in LossSelector::ALL {
                let r = finite_diff_check(&spec, sel, 7, 5).unwrap();
                assert!(r.max_relative_error < 1e-4, "{act:?} {}: {r:?}", sel.name());
            }
        }
    }

    #[test]
    fn tampered_gradient_is_caught_and_located() {
        let spec = MlpSpec::new(vec![3, 5, 4], Activation::Tanh).unwrap();
        let target = spec.layers()[1].weights.start + 2;
        let r = finite_diff_check_with(&spec, LossSelector::CrossEntropy, 1, 2, |g| g[target] += 0.5).unwrap();
        assert!(r.max_relative_error > 1e-2);
        assert_eq!(r.worst_block, "layer 1 weights");
    }

    #[test]
    fn stationary_point_has_zero_ratio() {
        // Zero params on a class-balanced set: uniform outputs, zero gradient.
        let spec = MlpSpec::new(vec![2, 3, 2], Activation::Relu).unwrap();
        let xs = ndarray::array![[1.0, 0.0], [1.0, 0.0]];
        let ds = Dataset::new(xs, vec![0, 1], 2).unwrap();
        let w = ParamVector::zeros(spec.param_count());
        let r = inexactness_ratio(&spec, &ds, &w, &w, &InexactnessProbe { coefficient: 0.3 }).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn small_gd_step_on_quadratic_region_shrinks_gradient() {
        // Linear softmax model: the CE loss is convex, so a tiny GD step
        // reduces the gradient norm.
        let spec = MlpSpec::new(vec![2, 4], Activation::Relu).unwrap();
        let ds = gen_toy_dataset(200, 3).unwrap();
        let w0 = init_params(&spec, 4);
        let g = full_batch_ce_grad(&spec, &w0, &ds).unwrap();
        let mut w1 = w0.clone();
        let hyper = SgdHyper { learning_rate: 1e-3, momentum: 0.0, weight_decay: 0.0 };
        sgd_step(&mut w1, &g, &mut MomentumBuffer::new(w0.len()), &hyper).unwrap();
        let r = inexactness_ratio(&spec, &ds, &w0, &w1, &InexactnessProbe::default()).unwrap();
        assert!(r < 1.0, "{r}");
    }

    #[test]
    fn untrained_clients_have_zero_drift() {
        let spec = MlpSpec::new(vec![2, 4, 4], Activation::Relu).unwrap();
        let ds = gen_toy_dataset(40, 1).unwrap();
        let shard = ClientShard { client_id: 0, train: ds, val: None, train_indices: (0..40).collect(), val_indices: vec![] };
        let w = init_params(&spec, 2);
        let res = ClientResult { client_id: 0, params: w.clone(), n_k: 40, train_loss: 0.0, clamped: 0, steps: 0 };
        let mut state = DiagnosticsState::new(InexactnessProbe::default(), std::slice::from_ref(&shard)).unwrap();
        let report = drift_report(&mut state, &spec, &w, &[res], &[shard]).unwrap();
        assert_eq!(report.clients[0].param_distance, 0.0);
        assert_eq!(report.clients[0].output_kl, 0.0);
        assert_eq!(report.mean_output_kl, 0.0);
        assert!(report.global_grad_norm.is_finite());
        assert_eq!(report.min_global_grad_norm, report.global_grad_norm);
    }
}
