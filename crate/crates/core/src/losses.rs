//! Cross-entropy, the distillation regularizers, the proximal term, and the
//! per-strategy local objectives built from them.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{backprop, forward, predict, softmax_rows, MlpSpec, ParamVector};

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    #[default]
    Kl,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub gamma: f64,
    pub temperature: f64,
    pub kind: RegularizerKind,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            gamma: 0.2,
            temperature: 1.0,
            kind: RegularizerKind::Kl,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("distill.gamma", "must be nonnegative"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("distill.temperature", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxConfig {
    pub mu: f64,
}

impl Default for ProxConfig {
    fn default() -> Self {
        ProxConfig { mu: 0.01 }
    }
}

impl ProxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::config("prox.mu", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub loss: f64,
    pub dloss_dlogits: Array2<f64>,
    /// Labels whose probability fell below [`PROB_EPS`] and were clamped.
    pub clamped: usize,
}

/// Mean negative log-likelihood of `labels` under row-wise `probs`.
pub fn cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> Result<CrossEntropy> {
    let (n, classes) = probs.dim();
    if labels.len() != n {
        return Err(Error::shape("cross_entropy: labels", n, labels.len()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("cross_entropy of an empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside [0, {classes})"
        )));
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut clamped = 0;
    let mut grad = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        let p = probs[[i, y]];
        if p < PROB_EPS {
            clamped += 1;
        }
        loss -= p.max(PROB_EPS).ln();
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|g| g * scale);
    Ok(CrossEntropy {
        loss: loss * scale,
        dloss_dlogits: grad,
        clamped,
    })
}

/// `Σ p_j ln(p_j / q_j)` with both sides floored at [`PROB_EPS`] inside the
/// log and `0·ln 0 = 0`. Flooring both sides makes `kl_div(p, p)` exactly 0.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_div", p.len(), q.len()));
    }
    Ok(kl_unchecked(p, q))
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let sum: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pj, _)| pj > 0.0)
        .map(|(&pj, &qj)| pj * (pj.max(PROB_EPS).ln() - qj.max(PROB_EPS).ln()))
        .sum();
    sum.max(0.0)
}

#[derive(Debug, Clone)]
pub struct KdTerm {
    pub loss: f64,
    pub dloss_dstudent: Array2<f64>,
}

/// Distillation penalty `(γ / 2n) Σ_i D(teacher_i, student_i)` over a batch of
/// `n` rows. For [`RegularizerKind::Kl`], `D` is `KL(teacher ‖ student)` on
/// the temperature-softened distributions; for [`RegularizerKind::Mse`] it is
/// the squared Euclidean distance between raw logits. The teacher is a
/// constant: only the student receives a gradient.
pub fn kd_term(
    teacher_logits: &Array2<f64>,
    student_logits: &Array2<f64>,
    cfg: &DistillConfig,
) -> Result<KdTerm> {
    if teacher_logits.dim() != student_logits.dim() {
        return Err(Error::shape(
            "kd_term: teacher logits",
            format!("{:?}", student_logits.dim()),
            format!("{:?}", teacher_logits.dim()),
        ));
    }
    let n = student_logits.nrows();
    if cfg.gamma == 0.0 || n == 0 {
        return Ok(KdTerm {
            loss: 0.0,
            dloss_dstudent: Array2::zeros(student_logits.raw_dim()),
        });
    }
    let scale = cfg.gamma / (2.0 * n as f64);
    match cfg.kind {
        RegularizerKind::Kl => {
            let tau = cfg.temperature;
            let p = softmax_rows(teacher_logits, tau)?;
            let q = softmax_rows(student_logits, tau)?;
            let total: f64 = p
                .rows()
                .into_iter()
                .zip(q.rows())
                .map(|(pr, qr)| {
                    kl_unchecked(
                        pr.as_slice().expect("standard layout"),
                        qr.as_slice().expect("standard layout"),
                    )
                })
                .sum();
            // d/dz KL(p ‖ softmax(z/τ)) = (q − p) / τ
            let grad = (&q - &p) * (scale / tau);
            Ok(KdTerm {
                loss: scale * total,
                dloss_dstudent: grad,
            })
        }
        RegularizerKind::Mse => {
            let diff = student_logits - teacher_logits;
            let total = diff.iter().map(|d| d * d).sum::<f64>();
            Ok(KdTerm {
                loss: scale * total,
                dloss_dstudent: diff * (2.0 * scale),
            })
        }
    }
}

/// `(μ/2)‖w − anchor‖²` and its gradient `μ(w − anchor)`.
pub fn prox_term(w: &ParamVector, anchor: &ParamVector, cfg: &ProxConfig) -> Result<(f64, ParamVector)> {
    w.check_len(anchor.len(), "prox_term: anchor")?;
    let mut grad = ParamVector::zeros(w.len());
    let mut sq = 0.0;
    for ((g, &a), &b) in grad.iter_mut().zip(w.iter()).zip(anchor.iter()) {
        let d = a - b;
        sq += d * d;
        *g = cfg.mu * d;
    }
    Ok((0.5 * cfg.mu * sq, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "fedgkd")]
    FedGkd,
    #[serde(rename = "fedgkd_vote")]
    FedGkdVote,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx => "fedprox",
            Strategy::FedGkd => "fedgkd",
            Strategy::FedGkdVote => "fedgkd_vote",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Frozen models a client distills from.
#[derive(Debug, Clone, Copy)]
pub enum Teachers<'a> {
    None,
    /// The parameter-averaged ensemble of buffered global models.
    Ensemble(&'a ParamVector),
    /// Every buffered global model, each with its own coefficient.
    Vote {
        models: &'a [ParamVector],
        coefficients: &'a [f64],
    },
}

/// A client's training objective for one round.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub strategy: Strategy,
    pub spec: &'a MlpSpec,
    /// Global model the client started from; the proximal anchor.
    pub anchor: &'a ParamVector,
    pub teachers: Teachers<'a>,
    pub distill: DistillConfig,
    pub prox: ProxConfig,
}

#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub loss: f64,
    pub dloss_dlogits: Array2<f64>,
    /// Gradient contributions that bypass the logits (the proximal term).
    pub param_grad: Option<ParamVector>,
    pub clamped: usize,
}

impl<'a> Objective<'a> {
    pub fn new(
        strategy: Strategy,
        spec: &'a MlpSpec,
        anchor: &'a ParamVector,
        teachers: Teachers<'a>,
        distill: DistillConfig,
        prox: ProxConfig,
    ) -> Result<Self> {
        let d = spec.param_count();
        anchor.check_len(d, "objective: anchor")?;
        match (strategy, &teachers) {
            (Strategy::FedAvg | Strategy::FedProx, Teachers::None) => {}
            (Strategy::FedGkd, Teachers::Ensemble(t)) => t.check_len(d, "objective: teacher")?,
            (
                Strategy::FedGkdVote,
                Teachers::Vote {
                    models,
                    coefficients,
                },
            ) => {
                if models.is_empty() || models.len() != coefficients.len() {
                    return Err(Error::config(
                        "teachers",
                        format!(
                            "vote needs a nonempty teacher list with one coefficient each, got {} models and {} coefficients",
                            models.len(),
                            coefficients.len()
                        ),
                    ));
                }
                for m in models.iter() {
                    m.check_len(d, "objective: teacher")?;
                }
            }
            (s, t) => {
                return Err(Error::config(
                    "teachers",
                    format!("strategy {s} cannot train with teachers {t:?}"),
                ))
            }
        }
        Ok(Objective {
            strategy,
            spec,
            anchor,
            teachers,
            distill,
            prox,
        })
    }

    /// Loss and logit-space gradient given the student's logits on the batch.
    pub fn evaluate_logits(
        &self,
        params: &ParamVector,
        logits: &Array2<f64>,
        batch_x: ArrayView2<f64>,
        labels: &[usize],
    ) -> Result<ObjectiveEval> {
        let probs = softmax_rows(logits, 1.0)?;
        let ce = cross_entropy(&probs, labels)?;
        let mut loss = ce.loss;
        let mut dlogits = ce.dloss_dlogits;
        let mut param_grad = None;
        match self.teachers {
            Teachers::None => {
                if self.strategy == Strategy::FedProx {
                    let (l, g) = prox_term(params, self.anchor, &self.prox)?;
                    loss += l;
                    param_grad = Some(g);
                }
            }
            Teachers::Ensemble(teacher) => {
                let t_logits = predict(teacher, self.spec, batch_x)?;
                let kd = kd_term(&t_logits, logits, &self.distill)?;
                loss += kd.loss;
                dlogits += &kd.dloss_dstudent;
            }
            Teachers::Vote {
                models,
                coefficients,
            } => {
                let mut kd_loss = 0.0;
                let mut kd_grad = Array2::<f64>::zeros(logits.raw_dim());
                for (teacher, &gamma) in models.iter().zip(coefficients) {
                    let cfg = DistillConfig {
                        gamma,
                        ..self.distill
                    };
                    let t_logits = predict(teacher, self.spec, batch_x)?;
                    let kd = kd_term(&t_logits, logits, &cfg)?;
                    kd_loss += kd.loss;
                    kd_grad += &kd.dloss_dstudent;
                }
                loss += kd_loss;
                dlogits += &kd_grad;
            }
        }
        Ok(ObjectiveEval {
            loss,
            dloss_dlogits: dlogits,
            param_grad,
            clamped: ce.clamped,
        })
    }

    pub fn loss(&self, params: &ParamVector, batch_x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        let logits = predict(params, self.spec, batch_x)?;
        Ok(self.evaluate_logits(params, &logits, batch_x, labels)?.loss)
    }

    /// Total loss and full parameter gradient on one batch.
    pub fn loss_and_grad(
        &self,
        params: &ParamVector,
        batch_x: ArrayView2<f64>,
        labels: &[usize],
    ) -> Result<(f64, ParamVector, usize)> {
        let (logits, cache) = forward(params, self.spec, batch_x)?;
        let eval = self.evaluate_logits(params, &logits, batch_x, labels)?;
        let mut grad = backprop(&cache, params, self.spec, &eval.dloss_dlogits)?;
        if let Some(extra) = &eval.param_grad {
            grad.add_scaled(extra, 1.0)?;
        }
        Ok((eval.loss, grad, eval.clamped))
    }
}

/// One-shot form of [`Objective::evaluate_logits`] that also runs the
/// student forward pass.
pub fn local_objective(
    objective: &Objective<'_>,
    params: &ParamVector,
    batch_x: ArrayView2<f64>,
    labels: &[usize],
) -> Result<ObjectiveEval> {
    let logits = predict(params, objective.spec, batch_x)?;
    objective.evaluate_logits(params, &logits, batch_x, labels)
}

/// Mean cross-entropy and accuracy of `params` on a labelled set.
pub fn evaluate_model(
    params: &ParamVector,
    spec: &MlpSpec,
    xs: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(f64, f64)> {
    let logits = predict(params, spec, xs)?;
    let probs = softmax_rows(&logits, 1.0)?;
    let ce = cross_entropy(&probs, labels)?;
    let correct = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.as_slice().expect("standard layout")) == y)
        .count();
    Ok((ce.loss, correct as f64 / labels.len() as f64))
}

/// First index of the largest entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Activation};
    use super::Strategy;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn cross_entropy_cases() {
        let perfect = cross_entropy(&array![[0.0, 1.0, 0.0]], &[1]).unwrap();
        assert_eq!(perfect.loss, 0.0);
        assert_eq!(perfect.clamped, 0);

        let uniform = cross_entropy(&array![[0.25; 4], [0.25; 4]], &[0, 3]).unwrap();
        assert_abs_diff_eq!(uniform.loss, 4f64.ln(), epsilon = 1e-15);

        let ce = cross_entropy(&array![[0.25, 0.75]], &[1]).unwrap();
        assert_abs_diff_eq!(ce.loss, 0.287682072451781, epsilon = 1e-12);
        assert_abs_diff_eq!(ce.dloss_dlogits[[0, 0]], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(ce.dloss_dlogits[[0, 1]], -0.25, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_clamps_and_counts() {
        let ce = cross_entropy(&array![[1.0, 0.0]], &[1]).unwrap();
        assert_abs_diff_eq!(ce.loss, -(1e-12f64).ln(), epsilon = 1e-9);
        assert_eq!(ce.clamped, 1);
        assert!(cross_entropy(&array![[0.5, 0.5]], &[2]).is_err());
        assert!(cross_entropy(&array![[0.5, 0.5]], &[0, 1]).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_div(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = kl_div(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert_abs_diff_eq!(v, 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.143841036225890, epsilon = 1e-12);
        assert_abs_diff_eq!(kl_div(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert!(kl_div(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kd_term_identity_and_disabled() {
        let z = array![[0.3, -1.0, 2.0], [1.0, 1.0, 0.0]];
        for kind in [RegularizerKind::Kl, RegularizerKind::Mse] {
            let cfg = DistillConfig {
                gamma: 0.7,
                temperature: 2.0,
                kind,
            };
            let kd = kd_term(&z, &z, &cfg).unwrap();
            assert_abs_diff_eq!(kd.loss, 0.0, epsilon = 1e-15);
            assert!(kd.dloss_dstudent.iter().all(|g| g.abs() < 1e-15));

            let off = DistillConfig { gamma: 0.0, ..cfg };
            let kd = kd_term(&z, &(&z * 3.0), &off).unwrap();
            assert_eq!(kd.loss, 0.0);
            assert!(kd.dloss_dstudent.iter().all(|&g| g == 0.0));
        }
        assert!(kd_term(&z, &array![[1.0, 2.0, 3.0]], &DistillConfig::default()).is_err());
    }

    #[test]
    fn kd_term_single_sample_closed_form() {
        // teacher probs [0.5, 0.5], student probs [0.25, 0.75]
        let teacher = array![[0.0, 0.0]];
        let student = array![[0.0, 3f64.ln()]];
        let cfg = DistillConfig {
            gamma: 2.0,
            temperature: 1.0,
            kind: RegularizerKind::Kl,
        };
        let kd = kd_term(&teacher, &student, &cfg).unwrap();
        assert_abs_diff_eq!(kd.loss, 0.143841036225890, epsilon = 1e-12);
    }

    #[test]
    fn kd_mse_matches_definition() {
        let teacher = array![[1.0, 2.0], [0.0, 0.0]];
        let student = array![[0.0, 0.0], [1.0, -1.0]];
        let cfg = DistillConfig {
            gamma: 0.5,
            temperature: 1.0,
            kind: RegularizerKind::Mse,
        };
        let kd = kd_term(&teacher, &student, &cfg).unwrap();
        // (0.5 / 4) * (1 + 4 + 1 + 1)
        assert_abs_diff_eq!(kd.loss, 0.875, epsilon = 1e-15);
    }

    #[test]
    fn prox_cases() {
        let cfg = ProxConfig { mu: 2.0 };
        let w = ParamVector::from_vec(vec![3.0]);
        let a = ParamVector::from_vec(vec![1.0]);
        let (l, g) = prox_term(&w, &a, &cfg).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g.as_slice(), &[4.0]);
        let (l, g) = prox_term(&w, &w, &cfg).unwrap();
        assert_eq!((l, g.as_slice()), (0.0, &[0.0][..]));
        let (l, g) = prox_term(&w, &a, &ProxConfig { mu: 0.0 }).unwrap();
        assert_eq!((l, g.as_slice()), (0.0, &[0.0][..]));
        assert!(prox_term(&w, &ParamVector::zeros(2), &cfg).is_err());
    }

    fn fixture() -> (MlpSpec, ParamVector, ParamVector, Array2<f64>, Vec<usize>) {
        let spec = MlpSpec::new(vec![3, 6, 4], Activation::Tanh).unwrap();
        let student = init_params(&spec, 1);
        let teacher = init_params(&spec, 2);
        let x = array![[0.5, -1.0, 2.0], [1.5, 0.3, -0.7], [-2.0, 0.1, 0.0]];
        (spec, student, teacher, x, vec![0, 3, 1])
    }

    #[test]
    fn fedgkd_with_zero_gamma_reduces_to_fedavg() {
        let (spec, student, teacher, x, y) = fixture();
        let avg = Objective::new(Strategy::FedAvg, &spec, &teacher, Teachers::None, DistillConfig::default(), ProxConfig::default()).unwrap();
        let gkd = Objective::new(
            Strategy::FedGkd,
            &spec,
            &teacher,
            Teachers::Ensemble(&teacher),
            DistillConfig { gamma: 0.0, ..Default::default() },
            ProxConfig::default(),
        )
        .unwrap();
        let (la, ga, _) = avg.loss_and_grad(&student, x.view(), &y).unwrap();
        let (lg, gg, _) = gkd.loss_and_grad(&student, x.view(), &y).unwrap();
        assert_eq!(la, lg);
        assert_eq!(ga, gg);
    }

    #[test]
    fn vote_reductions() {
        let (spec, student, teacher, x, y) = fixture();
        let cfg = DistillConfig::default();
        let gkd = Objective::new(Strategy::FedGkd, &spec, &teacher, Teachers::Ensemble(&teacher), cfg, ProxConfig::default()).unwrap();
        let single = [teacher.clone()];
        let gammas = [cfg.gamma];
        let one = Objective::new(
            Strategy::FedGkdVote,
            &spec,
            &teacher,
            Teachers::Vote { models: &single, coefficients: &gammas },
            cfg,
            ProxConfig::default(),
        )
        .unwrap();
        assert_eq!(gkd.loss_and_grad(&student, x.view(), &y).unwrap().0, one.loss_and_grad(&student, x.view(), &y).unwrap().0);
        assert_eq!(gkd.loss_and_grad(&student, x.view(), &y).unwrap().1, one.loss_and_grad(&student, x.view(), &y).unwrap().1);

        let pair = [teacher.clone(), teacher.clone()];
        let half = cfg.gamma / 2.0;
        let halves = [half, half];
        let two = Objective::new(
            Strategy::FedGkdVote,
            &spec,
            &teacher,
            Teachers::Vote { models: &pair, coefficients: &halves },
            cfg,
            ProxConfig::default(),
        )
        .unwrap();
        let a = local_objective(&gkd, &student, x.view(), &y).unwrap();
        let b = local_objective(&two, &student, x.view(), &y).unwrap();
        assert_abs_diff_eq!(a.loss, b.loss, epsilon = 1e-15);
    }

    #[test]
    fn arity_mismatches_rejected() {
        let (spec, _, teacher, _, _) = fixture();
        let d = DistillConfig::default();
        let p = ProxConfig::default();
        assert!(Objective::new(Strategy::FedGkd, &spec, &teacher, Teachers::None, d, p).is_err());
        assert!(Objective::new(Strategy::FedAvg, &spec, &teacher, Teachers::Ensemble(&teacher), d, p).is_err());
        assert!(Objective::new(Strategy::FedGkdVote, &spec, &teacher, Teachers::Vote { models: &[], coefficients: &[] }, d, p).is_err());
        let one = [teacher.clone()];
        assert!(Objective::new(Strategy::FedGkdVote, &spec, &teacher, Teachers::Vote { models: &one, coefficients: &[0.1, 0.1] }, d, p).is_err());
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[3.0]), 0);
    }

    fn prob_vec(n: usize) -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
        use proptest::strategy::Strategy as _;
        proptest::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.into_iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn kl_nonnegative(p in prob_vec(5), q in prob_vec(5)) {
            let v = kl_div(&p, &q).unwrap();
            prop_assert!(v >= 0.0 && v.is_finite());
            prop_assert_eq!(kl_div(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn objectives_finite_on_finite_inputs(
            xs in proptest::collection::vec(-50.0f64..50.0, 9),
            seed in 0u64..1000,
        ) {
            let spec = MlpSpec::new(vec![3, 5, 4], Activation::Relu).unwrap();
            let student = init_params(&spec, seed);
            let teacher = init_params(&spec, seed + 1);
            let x = Array2::from_shape_vec((3, 3), xs).unwrap();
            let y = [0, 1, 3];
            let models = [teacher.clone(), student.clone()];
            let coefs = [0.15, 0.05];
            let teachers = [
                (Strategy::FedAvg, Teachers::None),
                (Strategy::FedProx, Teachers::None),
                (Strategy::FedGkd, Teachers::Ensemble(&teacher)),
                (Strategy::FedGkdVote, Teachers::Vote { models: &models, coefficients: &coefs }),
            ];
            for (s, t) in teachers {
                let obj = Objective::new(s, &spec, &teacher, t, DistillConfig::default(), ProxConfig::default()).unwrap();
                let (l, g, _) = obj.loss_and_grad(&student, x.view(), &y).unwrap();
                prop_assert!(l.is_finite());
                prop_assert!(g.is_finite());
            }
        }
    }
}
