//! Built-in verification suites behind `fedgkd verify`.

use rand::distr::{Distribution, Uniform};
use rand::Rng;

use crate::checkpoint;
use crate::config::{toy_config, ExperimentConfig};
use crate::data::{dirichlet_partition, gen_toy_dataset, max_client_tv, Dataset, PartitionSpec};
use crate::diagnostics::{finite_diff_check_with, LossSelector};
use crate::error::{Error, Result};
use crate::federation::{aggregate, ensemble_teacher, vote_coefficients, ClientResult, RoundRecord, TeacherBuffer};
use crate::harness::build_simulation;
use crate::losses::{kl_div, Strategy};
use crate::nn::{init_params, Activation, MlpSpec, ParamVector};
use crate::rng::{stream_rng, Stream};

pub const SUITES: [&str; 7] = [
    "gradients",
    "kl",
    "reductions",
    "algebra",
    "vote",
    "partition",
    "checkpoint",
];

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub cases: Vec<CaseResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    fn push(&mut self, suite: &'static str, name: impl Into<String>, outcome: std::result::Result<String, String>) {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.cases.push(CaseResult {
            suite,
            name: name.into(),
            passed,
            detail,
        });
    }
}

type Outcome = std::result::Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

/// Runs one suite, or all of them when `suite` is `None`.
pub fn verify(suite: Option<&str>) -> Result<VerifyReport> {
    verify_with_gradient_tamper(suite, |_| {})
}

/// As [`verify`], with every analytic gradient passed through `tamper` before
/// the finite-difference comparison.
pub fn verify_with_gradient_tamper<F>(suite: Option<&str>, tamper: F) -> Result<VerifyReport>
where
    F: Fn(&mut ParamVector) + Copy,
{
    let selected: Vec<&str> = match suite {
        None | Some("all") => SUITES.to_vec(),
        Some(name) if SUITES.contains(&name) => vec![name],
        Some(other) => {
            return Err(Error::InvalidArgument(format!(
                "unknown suite `{other}`; expected one of {}",
                SUITES.join(", ")
            )))
        }
    };
    let mut report = VerifyReport::default();
    for name in selected {
        match name {
            "gradients" => gradients(&mut report, tamper),
            "kl" => kl(&mut report),
            "reductions" => reductions(&mut report),
            "algebra" => algebra(&mut report),
            "vote" => vote(&mut report),
            "partition" => partition(&mut report),
            "checkpoint" => checkpoint_suite(&mut report),
            _ => unreachable!(),
        }
    }
    Ok(report)
}

fn gradients<F: Fn(&mut ParamVector)>(report: &mut VerifyReport, tamper: F) {
    for act in [Activation::Relu, Activation::Tanh] {
        let spec = MlpSpec::new(vec![3, 6, 5, 4], act).expect("valid spec");
        for sel in LossSelector::ALL {
            let name = format!("{} {:?}", sel.name(), act).to_lowercase();
            let outcome = match finite_diff_check_with(&spec, sel, 17, 20, &tamper) {
                Ok(r) => check(
                    r.max_relative_error < GRAD_TOLERANCE,
                    format!("max rel err {:.2e} over {} points", r.max_relative_error, r.points),
                    format!(
                        "max rel err {:.2e} in {} exceeds {GRAD_TOLERANCE:e}",
                        r.max_relative_error, r.worst_block
                    ),
                ),
                Err(e) => Err(e.to_string()),
            };
            report.push("gradients", name, outcome);
        }
    }
}

/// Random probability vector with a few exact zeros.
pub fn random_simplex<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let u = Uniform::new(0.0, 1.0).expect("finite bounds");
    let mut v: Vec<f64> = (0..len)
        .map(|_| if rng.random_bool(0.1) { 0.0 } else { u.sample(rng) })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        v[0] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// `Σ_{p_j>0} p_j ln p_j − p_j ln q_j`, written independently of the
/// library routine.
fn kl_reference(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..p.len() {
        if p[j] > 0.0 {
            acc += p[j] * p[j].ln() - p[j] * q[j].max(1e-12).ln();
        }
    }
    acc
}

fn kl(report: &mut VerifyReport) {
    let mut rng = stream_rng(2024, Stream::Init, &[0x61]);
    let mut worst: f64 = 0.0;
    let mut nonzero_self = 0;
    for _ in 0..1000 {
        let len = rng.random_range(2..8);
        let p = random_simplex(&mut rng, len);
        let q: Vec<f64> = random_simplex(&mut rng, len)
            .into_iter()
            .map(|x| x * 0.98 + 0.02 / len as f64)
            .collect();
        let got = kl_div(&p, &q).unwrap_or(f64::NAN);
        worst = worst.max((got - kl_reference(&p, &q)).abs());
        if kl_div(&p, &p).map_or(true, |v| v != 0.0) {
            nonzero_self += 1;
        }
    }
    report.push(
        "kl",
        "closed form on 1000 random pairs",
        check(worst <= 1e-10, format!("max abs err {worst:.1e}"), format!("max abs err {worst:.3e} > 1e-10")),
    );
    report.push(
        "kl",
        "self divergence is exactly zero",
        check(nonzero_self == 0, "0 of 1000 nonzero".into(), format!("{nonzero_self} of 1000 nonzero")),
    );
    let v = kl_div(&[0.5, 0.5], &[0.25, 0.75]).unwrap_or(f64::NAN);
    report.push(
        "kl",
        "kl([0.5,0.5] || [0.25,0.75])",
        check((v - 0.143841036225890).abs() < 1e-12, format!("{v:.12}"), format!("{v} != 0.143841")),
    );
}

/// Small, fast configuration for equivalence runs on the toy task.
pub fn small_toy_config(strategy: Strategy, seed: u64) -> ExperimentConfig {
    let mut cfg = toy_config(strategy, seed);
    cfg.dataset = crate::config::DatasetSource::Toy {
        train_size: 240,
        test_size: 200,
    };
    cfg.model.layer_widths = vec![2, 12, 12, 4];
    let f = &mut cfg.federation;
    f.num_clients = 4;
    f.participation = 0.5;
    f.rounds = 4;
    f.local_epochs = 2;
    f.batch_size = 16;
    cfg.partition.num_clients = 4;
    cfg.partition.alpha = 0.5;
    cfg
}

/// Every round record plus the final global model.
pub fn run_records(cfg: &ExperimentConfig) -> Result<(Vec<RoundRecord>, ParamVector)> {
    let (mut sim, _) = build_simulation(cfg)?;
    let mut records = Vec::new();
    sim.run(|r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok((records, sim.global().clone()))
}

fn same_run(a: &ExperimentConfig, b: &ExperimentConfig) -> Outcome {
    let (ra, wa) = run_records(a).map_err(|e| e.to_string())?;
    let (rb, wb) = run_records(b).map_err(|e| e.to_string())?;
    // payload accounting legitimately differs between strategies
    let strip = |r: &[RoundRecord]| -> Vec<_> {
        r.iter()
            .map(|r| (r.round, r.test_accuracy.to_bits(), r.test_loss.to_bits(), r.mean_client_train_loss.to_bits()))
            .collect()
    };
    let bits = |w: &ParamVector| w.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    check(
        strip(&ra) == strip(&rb) && bits(&wa) == bits(&wb),
        format!("{} rounds bit-identical", ra.len()),
        "runs diverge".into(),
    )
}

fn reductions(report: &mut VerifyReport) {
    let seed = 11;
    let avg = small_toy_config(Strategy::FedAvg, seed);

    let mut gkd = small_toy_config(Strategy::FedGkd, seed);
    gkd.federation.distill.gamma = 0.0;
    report.push("reductions", "fedgkd(gamma=0) == fedavg", same_run(&gkd, &avg));

    let mut prox = small_toy_config(Strategy::FedProx, seed);
    prox.federation.prox.mu = 0.0;
    report.push("reductions", "fedprox(mu=0) == fedavg", same_run(&prox, &avg));

    let mut gkd1 = small_toy_config(Strategy::FedGkd, seed);
    gkd1.federation.buffer_size = 1;
    gkd1.partition.val_fraction = 0.1;
    let mut vote1 = small_toy_config(Strategy::FedGkdVote, seed);
    vote1.federation.buffer_size = 1;
    vote1.federation.vote_lambda = gkd1.federation.distill.gamma / 2.0;
    vote1.partition.val_fraction = 0.1;
    report.push("reductions", "vote(M=1) == fedgkd(M=1)", same_run(&vote1, &gkd1));
}

fn algebra(report: &mut VerifyReport) {
    let mut rng = stream_rng(5, Stream::Init, &[0xa1]);
    let u = Uniform::new(-3.0, 3.0).expect("finite bounds");
    let x = ParamVector::from_vec((0..50).map(|_| u.sample(&mut rng)).collect());
    let results: Vec<ClientResult> = (0..7)
        .map(|k| ClientResult {
            client_id: k,
            params: x.clone(),
            n_k: 1 + 13 * k,
            train_loss: 0.0,
            clamped: 0,
            steps: 0,
        })
        .collect();
    let outcome = aggregate(&results)
        .map_err(|e| e.to_string())
        .and_then(|agg| {
            let err = agg.distance(&x).map_err(|e| e.to_string())?;
            check(err <= 1e-12, format!("err {err:.1e}"), format!("err {err:.3e}"))
        });
    report.push("algebra", "aggregate of identical vectors", outcome);

    let pair = [
        ClientResult { client_id: 0, params: ParamVector::from_vec(vec![0.0]), n_k: 1, train_loss: 0.0, clamped: 0, steps: 0 },
        ClientResult { client_id: 1, params: ParamVector::from_vec(vec![4.0]), n_k: 3, train_loss: 0.0, clamped: 0, steps: 0 },
    ];
    let outcome = aggregate(&pair).map_err(|e| e.to_string()).and_then(|w| {
        check((w[0] - 3.0).abs() <= 1e-12, format!("{}", w[0]), format!("{} != 3", w[0]))
    });
    report.push("algebra", "weighted mean n=(1,3)", outcome);

    let mut buf = TeacherBuffer::new(5).expect("capacity");
    for r in 0..5 {
        buf.push(r, x.clone());
    }
    let outcome = ensemble_teacher(&buf).map_err(|e| e.to_string()).and_then(|t| {
        let err = t.distance(&x).map_err(|e| e.to_string())?;
        check(err <= 1e-12, format!("err {err:.1e}"), format!("err {err:.3e}"))
    });
    report.push("algebra", "ensemble of identical buffer", outcome);
}

fn vote(report: &mut VerifyReport) {
    let mut rng = stream_rng(9, Stream::Init, &[0x70]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let m = rng.random_range(1..8);
        let losses: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..10.0)).collect();
        let lambda = rng.random_range(0.01..1.0);
        let beta = rng.random_range(0.05..2.0);
        let g = vote_coefficients(&losses, lambda, beta).unwrap_or_default();
        worst = worst.max((g.iter().sum::<f64>() - 2.0 * lambda).abs());
    }
    report.push(
        "vote",
        "coefficients sum to 2*lambda",
        check(worst <= 1e-12, format!("max err {worst:.1e}"), format!("max err {worst:.3e}")),
    );
    let g = vote_coefficients(&[1.3; 5], 0.1, 0.2).unwrap_or_default();
    report.push(
        "vote",
        "equal losses give equal coefficients",
        check(g.len() == 5 && g.iter().all(|&v| v == g[0]), format!("{:?}", g), format!("{:?}", g)),
    );
}

/// Whether the shards exactly cover the dataset's row indices.
pub fn is_disjoint_cover(ds: &Dataset, shards: &[crate::data::ClientShard]) -> bool {
    let mut all: Vec<usize> = shards
        .iter()
        .flat_map(|s| s.train_indices.iter().chain(&s.val_indices).copied())
        .collect();
    all.sort_unstable();
    all.len() == ds.len() && all.iter().enumerate().all(|(i, &v)| i == v)
        && shards.iter().map(|s| s.n_k() + s.val.as_ref().map_or(0, Dataset::len)).sum::<usize>() == ds.len()
}

/// Mean over `seeds` of the maximum client TV distance at concentration `alpha`.
pub fn mean_heterogeneity(ds: &Dataset, alpha: f64, num_clients: usize, seeds: u64) -> Result<f64> {
    let mut total = 0.0;
    for seed in 0..seeds {
        let spec = PartitionSpec { alpha, num_clients, seed, val_fraction: 0.0 };
        total += max_client_tv(ds, &dirichlet_partition(ds, &spec)?);
    }
    Ok(total / seeds as f64)
}

fn partition(report: &mut VerifyReport) {
    let mut rng = stream_rng(3, Stream::Init, &[0x9a]);
    let mut failures = Vec::new();
    for trial in 0..50 {
        let n = rng.random_range(20..400);
        let k = rng.random_range(1..=20.min(n / 2));
        let alpha = 10f64.powf(rng.random_range(-2.0..2.0));
        let val_fraction = if rng.random_bool(0.5) { 0.1 } else { 0.0 };
        let seed = rng.random();
        let outcome = gen_toy_dataset(n, seed).and_then(|ds| {
            let spec = PartitionSpec { alpha, num_clients: k, seed, val_fraction };
            dirichlet_partition(&ds, &spec).map(|s| is_disjoint_cover(&ds, &s))
        });
        match outcome {
            Ok(true) => {}
            // tiny shards cannot always host a validation split
            Err(Error::InvalidArgument(_)) if val_fraction > 0.0 => {}
            Ok(false) => failures.push(format!("trial {trial}: not a disjoint cover")),
            Err(e) => failures.push(format!("trial {trial}: {e}")),
        }
    }
    report.push(
        "partition",
        "disjoint cover on 50 random combinations",
        check(failures.is_empty(), "50 of 50".into(), failures.join("; ")),
    );

    let outcome = gen_toy_dataset(2000, 77)
        .and_then(|ds| Ok((mean_heterogeneity(&ds, 0.1, 10, 20)?, mean_heterogeneity(&ds, 10.0, 10, 20)?)))
        .map_err(|e| e.to_string())
        .and_then(|(skewed, mild)| {
            check(
                skewed > mild,
                format!("mean max TV {skewed:.3} (alpha=0.1) > {mild:.3} (alpha=10)"),
                format!("mean max TV {skewed:.3} (alpha=0.1) <= {mild:.3} (alpha=10)"),
            )
        });
    report.push("partition", "heterogeneity grows as alpha shrinks", outcome);
}

fn checkpoint_suite(report: &mut VerifyReport) {
    let spec = MlpSpec::new(vec![2, 32, 32, 4], Activation::Relu).expect("valid spec");
    let params = init_params(&spec, 3);
    let outcome = checkpoint::encode(&spec, &params)
        .and_then(|bytes| Ok((checkpoint::decode(&bytes, Activation::Relu)?, bytes)))
        .map_err(|e| e.to_string())
        .and_then(|((spec2, p2), bytes)| {
            let exact = spec2 == spec
                && params.iter().zip(p2.iter()).all(|(a, b)| (*a as f32).to_bits() == (*b as f32).to_bits())
                && checkpoint::encode(&spec2, &p2).ok().as_ref() == Some(&bytes);
            check(exact, format!("{} bytes", bytes.len()), "round trip not bit-exact".into())
        });
    report.push("checkpoint", "f32 round trip", outcome);
}
