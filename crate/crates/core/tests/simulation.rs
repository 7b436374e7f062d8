use fedgkd::config::{toy_config, DatasetSource, ExperimentConfig};
use fedgkd::data::{gen_toy_dataset, ClientShard};
use fedgkd::diagnostics::{full_batch_ce_grad, output_kl};
use fedgkd::federation::{client_rng, client_update, sample_clients, TeacherPayload};
use fedgkd::harness::build_simulation;
use fedgkd::nn::{init_params, Activation};
use fedgkd::verify::{run_records, small_toy_config};
use fedgkd::{Error, FedConfig, MlpSpec, ParamVector, Strategy};

fn shard(n: usize, seed: u64) -> ClientShard {
    let ds = gen_toy_dataset(n, seed).unwrap();
    ClientShard::from_indices(&ds, 0, (0..n).collect())
}

fn plain_sgd(cfg: &mut FedConfig) {
    cfg.sgd.momentum = 0.0;
    cfg.sgd.weight_decay = 0.0;
}

#[test]
fn sampling_is_uniform_over_many_rounds() {
    let cfg = FedConfig { num_clients: 10, participation: 0.3, ..Default::default() };
    let rounds = 2000;
    let mut counts = [0usize; 10];
    for t in 1..=rounds {
        let ids = sample_clients(t, &cfg);
        assert_eq!(ids.len(), 3);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        for k in ids {
            counts[k] += 1;
        }
    }
    let p = 0.3;
    let mean = rounds as f64 * p;
    let sd = (rounds as f64 * p * (1.0 - p)).sqrt();
    for (k, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "client {k} sampled {c} times");
    }
}

#[test]
fn teacher_buffer_occupancy_tracks_rounds() {
    let mut cfg = small_toy_config(Strategy::FedGkd, 1);
    cfg.federation.buffer_size = 3;
    let (mut sim, _) = build_simulation(&cfg).unwrap();
    assert_eq!(sim.buffer().len(), 1);
    for t in 1..=4 {
        sim.run_round().unwrap();
        assert_eq!(sim.buffer().len(), 3.min(t + 1));
        assert_eq!(sim.buffer().latest().unwrap(), sim.global());
        assert_eq!(*sim.buffer().round_tags().last().unwrap(), t);
    }
    assert_eq!(sim.buffer().round_tags(), vec![2, 3, 4]);
}

#[test]
fn single_full_batch_epoch_is_one_gradient_step() {
    let spec = MlpSpec::new(vec![2, 8, 4], Activation::Tanh).unwrap();
    let data = shard(50, 3);
    let w = init_params(&spec, 4);
    let mut cfg = FedConfig { strategy: Strategy::FedAvg, local_epochs: 1, batch_size: 64, ..Default::default() };
    plain_sgd(&mut cfg);
    let res = client_update(&data, &w, &TeacherPayload::None, &spec, &cfg, 1, &mut client_rng(0, 1, 0)).unwrap();
    let mut expected = w.clone();
    expected.add_scaled(&full_batch_ce_grad(&spec, &w, &data.train).unwrap(), -cfg.sgd.learning_rate).unwrap();
    assert!(res.params.distance(&expected).unwrap() < 1e-12);
    assert_eq!(res.steps, 1);
    assert_eq!(res.n_k, 50);
}

#[test]
fn strong_proximal_term_pins_clients_to_the_global_model() {
    let spec = MlpSpec::new(vec![2, 8, 4], Activation::Relu).unwrap();
    let data = shard(200, 5);
    let w = init_params(&spec, 6);
    let moved = |strategy: Strategy, mu: f64| {
        let mut cfg = FedConfig { strategy, local_epochs: 5, batch_size: 20, ..Default::default() };
        cfg.prox.mu = mu;
        cfg.sgd.learning_rate = 0.01;
        let res = client_update(&data, &w, &TeacherPayload::None, &spec, &cfg, 1, &mut client_rng(0, 1, 0)).unwrap();
        res.params.distance(&w).unwrap()
    };
    let free = moved(Strategy::FedAvg, 0.0);
    let pinned = moved(Strategy::FedProx, 50.0);
    assert!(pinned < 0.1 * free, "free {free}, pinned {pinned}");
}

#[test]
fn heavy_distillation_reduces_output_drift() {
    let spec = MlpSpec::new(vec![2, 16, 4], Activation::Relu).unwrap();
    // a single-class shard is the extreme of label skew
    let full = gen_toy_dataset(800, 7).unwrap();
    let rows: Vec<usize> = (0..full.len()).filter(|&i| full.ys[i] == 2).collect();
    let data = ClientShard::from_indices(&full, 0, rows);
    // a partly trained global model, so the teacher has something to say
    let mut warm = FedConfig { strategy: Strategy::FedAvg, local_epochs: 20, batch_size: 32, ..Default::default() };
    warm.sgd.learning_rate = 0.05;
    let all = ClientShard::from_indices(&full, 0, (0..full.len()).collect());
    let w0 = init_params(&spec, 8);
    let w = client_update(&all, &w0, &TeacherPayload::None, &spec, &warm, 1, &mut client_rng(0, 1, 0)).unwrap().params;

    let drift = |gamma: f64| {
        let mut cfg = FedConfig { strategy: Strategy::FedGkd, local_epochs: 5, batch_size: 32, ..Default::default() };
        cfg.distill.gamma = gamma;
        let teacher = TeacherPayload::Ensemble(w.clone());
        let res = client_update(&data, &w, &teacher, &spec, &cfg, 2, &mut client_rng(0, 2, 0)).unwrap();
        output_kl(&spec, &w, &res.params, &data.train).unwrap()
    };
    let (none, heavy) = (drift(0.0), drift(10.0));
    assert!(heavy < none, "gamma=10 drift {heavy} vs gamma=0 drift {none}");
}

#[test]
fn diagnostics_do_not_change_training() {
    let base = small_toy_config(Strategy::FedGkdVote, 2);
    let mut with_diag = base.clone();
    with_diag.diagnostics = Some(Default::default());
    let mut base = base;
    base.partition.val_fraction = with_diag.partition.val_fraction;
    let (plain, w_plain) = run_records(&base).unwrap();
    let (probed, w_probed) = run_records(&with_diag).unwrap();
    assert_eq!(w_plain, w_probed);
    for (a, b) in plain.iter().zip(&probed) {
        assert!(a.diag.is_none());
        let d = b.diag.as_ref().unwrap();
        assert_eq!(d.clients.len(), b.sampled_clients.len());
        assert!(d.mean_output_kl >= 0.0 && d.global_grad_norm >= 0.0);
        assert_eq!(a.test_accuracy.to_bits(), b.test_accuracy.to_bits());
    }
}

#[test]
fn failed_round_leaves_state_untouched() {
    let cfg = small_toy_config(Strategy::FedGkd, 3);
    let (mut sim, _) = build_simulation(&cfg).unwrap();
    sim.run_round().unwrap();
    let poisoned = ParamVector::from_vec(vec![f64::NAN; sim.global().len()]);
    sim.set_global(poisoned).unwrap();
    let before = (sim.round(), sim.buffer().round_tags());
    let err = sim.run_round().unwrap_err();
    assert!(matches!(err, Error::ClientAbort { round: 2, .. } | Error::NonFinite(_)), "{err}");
    assert_eq!((sim.round(), sim.buffer().round_tags()), before);
}

#[test]
fn tiny_shards_still_run_under_vote() {
    // alpha = 0.01 over 10 clients leaves some shards with one or two rows
    let mut cfg: ExperimentConfig = toy_config(Strategy::FedGkdVote, 4);
    cfg.dataset = DatasetSource::Toy { train_size: 60, test_size: 40 };
    cfg.federation.num_clients = 10;
    cfg.partition.num_clients = 10;
    cfg.partition.alpha = 0.01;
    cfg.federation.participation = 1.0;
    cfg.federation.rounds = 2;
    cfg.federation.local_epochs = 1;
    let (records, w) = run_records(&cfg).unwrap();
    assert_eq!(records.len(), 2);
    assert!(w.is_finite());
}

#[test]
fn heavy_distillation_reduces_drift_across_seeds() {
    let mean_drift = |gamma: f64| -> f64 {
        (0..3)
            .map(|seed| {
                let mut cfg = small_toy_config(Strategy::FedGkd, seed);
                cfg.federation.distill.gamma = gamma;
                cfg.diagnostics = Some(Default::default());
                let (records, _) = run_records(&cfg).unwrap();
                records.iter().map(|r| r.diag.as_ref().unwrap().mean_output_kl).sum::<f64>() / records.len() as f64
            })
            .sum::<f64>()
            / 3.0
    };
    let (none, heavy) = (mean_drift(0.0), mean_drift(10.0));
    assert!(heavy < none, "gamma=10 drift {heavy} vs gamma=0 drift {none}");
}
