use fedproj::config::ExperimentConfig;
use fedproj::data::synth_blobs;
use fedproj::eval::{evaluate, Setting};
use fedproj::federation::{
    client_update, fedavg_baseline, personalize_all, run_experiment, server_aggregate, ClientState, LocalTraining,
    ServerState,
};
use fedproj::geometry::validate::default_lambda_grid;
use fedproj::geometry::{AggregationMethod, DiagGaussian, Divergence, Lambda};
use fedproj::models::{model_calls, predict_proba_mc, MlpSpec};
use fedproj::variopt::{IvonHyper, IvonState, LrSchedule, Prior};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(clients: usize) -> ExperimentConfig {
    let text = format!(
        r#"
[dataset]
kind = "synth"
classes = 3
dim = 2
train_per_class = 40
test_per_class = 40
spread = 0.5
seed = 3
h0 = 1.0

[partition]
clients = {clients}
beta = 1.0
min_shard = 5

[model]
hidden = [8]

[federation]
rounds = 2
local_epochs = 3
batch_size = 16

[personalization]
lambdas = [0, 1, inf]

[eval]
mc_samples = 4
"#
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

#[test]
fn runs_are_reproducible_and_thread_independent() {
    let cfg = tiny(3);
    let a = run_experiment(&cfg, 5).unwrap();
    let b = run_experiment(&cfg, 5).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.global, b.global);

    let mut par = cfg.clone();
    par.federation.parallel = true;
    let c = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| run_experiment(&par, 5).unwrap());
    assert_eq!(a.rows, c.rows);
    assert_eq!(a.locals, c.locals);

    let d = run_experiment(&cfg, 6).unwrap();
    assert_ne!(a.rows, d.rows);
}

#[test]
fn a_single_client_is_its_own_global_model() {
    let cfg = tiny(1);
    let rep = run_experiment(&cfg, 0).unwrap();
    let global = rep.global.as_ref().unwrap();
    let local = &rep.locals[0];
    assert_eq!(global.mean(), local.mean());
    for (g, l) in global.var().iter().zip(local.var()) {
        assert!((g - l).abs() <= 1e-12 * l);
    }
    let gm = rep.rows_for(Setting::GlobalLocal, None).next().unwrap();
    let pm = rep.rows_for(Setting::PersonalizedLocal, Some(Lambda::Infinity)).next().unwrap();
    assert_eq!(gm.metrics.n_examples, pm.metrics.n_examples);
    assert!((gm.metrics.accuracy - pm.metrics.accuracy).abs() < 1e-9);
}

#[test]
fn fedavg_baseline_reports_near_point_masses() {
    let cfg = tiny(2);
    let rep = fedavg_baseline(&cfg, 1).unwrap();
    assert_eq!(rep.method, "FedAVG");
    let global = rep.global.as_ref().unwrap();
    assert!(global.var().iter().all(|&v| v == cfg.baseline.frozen_var));
    assert!(rep.rows_for(Setting::GlobalGlobal, None).count() == 1);
}

fn client(id: usize, data_seed: u64, spec: &MlpSpec) -> ClientState {
    let ds = synth_blobs(10, 3, 2, 0.4, data_seed).unwrap();
    let hyper = IvonHyper {
        ess: ds.len(),
        h0: 1.0,
        weight_decay: 1e-2,
        ..IvonHyper::default()
    };
    let opt = IvonState::new(spec.init_params(0), hyper).unwrap().freeze(1e-8).unwrap();
    ClientState::new(id, ds.clone(), ds, opt).unwrap()
}

#[test]
fn identical_deterministic_clients_average_to_themselves() {
    let spec = MlpSpec::new(vec![2, 6, 3]).unwrap();
    let mut clients = [client(0, 4, &spec), client(1, 4, &spec)];
    let prior = Prior::from_decay(spec.param_count(), 30, 1e-2).unwrap();
    let training = LocalTraining {
        epochs: 5,
        batch_size: 64,
        mc_samples: 1,
        schedule: LrSchedule::default(),
        epochs_done: 0,
        epochs_total: 5,
    };
    let mut server = ServerState::new(AggregationMethod::Eaa, &[30, 30]).unwrap();
    for round in 0..3u64 {
        let global = server.global_posterior.clone();
        for c in clients.iter_mut() {
            let mut rng = ChaCha8Rng::seed_from_u64(round * 10 + c.id as u64);
            client_update(c, global.as_ref(), &spec, &prior, &training, &mut rng).unwrap();
        }
        assert_eq!(clients[0].local_posterior, clients[1].local_posterior);
        let locals: Vec<DiagGaussian> = clients.iter().map(|c| c.local_posterior.clone()).collect();
        server_aggregate(&mut server, &locals).unwrap();
        let g = server.global().unwrap();
        for (a, b) in g.mean().iter().zip(locals[0].mean()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}

#[test]
fn personalizing_a_trained_run_needs_no_model_calls() {
    let rep = run_experiment(&tiny(3), 2).unwrap();
    let mut server = ServerState::new(AggregationMethod::W2b, &rep.shard_sizes).unwrap();
    server.global_posterior = rep.global.clone();
    let before = model_calls();
    for lambda in default_lambda_grid() {
        for d in [Divergence::W2Sq, Divergence::Rkl] {
            let out = personalize_all(&server, &rep.locals, d, lambda).unwrap();
            assert_eq!(out.len(), rep.locals.len());
        }
    }
    assert_eq!(model_calls(), before);
}

#[test]
fn well_separated_points_are_fit_exactly() {
    let spec = MlpSpec::new(vec![2, 8, 3]).unwrap();
    let ds = synth_blobs(20, 3, 2, 0.0, 3).unwrap();
    let hyper = IvonHyper {
        ess: ds.len(),
        h0: 1.0,
        weight_decay: 1e-3,
        ..IvonHyper::default()
    };
    let opt = IvonState::new(spec.init_params(1), hyper).unwrap();
    let mut c = ClientState::new(0, ds.clone(), ds.clone(), opt).unwrap();
    let prior = Prior::from_decay(spec.param_count(), ds.len(), 1e-3).unwrap();
    let training = LocalTraining {
        epochs: 300,
        batch_size: 20,
        mc_samples: 1,
        schedule: LrSchedule::default(),
        epochs_done: 0,
        epochs_total: 300,
    };
    client_update(&mut c, None, &spec, &prior, &training, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let point = DiagGaussian::isotropic(c.local_posterior.mean().to_vec(), 1e-300).unwrap();
    let m = evaluate(&spec, &point, &ds, 1, 15, 0).unwrap();
    assert_eq!(m.accuracy, 100.0);
}

#[test]
fn evaluation_is_seeded_and_converges_for_tight_posteriors() {
    let spec = MlpSpec::new(vec![2, 5, 3]).unwrap();
    let ds = synth_blobs(30, 3, 2, 0.6, 8).unwrap();
    let post = DiagGaussian::isotropic(spec.init_params(2), 0.05).unwrap();
    assert_eq!(evaluate(&spec, &post, &ds, 10, 15, 3).unwrap(), evaluate(&spec, &post, &ds, 10, 15, 3).unwrap());

    let tight = DiagGaussian::isotropic(spec.init_params(2), 1e-14).unwrap();
    let one = predict_proba_mc(&spec, &tight, ds.inputs().view(), 1, 0).unwrap();
    let many = predict_proba_mc(&spec, &tight, ds.inputs().view(), 1000, 0).unwrap();
    let worst = (&one - &many).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst < 1e-5, "{worst}");
}
