//! End-to-end experiment driver.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{client_update, personalize_all, server_aggregate, ClientState, ClientTrace, LocalTraining, ServerState};
use crate::config::ExperimentConfig;
use crate::data::{apply_proportions, dirichlet_partition, Dataset, Partition, PartitionConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport, Setting};
use crate::geometry::{divergence, project, AggregationMethod, DiagGaussian, Divergence, Lambda};
use crate::models::MlpSpec;
use crate::seeds::{derive_seed, stream};
use crate::variopt::{IvonState, Prior};

pub const FEDAVG_LABEL: &str = "FedAVG";

const STREAM_PARTITION: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_TEST_SPLIT: u64 = 5;

/// One evaluation. `client` is `None` for the global test set evaluated
/// with the global model; `lambda` is `None` for global-model rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub setting: Setting,
    pub lambda: Option<Lambda>,
    pub client: Option<usize>,
    pub metrics: MetricsReport,
}

/// Client-averaged metrics of the personalized models at one λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: Lambda,
    pub local_acc: f64,
    pub local_ece: f64,
    pub local_nll: f64,
    pub global_acc: f64,
    pub global_ece: f64,
    pub global_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub traces: Vec<ClientTrace>,
    /// `D(p_k‖p_g)` for every client against the new global posterior.
    pub divergence_to_global: Vec<f64>,
    /// Filled only when per-round personalization is enabled.
    pub sweep: Vec<SweepPoint>,
    #[serde(skip)]
    pub aggregation_time: Duration,
}

/// Divergences along one client's personalization path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientGeodesic {
    pub client: usize,
    /// `D(p_{g,k}(λ)‖p_k)` over the λ grid.
    pub to_local: Vec<f64>,
    /// `D(p_{g,k}(λ)‖p_g)` over the λ grid.
    pub to_global: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub method: String,
    pub divergence: Divergence,
    pub lambdas: Vec<Lambda>,
    pub shard_sizes: Vec<usize>,
    pub test_shard_sizes: Vec<usize>,
    pub rounds: Vec<RoundReport>,
    pub rows: Vec<MetricRow>,
    pub geodesics: Vec<ClientGeodesic>,
    #[serde(skip)]
    pub global: Option<DiagGaussian>,
    #[serde(skip)]
    pub locals: Vec<DiagGaussian>,
}

impl ExperimentReport {
    pub fn rows_for(&self, setting: Setting, lambda: Option<Lambda>) -> impl Iterator<Item = &MetricRow> {
        self.rows
            .iter()
            .filter(move |r| r.setting == setting && r.lambda == lambda)
    }

    /// Mean of `metric` over the rows of one setting and λ.
    pub fn mean_metric(&self, setting: Setting, lambda: Option<Lambda>, metric: fn(&MetricsReport) -> f64) -> f64 {
        let v: Vec<f64> = self.rows_for(setting, lambda).map(|r| metric(&r.metrics)).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn mean_accuracy(&self, setting: Setting, lambda: Option<Lambda>) -> f64 {
        self.mean_metric(setting, lambda, |m| m.accuracy)
    }

    pub fn sweep(&self) -> Vec<SweepPoint> {
        sweep_points(&self.rows, &self.lambdas)
    }
}

fn sweep_points(rows: &[MetricRow], lambdas: &[Lambda]) -> Vec<SweepPoint> {
    let mean = |setting: Setting, lambda: Lambda, f: fn(&MetricsReport) -> f64| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.setting == setting && r.lambda == Some(lambda))
            .map(|r| f(&r.metrics))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    lambdas
        .iter()
        .map(|&l| SweepPoint {
            lambda: l,
            local_acc: mean(Setting::PersonalizedLocal, l, |m| m.accuracy),
            local_ece: mean(Setting::PersonalizedLocal, l, |m| m.ece),
            local_nll: mean(Setting::PersonalizedLocal, l, |m| m.nll),
            global_acc: mean(Setting::PersonalizedGlobal, l, |m| m.accuracy),
            global_ece: mean(Setting::PersonalizedGlobal, l, |m| m.ece),
            global_nll: mean(Setting::PersonalizedGlobal, l, |m| m.nll),
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum Mode {
    Variational,
    Deterministic { var: f64 },
}

/// Variational federated training followed by the personalization sweep.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentReport> {
    run(cfg, seed, Mode::Variational)
}

/// Deterministic clients (frozen variance, no Hessian updates), mean
/// averaging on the server. Personalized rows hold the clients' own models.
pub fn fedavg_baseline(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentReport> {
    run(cfg, seed, Mode::Deterministic { var: cfg.baseline.frozen_var })
}

/// The client split a run with `seed` uses.
pub fn partition_clients(cfg: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<Partition> {
    let pcfg = PartitionConfig {
        n_clients: cfg.partition.clients,
        beta: cfg.partition.beta,
        seed: derive_seed(seed, &[STREAM_PARTITION]),
        min_shard: cfg.partition.min_shard,
    };
    dirichlet_partition(train, &pcfg)
}

struct Setup {
    spec: MlpSpec,
    clients: Vec<ClientState>,
    /// False for clients whose local test split came out empty.
    has_local_test: Vec<bool>,
    global_test: Dataset,
    prior: Prior,
}

fn setup(cfg: &ExperimentConfig, seed: u64, mode: Mode) -> Result<Setup> {
    let (train, test) = cfg.load_datasets()?;
    if train.dim() != test.dim() {
        return Err(Error::config("dataset", "training and test inputs differ in width"));
    }
    let partition = partition_clients(cfg, &train, seed)?;
    let shards = partition.shards(&train)?;
    let test_idx = if cfg.partition.split_test {
        apply_proportions(&test, &partition, derive_seed(seed, &[STREAM_TEST_SPLIT]))?
    } else {
        vec![(0..test.len()).collect(); shards.len()]
    };

    let spec = cfg.model_spec(train.dim(), train.classes())?;
    let init = spec.init_params(derive_seed(seed, &[STREAM_INIT]));
    let mut clients = Vec::with_capacity(shards.len());
    let mut has_local_test = Vec::with_capacity(shards.len());
    for (k, (shard, idx)) in shards.into_iter().zip(&test_idx).enumerate() {
        has_local_test.push(!idx.is_empty());
        // Placeholder for an empty split; its local-data rows are skipped.
        let local_test = if idx.is_empty() {
            log::warn!("client {k} has an empty local test set; its local-data rows are skipped");
            test.clone()
        } else {
            test.subset(idx, format!("{}/client-{k}", test.name()))?
        };
        let mut opt = IvonState::new(init.clone(), cfg.hyper(shard.len()))?;
        if let Mode::Deterministic { var } = mode {
            opt = opt.freeze(var)?;
        }
        clients.push(ClientState::new(k, shard, local_test, opt)?);
    }
    let mean_shard = (train.len() as f64 / clients.len() as f64).round().max(1.0) as usize;
    let prior = Prior::from_decay(spec.param_count(), mean_shard, cfg.optimizer.weight_decay)?;
    Ok(Setup {
        spec,
        clients,
        has_local_test,
        global_test: test,
        prior,
    })
}

fn run(cfg: &ExperimentConfig, seed: u64, mode: Mode) -> Result<ExperimentReport> {
    let Setup {
        spec,
        mut clients,
        has_local_test,
        global_test,
        prior,
    } = setup(cfg, seed, mode)?;

    let (method, method_label, lambdas) = match mode {
        Mode::Variational => (
            cfg.federation.method,
            cfg.federation.method.name().to_string(),
            cfg.personalization.lambdas.clone(),
        ),
        Mode::Deterministic { .. } => (AggregationMethod::Eaa, FEDAVG_LABEL.to_string(), vec![Lambda::Infinity]),
    };
    let d = cfg.personalization.divergence;
    let sizes: Vec<usize> = clients.iter().map(ClientState::ess).collect();
    let mut server = ServerState::new(method, &sizes)?;
    let eval_seed = derive_seed(seed, &[STREAM_EVAL]);
    let parallel = cfg.federation.parallel;
    let rounds = cfg.federation.rounds;
    let epochs = cfg.federation.local_epochs;

    let mut reports = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let training = LocalTraining {
            epochs,
            batch_size: cfg.federation.batch_size,
            mc_samples: cfg.optimizer.mc_train,
            schedule: cfg.schedule(),
            epochs_done: r * epochs,
            epochs_total: rounds * epochs,
        };
        let global = server.global_posterior.clone();
        let update = |c: &mut ClientState| {
            let mut rng = stream(seed, &[STREAM_TRAIN, r as u64, c.id as u64]);
            client_update(c, global.as_ref(), &spec, &prior, &training, &mut rng).map_err(|e| e.in_client(r, c.id))
        };
        let traces: Vec<ClientTrace> = if parallel {
            clients.par_iter_mut().map(update).collect::<Result<_>>()?
        } else {
            clients.iter_mut().map(update).collect::<Result<_>>()?
        };
        let locals: Vec<DiagGaussian> = clients.iter().map(|c| c.local_posterior.clone()).collect();
        let t0 = Instant::now();
        server_aggregate(&mut server, &locals)?;
        let aggregation_time = t0.elapsed();
        let g = server.global()?;
        let divergence_to_global = locals.iter().map(|p| divergence(d, p, g)).collect::<Result<_>>()?;
        let sweep = if cfg.personalization.per_round && r + 1 < rounds {
            let rows = personalized_rows(cfg, &spec, &server, &clients, &has_local_test, &global_test, &lambdas, eval_seed)?;
            sweep_points(&rows, &lambdas)
        } else {
            Vec::new()
        };
        log::info!("round {}/{rounds} aggregated with {}", r + 1, method.name());
        reports.push(RoundReport {
            round: r + 1,
            traces,
            divergence_to_global,
            sweep,
            aggregation_time,
        });
    }

    let global = server.global()?.clone();
    let locals: Vec<DiagGaussian> = clients.iter().map(|c| c.local_posterior.clone()).collect();
    let mc = cfg.eval.mc_samples;
    let bins = cfg.eval.ece_bins;
    let mut rows = vec![MetricRow {
        setting: Setting::GlobalGlobal,
        lambda: None,
        client: None,
        metrics: evaluate(&spec, &global, &global_test, mc, bins, eval_seed)?,
    }];
    for c in clients.iter().filter(|c| has_local_test[c.id]) {
        rows.push(MetricRow {
            setting: Setting::GlobalLocal,
            lambda: None,
            client: Some(c.id),
            metrics: evaluate(&spec, &global, &c.test, mc, bins, eval_seed)?,
        });
    }
    rows.extend(personalized_rows(
        cfg,
        &spec,
        &server,
        &clients,
        &has_local_test,
        &global_test,
        &lambdas,
        eval_seed,
    )?);

    let geodesics = clients
        .iter()
        .map(|c| {
            let mut to_local = Vec::with_capacity(lambdas.len());
            let mut to_global = Vec::with_capacity(lambdas.len());
            for &l in &lambdas {
                let p = project(d, &global, &c.local_posterior, l)?;
                to_local.push(divergence(d, &p, &c.local_posterior)?);
                to_global.push(divergence(d, &p, &global)?);
            }
            Ok(ClientGeodesic {
                client: c.id,
                to_local,
                to_global,
            })
        })
        .collect::<Result<_>>()?;

    Ok(ExperimentReport {
        seed,
        method: method_label,
        divergence: d,
        lambdas,
        shard_sizes: sizes,
        test_shard_sizes: clients.iter().map(|c| if has_local_test[c.id] { c.test.len() } else { 0 }).collect(),
        rounds: reports,
        rows,
        geodesics,
        global: Some(global),
        locals,
    })
}

/// PM-LD and PM-GD rows for every client at every λ, in (λ, client) order.
#[allow(clippy::too_many_arguments)]
fn personalized_rows(
    cfg: &ExperimentConfig,
    spec: &MlpSpec,
    server: &ServerState,
    clients: &[ClientState],
    has_local_test: &[bool],
    global_test: &Dataset,
    lambdas: &[Lambda],
    eval_seed: u64,
) -> Result<Vec<MetricRow>> {
    let locals: Vec<DiagGaussian> = clients.iter().map(|c| c.local_posterior.clone()).collect();
    let (mc, bins) = (cfg.eval.mc_samples, cfg.eval.ece_bins);
    let mut rows = Vec::new();
    for &l in lambdas {
        let personalized = personalize_all(server, &locals, cfg.personalization.divergence, l)?;
        let eval_client = |k: usize| -> Result<Vec<MetricRow>> {
            let mut out = Vec::with_capacity(2);
            if has_local_test[k] {
                out.push(MetricRow {
                    setting: Setting::PersonalizedLocal,
                    lambda: Some(l),
                    client: Some(k),
                    metrics: evaluate(spec, &personalized[k], &clients[k].test, mc, bins, eval_seed)?,
                });
            }
            out.push(MetricRow {
                setting: Setting::PersonalizedGlobal,
                lambda: Some(l),
                client: Some(k),
                metrics: evaluate(spec, &personalized[k], global_test, mc, bins, eval_seed)?,
            });
            Ok(out)
        };
        let per_client: Vec<Vec<MetricRow>> = if cfg.federation.parallel {
            (0..clients.len()).into_par_iter().map(eval_client).collect::<Result<_>>()?
        } else {
            (0..clients.len()).map(eval_client).collect::<Result<_>>()?
        };
        rows.extend(per_client.into_iter().flatten());
    }
    Ok(rows)
}
