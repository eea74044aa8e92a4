//! Round-based federated training with posterior exchange.
//!
//! Clients train locally and send back a [`DiagGaussian`]. The server only
//! ever sees posteriors and aggregation weights; it has no handle on any
//! client's data. Personalization happens after training and needs no data
//! either: it is a projection between the global and a local posterior.

mod run;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{aggregate, project, AggregationMethod, DiagGaussian, Divergence, Lambda};
use crate::models::{loss_and_grad, Batch, MlpSpec};
use crate::variopt::{ivon_step_mc, negative_elbo, posterior_of, sample_params, IvonState, LrSchedule, Prior};

pub use run::{
    fedavg_baseline, partition_clients, run_experiment, ClientGeodesic, ExperimentReport, MetricRow, RoundReport, SweepPoint,
    FEDAVG_LABEL,
};

pub struct ClientState {
    pub id: usize,
    pub train: Dataset,
    pub test: Dataset,
    pub optimizer: IvonState,
    pub local_posterior: DiagGaussian,
}

impl ClientState {
    /// A client whose optimizer starts at `optimizer` (its `ess` must equal
    /// the training shard size).
    pub fn new(id: usize, train: Dataset, test: Dataset, optimizer: IvonState) -> Result<Self> {
        if optimizer.hyper.ess != train.len() {
            return Err(Error::InvalidArgument(format!(
                "client {id}: ess {} differs from shard size {}",
                optimizer.hyper.ess,
                train.len()
            )));
        }
        let local_posterior = posterior_of(&optimizer)?;
        Ok(ClientState {
            id,
            train,
            test,
            optimizer,
            local_posterior,
        })
    }

    pub fn ess(&self) -> usize {
        self.train.len()
    }
}

/// How a client trains in one round.
#[derive(Debug, Clone)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub mc_samples: usize,
    pub schedule: LrSchedule,
    /// Epochs already run in earlier rounds.
    pub epochs_done: usize,
    /// Epochs over the whole run; sets the learning-rate decay.
    pub epochs_total: usize,
}

/// Per-epoch training curves of one client in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientTrace {
    pub client: usize,
    pub epoch_nll: Vec<f64>,
    pub epoch_neg_elbo: Vec<f64>,
}

/// Install `global` (if any), train for the configured epochs and refresh
/// the local posterior.
pub fn client_update<R: Rng>(
    client: &mut ClientState,
    global: Option<&DiagGaussian>,
    spec: &MlpSpec,
    prior: &Prior,
    training: &LocalTraining,
    rng: &mut R,
) -> Result<ClientTrace> {
    if let Some(g) = global {
        client.optimizer.install(g)?;
    }
    let n = client.train.len();
    let bs = training.batch_size.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = ClientTrace {
        client: client.id,
        epoch_nll: Vec::with_capacity(training.epochs),
        epoch_neg_elbo: Vec::with_capacity(training.epochs),
    };
    for e in 0..training.epochs {
        client.optimizer.hyper.lr = training
            .schedule
            .at_step(training.epochs_done + e, training.epochs_total);
        if bs < n {
            order.shuffle(rng);
        }
        let mut total_nll = 0.0;
        for chunk in order.chunks(bs) {
            let inputs = client.train.inputs().select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| client.train.labels()[i]).collect();
            let batch = Batch::new(inputs.view(), &labels)?;
            let mut draws = Vec::with_capacity(training.mc_samples);
            let mut batch_nll = 0.0;
            for _ in 0..training.mc_samples {
                let theta = sample_params(&client.optimizer, rng)?;
                let (nll, grad) = loss_and_grad(spec, &theta, &batch)?;
                batch_nll += nll;
                draws.push((grad, theta));
            }
            let pairs: Vec<(&[f64], &[f64])> = draws.iter().map(|(g, t)| (g.as_slice(), t.as_slice())).collect();
            ivon_step_mc(&mut client.optimizer, &pairs)?;
            total_nll += batch_nll / training.mc_samples as f64 * chunk.len() as f64;
        }
        let epoch_nll = total_nll / n as f64;
        trace.epoch_nll.push(epoch_nll);
        trace
            .epoch_neg_elbo
            .push(negative_elbo(&client.optimizer, prior, n as f64 * epoch_nll, training.mc_samples)?);
    }
    client.local_posterior = posterior_of(&client.optimizer)?;
    Ok(trace)
}

/// Server-side state. Holds posteriors and weights only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub global_posterior: Option<DiagGaussian>,
    pub round: usize,
    pub method: AggregationMethod,
    pub client_weights: Vec<f64>,
}

impl ServerState {
    /// Weights proportional to shard sizes.
    pub fn new(method: AggregationMethod, shard_sizes: &[usize]) -> Result<Self> {
        let total: usize = shard_sizes.iter().sum();
        if shard_sizes.is_empty() || total == 0 {
            return Err(Error::Empty("client shards"));
        }
        Ok(ServerState {
            global_posterior: None,
            round: 0,
            method,
            client_weights: shard_sizes.iter().map(|&n| n as f64 / total as f64).collect(),
        })
    }

    pub fn global(&self) -> Result<&DiagGaussian> {
        self.global_posterior
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("no global posterior before the first aggregation".into()))
    }
}

pub fn server_aggregate(server: &mut ServerState, posteriors: &[DiagGaussian]) -> Result<()> {
    server.global_posterior = Some(aggregate(server.method, posteriors, &server.client_weights)?);
    server.round += 1;
    Ok(())
}

/// Project the global posterior into every client's local sphere. Pure
/// posterior arithmetic: no data and no model evaluations are involved.
pub fn personalize_all(
    server: &ServerState,
    locals: &[DiagGaussian],
    d: Divergence,
    lambda: Lambda,
) -> Result<Vec<DiagGaussian>> {
    let global = server.global()?;
    locals.iter().map(|p| project(d, global, p, lambda)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::models::model_calls;
    use crate::variopt::IvonHyper;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(m: f64, v: f64) -> DiagGaussian {
        DiagGaussian::scalar(m, v).unwrap()
    }

    #[test]
    fn aggregation_examples() {
        let mut s = ServerState::new(AggregationMethod::Eaa, &[50, 50]).unwrap();
        server_aggregate(&mut s, &[g(0.0, 1.0), g(0.0, 9.0)]).unwrap();
        assert_eq!(s.global().unwrap().var(), &[5.0]);
        assert_eq!(s.round, 1);

        let mut s = ServerState::new(AggregationMethod::Eaa, &[100, 300]).unwrap();
        server_aggregate(&mut s, &[g(0.0, 1.0), g(4.0, 1.0)]).unwrap();
        assert_eq!(s.global().unwrap().mean(), &[3.0]);
        assert!((s.client_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        for m in AggregationMethod::ALL {
            let mut s = ServerState::new(m, &[3, 7, 11]).unwrap();
            let p = g(1.25, 0.5);
            server_aggregate(&mut s, &[p.clone(), p.clone(), p.clone()]).unwrap();
            let out = s.global().unwrap();
            assert!((out.mean()[0] - 1.25).abs() < 1e-15 && (out.var()[0] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn personalization_endpoints_without_model_calls() {
        let mut s = ServerState::new(AggregationMethod::W2b, &[1, 1]).unwrap();
        let locals = [g(0.0, 1.0), g(4.0, 9.0)];
        server_aggregate(&mut s, &locals).unwrap();
        let before = model_calls();
        let at0 = personalize_all(&s, &locals, Divergence::W2Sq, Lambda::Finite(0.0)).unwrap();
        let inf = personalize_all(&s, &locals, Divergence::W2Sq, Lambda::Infinity).unwrap();
        assert_eq!(model_calls(), before);
        assert!(at0.iter().all(|p| p == s.global().unwrap()));
        assert_eq!(inf, locals);
    }

    fn client(epochs_seed: u64) -> (ClientState, MlpSpec) {
        let ds = synth_blobs(15, 3, 2, 0.4, 1).unwrap();
        let spec = MlpSpec::new(vec![2, 8, 3]).unwrap();
        let hyper = IvonHyper {
            ess: ds.len(),
            h0: 1.0,
            weight_decay: 1e-2,
            ..IvonHyper::default()
        };
        let opt = IvonState::new(spec.init_params(epochs_seed), hyper).unwrap();
        (ClientState::new(0, ds.clone(), ds, opt).unwrap(), spec)
    }

    fn training(epochs: usize) -> LocalTraining {
        LocalTraining {
            epochs,
            batch_size: 16,
            mc_samples: 1,
            schedule: LrSchedule::default(),
            epochs_done: 0,
            epochs_total: epochs.max(1),
        }
    }

    #[test]
    fn zero_epochs_round_trips_the_global() {
        let (mut c, spec) = client(0);
        let prior = Prior::from_decay(spec.param_count(), c.ess(), 1e-2).unwrap();
        let global = DiagGaussian::isotropic(vec![0.1; spec.param_count()], 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        client_update(&mut c, Some(&global), &spec, &prior, &training(0), &mut rng).unwrap();
        assert_eq!(c.local_posterior.mean(), global.mean());
        for (a, b) in c.local_posterior.var().iter().zip(global.var()) {
            assert!((a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn training_is_seeded_and_lowers_the_loss() {
        let (mut a, spec) = client(3);
        let (mut b, _) = client(3);
        let prior = Prior::from_decay(spec.param_count(), a.ess(), 1e-2).unwrap();
        let ta = client_update(&mut a, None, &spec, &prior, &training(30), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let tb = client_update(&mut b, None, &spec, &prior, &training(30), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.local_posterior, b.local_posterior);
        assert_eq!(ta, tb);
        let first: f64 = ta.epoch_nll[..5].iter().sum();
        let last: f64 = ta.epoch_nll[25..].iter().sum();
        assert!(last < first, "{:?}", ta.epoch_nll);
    }
}
