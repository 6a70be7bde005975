//! Full-participation federated rounds.
//!
//! Each round the coordinator broadcasts the shared entries, every silo
//! overwrites its copy of them, takes `E` Adam steps on its own mini-batches
//! and sends back its shared entries. The coordinator averages them with
//! weights `N_i / N`. Which entries are shared depends on the [`Strategy`]:
//! under [`Strategy::SiloBn`] running batch-norm statistics never leave a
//! silo, under naive [`Strategy::FedAvg`] they are averaged like any other
//! entry.
//!
//! Every message passes through its byte encoding ([`crate::wire`]); the
//! coordinator only ever sees decoded bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamHyper, AdamState};
use crate::datagen::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::model::{build_model, param_shapes, ModelSpec, ParamKey, ParamSet};
use crate::nn::{apply_batch_moments, backward, forward, Mode};
use crate::real::Real;
use crate::seeds::{self, Stream};
use crate::tensor::Tensor;
use crate::wire::{decode_update, encode_update, SharedUpdate, COORDINATOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// All data in one place; one model.
    Pooled,
    /// Every silo alone; nothing is communicated.
    Local,
    /// Everything averaged, batch-norm statistics included.
    FedAvg,
    /// FedAvg plus a proximal pull towards the round's global model.
    FedProx,
    /// Everything averaged except batch-norm statistics.
    SiloBn,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Pooled,
        Strategy::Local,
        Strategy::FedAvg,
        Strategy::FedProx,
        Strategy::SiloBn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Pooled => "pooled",
            Strategy::Local => "local",
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx => "fedprox",
            Strategy::SiloBn => "silobn",
        }
    }

    /// One model per center rather than a single global one.
    pub fn is_personalized(self) -> bool {
        matches!(self, Strategy::Local | Strategy::SiloBn)
    }

    /// Whether silos exchange anything.
    pub fn communicates(self) -> bool {
        matches!(self, Strategy::FedAvg | Strategy::FedProx | Strategy::SiloBn)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown strategy {s:?}; expected one of pooled, local, fedavg, fedprox, silobn"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub strategy: Strategy,
    /// Local mini-batch updates per round (`E`).
    pub local_steps: usize,
    /// Number of rounds (`T`).
    pub rounds: usize,
    pub batch_size: usize,
    pub fedprox_lambda: f64,
    pub adam: AdamHyper,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            strategy: Strategy::SiloBn,
            local_steps: 10,
            rounds: 50,
            batch_size: 32,
            fedprox_lambda: 0.0,
            adam: AdamHyper::default(),
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 {
            return Err(Error::InvalidConfig("local_steps (E) must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if !(self.fedprox_lambda >= 0.0 && self.fedprox_lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "fedprox_lambda must be finite and >= 0, got {}",
                self.fedprox_lambda
            )));
        }
        self.adam.validate()
    }

    /// The proximal coefficient in effect; zero unless the strategy is FedProx.
    pub fn proximal(&self) -> f64 {
        if self.strategy == Strategy::FedProx {
            self.fedprox_lambda
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPartition {
    pub shared: BTreeSet<ParamKey>,
    pub local: BTreeSet<ParamKey>,
}

/// Which entries are averaged and which stay in their silo. Pooled training
/// has a single participant; its entries are all reported as shared.
pub fn partition_keys(spec: &ModelSpec, strategy: Strategy) -> KeyPartition {
    let all: BTreeSet<ParamKey> = param_shapes(spec).into_iter().map(|(k, _)| k).collect();
    let (shared, local) = match strategy {
        Strategy::SiloBn => all.into_iter().partition(|k| !k.is_statistic()),
        Strategy::FedAvg | Strategy::FedProx | Strategy::Pooled => (all, BTreeSet::new()),
        Strategy::Local => (BTreeSet::new(), all),
    };
    KeyPartition { shared, local }
}

/// Endless epoch-wise shuffled index stream.
#[derive(Clone, Debug)]
pub struct MiniBatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl MiniBatchSampler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyDataset("cannot sample from an empty dataset".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(MiniBatchSampler {
            rng,
            order,
            cursor: 0,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// The next `size` indices; an epoch boundary reshuffles and continues.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
                self.epoch += 1;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// One participant: its training data, full parameter copy and optimizer.
#[derive(Clone, Debug)]
pub struct SiloState<R = f64> {
    pub id: u32,
    pub data: Arc<LabeledDataset>,
    pub params: ParamSet<R>,
    pub adam: AdamState<R>,
    pub sampler: MiniBatchSampler,
}

impl<R: Real> SiloState<R> {
    pub fn new(id: u32, data: Arc<LabeledDataset>, params: ParamSet<R>, hyper: AdamHyper, seed: u64) -> Result<Self> {
        let sampler = MiniBatchSampler::new(data.len(), seeds::derive(seed, Stream::Sampling, id as u64))?;
        let (neg, pos) = data.class_counts();
        if neg == 0 || pos == 0 {
            return Err(Error::EmptyDataset(format!("silo {id} lacks one of the two classes")));
        }
        Ok(SiloState {
            id,
            adam: AdamState::new(&params, hyper),
            data,
            params,
            sampler,
        })
    }

    pub fn n_samples(&self) -> u64 {
        self.data.len() as u64
    }
}

/// Adds `lambda * (theta - theta_global)` to the gradient of every shared
/// trainable entry. Running statistics have no gradient and are skipped.
pub fn fedprox_grad<R: Real>(
    grads: &mut ParamSet<R>,
    params: &ParamSet<R>,
    global_shared: &BTreeMap<ParamKey, Tensor<R>>,
    lambda: f64,
) -> Result<()> {
    if lambda < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "proximal coefficient {lambda} is negative"
        )));
    }
    if lambda == 0.0 {
        return Ok(());
    }
    let lam = R::of_f64(lambda);
    for (key, anchor) in global_shared.iter().filter(|(k, _)| !k.is_statistic()) {
        let theta = params.require(*key)?;
        let g = grads
            .get_mut(key)
            .ok_or_else(|| Error::KeyMismatch(format!("no gradient for shared entry {key}")))?;
        if theta.shape() != anchor.shape() || g.shape() != theta.shape() {
            return Err(Error::Shape(format!("{key}: proximal anchor shape differs")));
        }
        for ((gi, &t), &a) in g.data_mut().iter_mut().zip(theta.data()).zip(anchor.data()) {
            *gi += lam * (t - a);
        }
    }
    Ok(())
}

/// Training-mode step on one mini-batch; returns the loss.
fn train_step<R: Real>(
    spec: &ModelSpec,
    silo: &mut SiloState<R>,
    anchor: &BTreeMap<ParamKey, Tensor<R>>,
    lambda: f64,
    batch_size: usize,
) -> Result<f64> {
    let idx = silo.sampler.next_batch(batch_size);
    let batch = silo.data.gather::<R>(&idx)?;
    let pass = forward(spec, &silo.params, &batch.images, Mode::Train)?;
    let (mut grads, loss) = backward(spec, &silo.params, &pass.cache, &batch.labels)?;
    fedprox_grad(&mut grads, &silo.params, anchor, lambda)?;
    apply_batch_moments(&mut silo.params, &pass.observations)?;
    adam_step(&mut silo.params, &grads, &mut silo.adam)?;
    Ok(loss.as_f64())
}

/// Takes the broadcast entries, runs `E` local steps and returns the silo's
/// shared entries with the mean training loss of those steps.
pub fn local_update<R: Real>(
    spec: &ModelSpec,
    silo: &mut SiloState<R>,
    global_shared: &BTreeMap<ParamKey, Tensor<R>>,
    config: &FederationConfig,
    round: u32,
) -> Result<(SharedUpdate<R>, f64)> {
    if config.local_steps == 0 {
        return Err(Error::InvalidConfig("local_steps (E) must be at least 1".into()));
    }
    if silo.data.is_empty() {
        return Err(Error::EmptyDataset(format!("silo {}", silo.id)));
    }
    let expected = partition_keys(spec, config.strategy).shared;
    if !global_shared.keys().eq(expected.iter()) && config.strategy != Strategy::Pooled {
        return Err(Error::KeyMismatch(format!(
            "silo {} received {} entries, strategy {} shares {}",
            silo.id,
            global_shared.len(),
            config.strategy,
            expected.len()
        )));
    }
    silo.params.overwrite(global_shared)?;
    let lambda = config.proximal();
    let mut total = 0.0;
    for step in 0..config.local_steps {
        total += train_step(spec, silo, global_shared, lambda, config.batch_size).map_err(|e| Error::Training {
            silo: silo.id,
            round,
            step,
            source: Box::new(e),
        })?;
    }
    let keys: BTreeSet<ParamKey> = global_shared.keys().copied().collect();
    Ok((
        SharedUpdate {
            silo_id: silo.id,
            round,
            n_samples: silo.n_samples(),
            entries: silo.params.restrict(&keys)?,
        },
        total / config.local_steps as f64,
    ))
}

/// `sum_i (N_i / N) theta_i`, accumulated in ascending silo order.
pub fn aggregate<R: Real>(updates: &[SharedUpdate<R>]) -> Result<BTreeMap<ParamKey, Tensor<R>>> {
    let mut ordered: Vec<&SharedUpdate<R>> = updates.iter().collect();
    ordered.sort_by_key(|u| u.silo_id);
    let first = *ordered
        .first()
        .ok_or_else(|| Error::KeyMismatch("no updates to aggregate".into()))?;
    let total: f64 = ordered.iter().map(|u| u.n_samples as f64).sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeight);
    }
    for u in &ordered {
        if !u.entries.keys().eq(first.entries.keys()) {
            return Err(Error::KeyMismatch(format!(
                "silo {} sent different keys than silo {}",
                u.silo_id, first.silo_id
            )));
        }
        if u.round != first.round {
            return Err(Error::KeyMismatch(format!(
                "silo {} sent round {}, expected {}",
                u.silo_id, u.round, first.round
            )));
        }
    }
    let weights: Vec<R> = ordered.iter().map(|u| R::of_f64(u.n_samples as f64 / total)).collect();
    let mut out = BTreeMap::new();
    for (key, head) in &first.entries {
        // start from the first term, not from zero, so a single participant
        // reproduces its entries bit for bit
        let mut acc: Vec<R> = head.data().iter().map(|&v| weights[0] * v).collect();
        for (u, &w) in ordered.iter().zip(&weights).skip(1) {
            let t = &u.entries[key];
            if t.shape() != head.shape() {
                return Err(Error::Shape(format!("{key}: silo {} sent {:?}", u.silo_id, t.shape())));
            }
            for (a, &v) in acc.iter_mut().zip(t.data()) {
                *a += w * v;
            }
        }
        out.insert(*key, Tensor::new(head.shape().to_vec(), acc)?);
    }
    Ok(out)
}

/// One encoded message and who sent it.
#[derive(Clone, Debug)]
pub struct Message<'a> {
    pub round: u32,
    pub sender: u32,
    pub bytes: &'a [u8],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u32,
    /// Mean training loss of each silo's local steps.
    pub losses: BTreeMap<u32, f64>,
    /// Keys that crossed a silo boundary this round.
    pub communicated: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct FederationOutcome<R = f64> {
    pub strategy: Strategy,
    /// Last aggregate; empty when nothing is shared.
    pub global_shared: BTreeMap<ParamKey, Tensor<R>>,
    pub silos: Vec<SiloState<R>>,
    pub rounds: Vec<RoundLog>,
}

impl<R: Real> FederationOutcome<R> {
    /// Final model of silo `id`: its own entries overlaid with the aggregate.
    pub fn center_model(&self, id: u32) -> Result<ParamSet<R>> {
        let silo = self.silos.iter().find(|s| s.id == id).ok_or(Error::MissingModel(id))?;
        let mut params = silo.params.clone();
        params.overwrite(&self.global_shared)?;
        Ok(params)
    }

    /// Every silo's final model, keyed by silo id.
    pub fn center_models(&self) -> Result<BTreeMap<u32, ParamSet<R>>> {
        self.silos
            .iter()
            .map(|s| Ok((s.id, self.center_model(s.id)?)))
            .collect()
    }

    /// The single model of a non-personalized strategy.
    pub fn global_model(&self) -> Option<ParamSet<R>> {
        if self.strategy.is_personalized() {
            return None;
        }
        self.center_model(self.silos.first()?.id).ok()
    }
}

/// Builds the participants from per-center training sets. All silos start
/// from the same initialization. Pooled training concatenates every center
/// into one participant with id 0.
pub fn init_silos<R: Real>(
    spec: &ModelSpec,
    train_sets: &[Arc<LabeledDataset>],
    config: &FederationConfig,
) -> Result<Vec<SiloState<R>>> {
    config.validate()?;
    if train_sets.is_empty() {
        return Err(Error::EmptyDataset("no silos".into()));
    }
    for ds in train_sets {
        if ds.sample_shape() != spec.input {
            return Err(Error::Shape(format!(
                "center {} has {} samples, model expects {}",
                ds.center_id,
                ds.sample_shape(),
                spec.input
            )));
        }
    }
    let init = build_model::<R>(spec, seeds::derive(config.seed, Stream::Init, 0))?;
    if config.strategy == Strategy::Pooled {
        let parts: Vec<&LabeledDataset> = train_sets.iter().map(|d| d.as_ref()).collect();
        let pooled = LabeledDataset::concat(&parts, 0, Split::Train)?;
        return Ok(vec![SiloState::new(
            0,
            Arc::new(pooled),
            init,
            config.adam,
            config.seed,
        )?]);
    }
    train_sets
        .iter()
        .map(|ds| SiloState::new(ds.center_id, ds.clone(), init.clone(), config.adam, config.seed))
        .collect()
}

pub fn run_federation<R: Real>(
    spec: &ModelSpec,
    silos: Vec<SiloState<R>>,
    config: &FederationConfig,
) -> Result<FederationOutcome<R>> {
    run_federation_observed(spec, silos, config, |_| {})
}

/// [`run_federation`] that also hands every encoded message to `observe`:
/// the coordinator's broadcast first, then each silo's update.
pub fn run_federation_observed<R: Real>(
    spec: &ModelSpec,
    mut silos: Vec<SiloState<R>>,
    config: &FederationConfig,
    mut observe: impl FnMut(Message<'_>),
) -> Result<FederationOutcome<R>> {
    config.validate()?;
    if silos.is_empty() {
        return Err(Error::EmptyDataset("no silos".into()));
    }
    silos.sort_by_key(|s| s.id);
    if silos.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::InvalidConfig("silo ids must be distinct".into()));
    }
    let partition = partition_keys(spec, config.strategy);
    let communicates = config.strategy.communicates() && !partition.shared.is_empty();
    let mut global = if communicates {
        silos[0].params.restrict(&partition.shared)?
    } else {
        BTreeMap::new()
    };
    let communicated: Vec<String> = if communicates {
        partition.shared.iter().map(ToString::to_string).collect()
    } else {
        Vec::new()
    };

    let mut logs = Vec::with_capacity(config.rounds);
    for t in 0..config.rounds {
        let round = t as u32;
        let broadcast = if communicates {
            let bytes = encode_update(&SharedUpdate {
                silo_id: COORDINATOR,
                round,
                n_samples: 0,
                entries: global.clone(),
            })?;
            observe(Message {
                round,
                sender: COORDINATOR,
                bytes: &bytes,
            });
            decode_update::<R>(&bytes)?.entries
        } else {
            BTreeMap::new()
        };

        let results: Vec<Result<(SharedUpdate<R>, f64)>> = silos
            .par_iter_mut()
            .map(|silo| local_update(spec, silo, &broadcast, config, round))
            .collect();

        let mut losses = BTreeMap::new();
        let mut received = Vec::with_capacity(silos.len());
        for result in results {
            let (update, loss) = result?;
            losses.insert(update.silo_id, loss);
            if communicates {
                let bytes = encode_update(&update)?;
                observe(Message {
                    round,
                    sender: update.silo_id,
                    bytes: &bytes,
                });
                received.push(decode_update::<R>(&bytes)?);
            }
        }
        if communicates {
            global = aggregate(&received)?;
        }
        log::debug!("round {round}: losses {losses:?}");
        logs.push(RoundLog {
            round,
            losses,
            communicated: communicated.clone(),
        });
    }
    Ok(FederationOutcome {
        strategy: config.strategy,
        global_shared: global,
        silos,
        rounds: logs,
    })
}
