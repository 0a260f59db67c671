use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use super::config::{DefenseArm, ExperimentConfig, TopologyArm, Weighting};
use crate::adversary::{assign_roles, attack_active, poison, AttackPolicy, RoleMap};
use crate::baselines::{cosdefense_filter, no_clustering_topology, CosDefenseConfig};
use crate::clustering::{maintain_clusters, suitability, ChurnEvent, ClusterAssignment, ClusterRole};
use crate::mobility::{
    depart, hello_packet, neighbors, spawn_arrivals, step_mobility, trace_rows, transmit, Adjacency,
    ChannelModel, Endpoint, HelloPacket, Track, VehicleState,
};
use crate::model::{
    cosine_similarity, fedavg, gen_dataset, init_model, local_train, partition_non_iid, ClientData, Dataset,
    Layout, ParamVector, Split, TrainConfig,
};
use crate::model::accuracy_on;
use crate::rng::{derive_seed, stream};
use crate::security::{ch_round, cluster_selection, epc_round, Evaluator, EventKind, RecordBook, RoundOutcome};
use crate::{Error, Result, VehicleId};

const UPLINK: u64 = 0;
const TO_EPC: u64 = 1;

/// What one round produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: u32,
    /// Global model accuracy on the test split after this round.
    pub epc_accuracy: f64,
    /// Test accuracy of each cluster model, keyed by CH (empty without clustering).
    pub cluster_accuracy: BTreeMap<VehicleId, f64>,
    pub population: usize,
    /// Contributions examined (or, without a defense, transmitted) across both tiers.
    pub selected: usize,
    /// Contributions that made it into an aggregate.
    pub accepted: usize,
    /// Contributions rejected by the defense.
    pub flagged: usize,
    /// Present vehicles currently blocked by any evaluator.
    pub blocked: usize,
    /// `false` when nothing reached the EPC and the previous model was kept.
    pub global_updated: bool,
    pub churn: Vec<ChurnEvent>,
}

/// Per-run detection bookkeeping for the attacker population.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DetectionStats {
    /// Round in which each attacker's first poisoned payload was delivered.
    pub first_attack: BTreeMap<VehicleId, u32>,
    /// First round (at or after `first_attack`) in which the attacker was blocked.
    pub first_block: BTreeMap<VehicleId, u32>,
    /// Anomaly tests run on payloads from non-attackers.
    pub benign_tests: u64,
    pub benign_flags: u64,
}

impl DetectionStats {
    /// Rounds from first delivered attack to block, per attacker; `None` if never blocked.
    pub fn block_latency(&self) -> BTreeMap<VehicleId, Option<u32>> {
        self.first_attack
            .iter()
            .map(|(v, &a)| (*v, self.first_block.get(v).map(|&b| b - a)))
            .collect()
    }

    pub fn false_flag_rate(&self) -> f64 {
        if self.benign_tests == 0 {
            0.0
        } else {
            self.benign_flags as f64 / self.benign_tests as f64
        }
    }
}

/// Delimited trace lines, written to disk only on request.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Traces {
    /// `round,vehicle,lane,position,speed`
    pub mobility: String,
    /// `round,vehicle,role,head`
    pub clusters: String,
    /// `round,evaluator,vehicle,event,value`
    pub security: String,
}

/// A trained contribution on its way up.
struct Contribution {
    update: Vec<f64>,
    samples: usize,
}

/// Trained parameters and their delta from the starting model.
type Trained = (ParamVector, Vec<f64>);

/// Full simulator state; one call to [`Simulation::run_round`] per round.
pub struct Simulation {
    config: ExperimentConfig,
    dataset: Dataset,
    clients: Vec<ClientData>,
    validation: Vec<usize>,
    test: Vec<usize>,
    train: TrainConfig,
    policy: Option<AttackPolicy>,
    roles: RoleMap,
    track: Track,
    channel: ChannelModel,
    states: Vec<VehicleState>,
    next_id: VehicleId,
    global: ParamVector,
    /// Model each present vehicle holds at the start of a round.
    models: BTreeMap<VehicleId, ParamVector>,
    assignment: ClusterAssignment,
    /// Records kept by cluster heads (they travel with the vehicle).
    ch_book: RecordBook,
    /// Records kept by the EPC, about CHs or, without clustering, about every vehicle.
    epc_book: RecordBook,
    last_local: BTreeMap<VehicleId, Vec<f64>>,
    model_similarity: BTreeMap<VehicleId, f64>,
    round: u32,
    detection: DetectionStats,
    traces: Traces,
}

impl Simulation {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let t = &config.training;
        let dataset = match &t.dataset_path {
            Some(path) => Dataset::from_delimited(&std::fs::read_to_string(path)?, derive_seed(seed, "dataset", &[]))?,
            None => gen_dataset(
                t.n_classes,
                t.n_features,
                t.n_samples,
                t.class_separation,
                derive_seed(seed, "dataset", &[]),
            )?,
        };
        let m = &config.mobility;
        let clients = partition_non_iid(&dataset, m.vehicles, t.shards_per_client, derive_seed(seed, "partition", &[]))?;
        let layout = Layout::mlp(dataset.n_features(), t.hidden, dataset.n_classes());
        let global = init_model(layout, derive_seed(seed, "init", &[]))?;

        let roles = roles_for(&config)?;
        let mut channel = ChannelModel::new(m.comm_range)?;
        channel.drop_prob = roles.unreliable.clone();

        Ok(Self {
            validation: dataset.indices(Split::Validation),
            test: dataset.indices(Split::Test),
            train: t.train_config(),
            policy: config.attack.policy(),
            track: Track {
                length: m.track_length,
                lanes: m.lanes,
            },
            channel,
            roles,
            states: Vec::new(),
            next_id: 0,
            global,
            models: BTreeMap::new(),
            assignment: ClusterAssignment::default(),
            ch_book: RecordBook::new(),
            epc_book: RecordBook::new(),
            last_local: BTreeMap::new(),
            model_similarity: BTreeMap::new(),
            round: 0,
            detection: DetectionStats::default(),
            traces: Traces::default(),
            dataset,
            clients,
            config,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn roles(&self) -> &RoleMap {
        &self.roles
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn states(&self) -> &[VehicleState] {
        &self.states
    }

    pub fn assignment(&self) -> &ClusterAssignment {
        &self.assignment
    }

    pub fn ch_records(&self) -> &RecordBook {
        &self.ch_book
    }

    pub fn epc_records(&self) -> &RecordBook {
        &self.epc_book
    }

    pub fn detection(&self) -> &DetectionStats {
        &self.detection
    }

    pub fn traces(&self) -> &Traces {
        &self.traces
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    /// Advance one communication round.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        self.round += 1;
        let round = self.round;
        self.mobility_phase();
        let adjacency = neighbors(&self.states, &self.channel, &self.track);
        let churn = self.clustering_phase(&adjacency);

        let mut tally = Tally::default();
        let mut cluster_accuracy = BTreeMap::new();
        let global_updated = match self.config.topology.arm {
            TopologyArm::Cbhfl => self.hierarchical_round(&adjacency, &mut tally, &mut cluster_accuracy)?,
            TopologyArm::NoClustering => self.flat_round(&adjacency, &mut tally)?,
        };
        self.record_detection(&tally.outcomes);

        for outcome in &tally.outcomes {
            for e in &outcome.events {
                self.traces.security.push_str(&e.to_row());
                self.traces.security.push('\n');
            }
        }
        let present: BTreeSet<VehicleId> = self.states.iter().map(|v| v.id).collect();
        let blocked = present
            .iter()
            .filter(|v| {
                [&self.ch_book, &self.epc_book]
                    .iter()
                    .any(|b| b.get(v).is_some_and(|r| r.block_flag))
            })
            .count();
        let epc_accuracy = accuracy_on(&self.global, &self.dataset, &self.test);
        log::info!(
            "round {round}: accuracy {epc_accuracy:.4}, selected {}, accepted {}, flagged {}, blocked {blocked}",
            tally.selected,
            tally.accepted,
            tally.flagged
        );
        Ok(RoundMetrics {
            round,
            epc_accuracy,
            cluster_accuracy,
            population: self.states.len(),
            selected: tally.selected,
            accepted: tally.accepted,
            flagged: tally.flagged,
            blocked,
            global_updated,
            churn,
        })
    }

    fn mobility_phase(&mut self) {
        let (seed, round) = (self.config.seed, self.round);
        let m = &self.config.mobility;
        step_mobility(
            &mut self.states,
            m.dt,
            m.speed_jitter,
            &self.track,
            &mut stream(seed, "mobility", &[u64::from(round)]),
        );
        for gone in depart(&mut self.states, m.departure_prob, &mut stream(seed, "departure", &[u64::from(round)])) {
            self.models.remove(&gone);
        }
        let arrivals = spawn_arrivals(
            m.arrival_rate,
            round,
            m.vehicles,
            self.states.len(),
            self.next_id,
            &self.track,
            &mut stream(seed, "arrivals", &[u64::from(round)]),
        );
        for mut v in arrivals.vehicles {
            v.attacker = self.roles.is_attacker(v.id);
            v.unreliable = self.roles.unreliable.contains_key(&v.id);
            self.next_id = self.next_id.max(v.id + 1);
            self.models.insert(v.id, self.global.clone());
            self.states.push(v);
        }
        self.traces.mobility.push_str(&trace_rows(round, &self.states));
    }

    fn clustering_phase(&mut self, adjacency: &Adjacency) -> Vec<ChurnEvent> {
        let round = self.round;
        let (next, churn) = match self.config.topology.arm {
            TopologyArm::NoClustering => {
                let present = self.states.iter().map(|v| v.id).collect();
                (no_clustering_topology(&present), Vec::new())
            }
            TopologyArm::Cbhfl => {
                let by_id: BTreeMap<VehicleId, &VehicleState> = self.states.iter().map(|v| (v.id, v)).collect();
                let hellos: BTreeMap<VehicleId, HelloPacket> = self
                    .states
                    .iter()
                    .map(|v| {
                        let role = self.assignment.role(v.id).unwrap_or(ClusterRole::Free);
                        let packet = hello_packet(
                            v,
                            &adjacency[&v.id],
                            &by_id,
                            role,
                            self.assignment.connector(v.id),
                            self.model_similarity.get(&v.id).copied().unwrap_or(0.0),
                        );
                        (v.id, packet)
                    })
                    .collect();
                let scores: BTreeMap<VehicleId, f64> = hellos
                    .iter()
                    .map(|(v, own)| {
                        let around: Vec<&HelloPacket> = adjacency[v].iter().map(|n| &hellos[n]).collect();
                        (*v, suitability(own, &around, self.config.topology.alpha).combined)
                    })
                    .collect();
                maintain_clusters(&self.assignment, adjacency, &scores, round)
            }
        };
        debug_assert!(next.validate(adjacency).is_ok());
        self.assignment = next;
        for (v, role) in self.assignment.roles() {
            let (name, head) = match role {
                ClusterRole::Head => ("head", *v),
                ClusterRole::Member { head } => ("member", *head),
                ClusterRole::Free => ("free", *v),
            };
            self.traces.clusters.push_str(&format!("{round},{v},{name},{head}\n"));
        }
        churn
    }

    fn weight(&self, samples: usize) -> f64 {
        match self.config.training.weighting {
            Weighting::Samples => samples.max(1) as f64,
            Weighting::Uniform => 1.0,
        }
    }

    fn client(&self, v: VehicleId) -> &ClientData {
        &self.clients[v as usize % self.clients.len()]
    }

    fn attacking(&self, v: VehicleId) -> Option<&AttackPolicy> {
        self.policy
            .as_ref()
            .filter(|p| self.roles.is_attacker(v) && attack_active(p, self.round))
    }

    /// Local training for `jobs` (vehicle, starting model), in parallel.
    /// Vehicles without data are left out.
    fn train(&mut self, jobs: Vec<(VehicleId, ParamVector)>) -> Result<BTreeMap<VehicleId, Contribution>> {
        let round = self.round;
        let results: Vec<(VehicleId, Result<Trained>)> = jobs
            .par_iter()
            .map(|(v, base)| {
                let seed = derive_seed(self.config.seed, "train", &[u64::from(*v), u64::from(round)]);
                let out = local_train(base, &self.dataset, self.client(*v), &self.train, round, seed)
                    .map(|(p, u)| (p, u.values));
                (*v, out)
            })
            .collect();
        let mut trained = BTreeMap::new();
        for (v, out) in results {
            match out {
                Ok((params, update)) => {
                    let summary = self
                        .last_local
                        .get(&v)
                        .and_then(|prev| cosine_similarity(&params.values, prev))
                        .unwrap_or(0.0);
                    self.model_similarity.insert(v, summary);
                    self.last_local.insert(v, params.values);
                    let samples = self.client(v).len();
                    trained.insert(v, Contribution { update, samples });
                }
                Err(Error::NoContribution) => log::debug!("round {round}: vehicle {v} has no data"),
                Err(e) => return Err(e),
            }
        }
        Ok(trained)
    }

    /// Send `payload` from `sender`, poisoning it first if the sender is attacking.
    /// Returns the payload if delivered.
    fn send(
        &mut self,
        payload: &[f64],
        sender: VehicleId,
        receiver: Endpoint,
        adjacency: &Adjacency,
        hop: u64,
    ) -> Result<Option<Vec<f64>>> {
        let (seed, round) = (self.config.seed, u64::from(self.round));
        let poisoned = self.attacking(sender).map(|policy| {
            let mut rng = stream(seed, "poison", &[u64::from(sender), round, hop]);
            poison(payload, policy, &mut rng)
        });
        let was_poisoned = poisoned.is_some();
        let message = poisoned.unwrap_or_else(|| payload.to_vec());
        let mut rng = stream(seed, "channel", &[u64::from(sender), round, hop]);
        let delivered = transmit(message, sender, receiver, &self.channel, adjacency, &mut rng)?.delivered();
        if was_poisoned && delivered.is_some() {
            self.detection.first_attack.entry(sender).or_insert(self.round);
        }
        Ok(delivered)
    }

    fn hierarchical_round(
        &mut self,
        adjacency: &Adjacency,
        tally: &mut Tally,
        cluster_accuracy: &mut BTreeMap<VehicleId, f64>,
    ) -> Result<bool> {
        let round = self.round;
        let proposed = self.config.defense.arm == DefenseArm::Proposed;
        let security = self.config.security;
        let clusters: Vec<(VehicleId, Vec<VehicleId>)> = self
            .assignment
            .clusters()
            .iter()
            .map(|(h, m)| (*h, m.iter().copied().collect()))
            .collect();

        let mut senders: BTreeMap<VehicleId, Vec<VehicleId>> = BTreeMap::new();
        let mut jobs = Vec::new();
        for (head, members) in &clusters {
            let chosen = if proposed {
                cluster_selection(&self.ch_book, members, &security)
            } else {
                members.clone()
            };
            let base = self.models[head].clone();
            jobs.push((*head, base.clone()));
            jobs.extend(chosen.iter().map(|v| (*v, base.clone())));
            senders.insert(*head, chosen);
        }
        let trained = self.train(jobs)?;

        let mut uplinks: BTreeMap<VehicleId, (Vec<f64>, f64)> = BTreeMap::new();
        let mut cluster_models: BTreeMap<VehicleId, ParamVector> = BTreeMap::new();
        for (head, members) in &clusters {
            let base = self.models[head].clone();
            let mut received = BTreeMap::new();
            for &v in &senders[head] {
                if let Some(c) = trained.get(&v) {
                    if let Some(payload) = self.send(&c.update, v, Endpoint::Vehicle(*head), adjacency, UPLINK)? {
                        received.insert(v, payload);
                    }
                }
            }
            let accepted: Vec<VehicleId> = if proposed {
                let reference = (round > 1).then_some(base.values.as_slice());
                let (dataset, validation) = (&self.dataset, &self.validation);
                let outcome = ch_round(
                    &mut self.ch_book,
                    members,
                    &received,
                    reference,
                    Evaluator::ClusterHead(*head),
                    round,
                    &security,
                    |_, update| base.apply(update).map_or(0.0, |m| accuracy_on(&m, dataset, validation)),
                );
                tally.add(&outcome);
                let accepted = outcome.accepted.clone();
                tally.outcomes.push(outcome);
                accepted
            } else {
                tally.selected += senders[head].len();
                tally.accepted += received.len();
                received.keys().copied().collect()
            };

            let mut parts: Vec<(&[f64], f64)> = Vec::new();
            let mut samples = 0;
            if let Some(own) = trained.get(head) {
                parts.push((&own.update, self.weight(own.samples)));
                samples += own.samples;
            }
            for v in &accepted {
                parts.push((&received[v], self.weight(trained[v].samples)));
                samples += trained[v].samples;
            }
            let model = if parts.is_empty() {
                base.clone()
            } else {
                base.apply(&fedavg(&parts)?)?
            };
            cluster_accuracy.insert(*head, accuracy_on(&model, &self.dataset, &self.test));
            uplinks.insert(*head, (model.values.clone(), self.weight(samples)));
            cluster_models.insert(*head, model);
        }

        if !round.is_multiple_of(self.config.topology.epc_period) {
            for (head, members) in &clusters {
                let model = &cluster_models[head];
                for v in std::iter::once(head).chain(members) {
                    self.models.insert(*v, model.clone());
                }
            }
            return Ok(false);
        }

        let mut received = BTreeMap::new();
        for (head, (model, _)) in &uplinks {
            if let Some(payload) = self.send(model, *head, Endpoint::Epc, adjacency, TO_EPC)? {
                received.insert(*head, payload);
            }
        }
        let heads: Vec<VehicleId> = uplinks.keys().copied().collect();
        let accepted: Vec<VehicleId> = if proposed {
            let fallback = (round > 1).then(|| self.global.values.clone());
            let (dataset, validation, layout) = (&self.dataset, &self.validation, self.global.layout().clone());
            let outcome = epc_round(
                &mut self.epc_book,
                &heads,
                &received,
                fallback.as_deref(),
                round,
                &security,
                |_, model| {
                    ParamVector::new(model.to_vec(), layout.clone()).map_or(0.0, |m| accuracy_on(&m, dataset, validation))
                },
            );
            tally.add(&outcome);
            let accepted = outcome.accepted.clone();
            tally.outcomes.push(outcome);
            accepted
        } else {
            tally.selected += heads.len();
            tally.accepted += received.len();
            received.keys().copied().collect()
        };
        let parts: Vec<(&[f64], f64)> = accepted.iter().map(|h| (received[h].as_slice(), uplinks[h].1)).collect();
        self.finish_global(parts)
    }

    fn flat_round(&mut self, adjacency: &Adjacency, tally: &mut Tally) -> Result<bool> {
        let round = self.round;
        let everyone: Vec<VehicleId> = self.states.iter().map(|v| v.id).collect::<BTreeSet<_>>().into_iter().collect();
        let security = self.config.security;
        let arm = self.config.defense.arm;
        let senders = if arm == DefenseArm::Proposed {
            cluster_selection(&self.epc_book, &everyone, &security)
        } else {
            everyone.clone()
        };
        let jobs = senders.iter().map(|v| (*v, self.global.clone())).collect();
        let trained = self.train(jobs)?;
        let mut received = BTreeMap::new();
        for v in &senders {
            if let Some(c) = trained.get(v) {
                if let Some(payload) = self.send(&c.update, *v, Endpoint::Epc, adjacency, UPLINK)? {
                    received.insert(*v, payload);
                }
            }
        }
        let accepted: Vec<VehicleId> = match arm {
            DefenseArm::Proposed => {
                let base = self.global.clone();
                let reference = (round > 1).then_some(base.values.as_slice());
                let (dataset, validation) = (&self.dataset, &self.validation);
                let outcome = ch_round(
                    &mut self.epc_book,
                    &everyone,
                    &received,
                    reference,
                    Evaluator::Epc,
                    round,
                    &security,
                    |_, update| base.apply(update).map_or(0.0, |m| accuracy_on(&m, dataset, validation)),
                );
                tally.add(&outcome);
                let accepted = outcome.accepted.clone();
                tally.outcomes.push(outcome);
                accepted
            }
            DefenseArm::CosDefense => {
                let cfg = CosDefenseConfig {
                    deviation_multiplier: self.config.defense.deviation_multiplier,
                };
                let filtered = cosdefense_filter(&self.global, &received, &cfg);
                tally.selected += received.len();
                tally.accepted += filtered.kept.len();
                tally.flagged += filtered.excluded.len();
                filtered.kept
            }
            DefenseArm::None => {
                tally.selected += senders.len();
                tally.accepted += received.len();
                received.keys().copied().collect()
            }
        };
        let base = self.global.clone();
        let parts: Vec<(Vec<f64>, f64)> = accepted
            .iter()
            .map(|v| {
                let model: Vec<f64> = base.values.iter().zip(&received[v]).map(|(b, g)| b + g).collect();
                (model, self.weight(trained[v].samples))
            })
            .collect();
        self.finish_global(parts)
    }

    /// Global FedAvg over accepted models and broadcast. An empty set keeps
    /// the previous global model.
    fn finish_global<V: AsRef<[f64]>>(&mut self, parts: Vec<(V, f64)>) -> Result<bool> {
        let updated = if parts.is_empty() {
            log::warn!("round {}: no contribution reached the EPC, keeping the previous model", self.round);
            false
        } else {
            self.global = self.global.with_values(fedavg(&parts)?)?;
            true
        };
        for model in self.models.values_mut() {
            *model = self.global.clone();
        }
        Ok(updated)
    }

    fn record_detection(&mut self, outcomes: &[RoundOutcome]) {
        for outcome in outcomes {
            for e in &outcome.events {
                if self.roles.is_attacker(e.vehicle) {
                    continue;
                }
                match e.kind {
                    EventKind::Flagged => {
                        self.detection.benign_tests += 1;
                        self.detection.benign_flags += 1;
                    }
                    EventKind::Accepted { .. } => self.detection.benign_tests += 1,
                    _ => {}
                }
            }
        }
        let pending: Vec<VehicleId> = self
            .detection
            .first_attack
            .keys()
            .filter(|v| !self.detection.first_block.contains_key(v))
            .copied()
            .collect();
        for v in pending {
            let blocked = [&self.ch_book, &self.epc_book]
                .iter()
                .any(|b| b.get(&v).is_some_and(|r| r.block_flag));
            if blocked {
                self.detection.first_block.insert(v, self.round);
            }
        }
    }
}

#[derive(Default)]
struct Tally {
    selected: usize,
    accepted: usize,
    flagged: usize,
    outcomes: Vec<RoundOutcome>,
}

impl Tally {
    fn add(&mut self, outcome: &RoundOutcome) {
        self.selected += outcome.selected.len();
        self.accepted += outcome.accepted.len();
        self.flagged += outcome.flagged.len();
    }
}

/// Role map for `config`. Attackers are designated even without an attack
/// policy (they then behave honestly), so every arm sharing a seed shares
/// the same unreliable vehicles.
pub fn roles_for(config: &ExperimentConfig) -> Result<RoleMap> {
    let ids: Vec<VehicleId> = (0..config.mobility.vehicles as VehicleId).collect();
    let a = &config.attack;
    assign_roles(&ids, a.attacker_fraction, a.unreliable_fraction, a.drop_prob, derive_seed(config.seed, "roles", &[]))
}
