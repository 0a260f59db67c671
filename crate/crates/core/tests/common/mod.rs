//! Independent oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vanet_hfl::security::{ch_round, epc_round, Evaluator, RecordBook, ReliabilityRecord, SecurityConfig};
use vanet_hfl::VehicleId;

// ---------------------------------------------------------------------------
// Double-double arithmetic for a high-precision cosine.

#[derive(Clone, Copy, Debug)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    pub fn from_f64(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let e = e + self.lo + o.lo;
        let (hi, lo) = two_sum(s, e);
        Dd { hi, lo }
    }

    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + self.hi * o.lo + self.lo * o.hi;
        let (hi, lo) = two_sum(p, e);
        Dd { hi, lo }
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.add(o.mul(Dd::from_f64(-q1)));
        let q2 = r.hi / o.hi;
        let (hi, lo) = two_sum(q1, q2);
        Dd { hi, lo }
    }

    /// One Newton step on top of the f64 square root.
    pub fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        let x = self.hi.sqrt();
        let (sq, err) = two_prod(x, x);
        let residual = self.add(Dd { hi: -sq, lo: -err });
        let (hi, lo) = two_sum(x, residual.hi / (2.0 * x));
        Dd { hi, lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

fn dd_dot(a: &[f64], b: &[f64]) -> Dd {
    a.iter().zip(b).fold(Dd::ZERO, |acc, (x, y)| {
        let (p, e) = two_prod(*x, *y);
        acc.add(Dd { hi: p, lo: e })
    })
}

/// Cosine similarity carried out in double-double precision.
pub fn cosine_dd(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dd_dot(a, a).sqrt();
    let nb = dd_dot(b, b).sqrt();
    if na.hi == 0.0 || nb.hi == 0.0 {
        return None;
    }
    Some(dd_dot(a, b).div(na.mul(nb)).to_f64())
}

// ---------------------------------------------------------------------------
// Straight-line reliability metrics from raw counters.

pub struct Weights {
    pub accuracy: f64,
    pub frequency: f64,
    pub anomaly: f64,
}

/// `wa·(Σacc/i) + wf·(contrib/i) − wn·(anom/i)`; all zero when `i = 0`.
pub fn oracle_metrics(total_accuracy: f64, contributions: u32, anomalous: u32, i: u32, w: &Weights) -> [f64; 4] {
    if i == 0 {
        return [0.0; 4];
    }
    let i = i as f64;
    let ha = total_accuracy / i;
    let cf = contributions as f64 / i;
    let ar = anomalous as f64 / i;
    [ha, cf, ar, w.accuracy * ha + w.frequency * cf - w.anomaly * ar]
}

// ---------------------------------------------------------------------------
// Straight-line CH (selection + vetting) and EPC (vetting) rounds.

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleRecord {
    pub acc: f64,
    pub contrib: u32,
    pub anom: u32,
    pub blocked: bool,
    pub duration: u32,
    pub last: Option<Vec<f64>>,
    pub score: f64,
    pub i: u32,
}

pub type OracleBook = BTreeMap<VehicleId, OracleRecord>;

const UNBLOCK_TIME: u32 = 5;
const THRESHOLD: f64 = 0.5;

fn plain_cos(a: &[f64], b: &[f64]) -> Option<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
    }
}

fn is_anomalous(current: &[f64], reference: Option<&[f64]>) -> bool {
    match reference {
        None => false,
        Some(r) => match plain_cos(current, r) {
            None => true,
            Some(s) => s < THRESHOLD,
        },
    }
}

/// Outcome lists in examination order: (selected, accepted, flagged).
pub type OracleOutcome = (Vec<VehicleId>, Vec<VehicleId>, Vec<VehicleId>);

/// (vector to test, reference) for a first contribution.
type Comparison = (Vec<f64>, Vec<f64>);

fn vet(
    book: &mut OracleBook,
    order: &[VehicleId],
    received: &BTreeMap<VehicleId, Vec<f64>>,
    first_reference: &dyn Fn(&[f64]) -> Option<Comparison>,
    accuracy: &mut dyn FnMut(VehicleId, &[f64]) -> f64,
) -> OracleOutcome {
    let mut out: OracleOutcome = Default::default();
    for &v in order {
        out.0.push(v);
        let rec = book.get_mut(&v).unwrap();
        if rec.blocked {
            if rec.duration < UNBLOCK_TIME {
                rec.duration += 1;
                continue;
            }
            rec.blocked = false;
        }
        let Some(g) = received.get(&v) else { continue };
        let anomalous = match &rec.last {
            Some(prev) => is_anomalous(g, Some(prev)),
            None => match first_reference(g) {
                Some((current, reference)) => is_anomalous(&current, Some(&reference)),
                None => false,
            },
        };
        if anomalous {
            rec.blocked = true;
            rec.duration = 0;
            rec.anom += 1;
            out.2.push(v);
        } else {
            rec.contrib += 1;
            rec.acc += accuracy(v, g);
            rec.last = Some(g.clone());
            out.1.push(v);
        }
    }
    out
}

fn rescore(book: &mut OracleBook, vehicles: &[VehicleId]) {
    for v in vehicles {
        let r = book.get_mut(v).unwrap();
        let i = r.i as f64;
        r.score = r.acc / i + r.contrib as f64 / i - r.anom as f64 / i;
    }
}

/// Cluster-head round with default weights, 75 % selection, unblock time 5
/// and threshold 0.5.
pub fn oracle_ch_round(
    book: &mut OracleBook,
    members: &[VehicleId],
    received: &BTreeMap<VehicleId, Vec<f64>>,
    base: Option<&[f64]>,
    accuracy: &mut dyn FnMut(VehicleId, &[f64]) -> f64,
) -> OracleOutcome {
    let mut ranked: Vec<(f64, VehicleId)> = members
        .iter()
        .map(|v| (book.get(v).map_or(0.0, |r| r.score), *v))
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let n = members.len();
    let k = (3 * n).div_ceil(4).max(1).min(n);
    let selected: Vec<VehicleId> = ranked[..k].iter().map(|p| p.1).collect();
    for v in members {
        book.entry(*v).or_default().i += 1;
    }
    let first = |g: &[f64]| base.map(|b| (b.iter().zip(g).map(|(x, y)| x + y).collect(), b.to_vec()));
    let out = vet(book, &selected, received, &first, accuracy);
    rescore(book, members);
    out
}

/// EPC round: every head, in id order, no selection.
pub fn oracle_epc_round(
    book: &mut OracleBook,
    heads: &[VehicleId],
    received: &BTreeMap<VehicleId, Vec<f64>>,
    fallback: Option<&[f64]>,
    accuracy: &mut dyn FnMut(VehicleId, &[f64]) -> f64,
) -> OracleOutcome {
    let mut order = heads.to_vec();
    order.sort();
    order.dedup();
    for v in &order {
        book.entry(*v).or_default().i += 1;
    }
    let first = |g: &[f64]| fallback.map(|f| (g.to_vec(), f.to_vec()));
    let out = vet(book, &order, received, &first, accuracy);
    rescore(book, &order);
    out
}

// ---------------------------------------------------------------------------
// Scripted event trace.

pub struct TraceRound {
    /// Cluster head -> members.
    pub clusters: BTreeMap<VehicleId, Vec<VehicleId>>,
    /// Member updates that arrived at their CH.
    pub cm_received: BTreeMap<VehicleId, Vec<f64>>,
    /// Cluster models that arrived at the EPC.
    pub ch_received: BTreeMap<VehicleId, Vec<f64>>,
    pub base: Option<Vec<f64>>,
}

pub const TRACE_VEHICLES: VehicleId = 14;
const DIM: usize = 8;

fn noise(rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
    (0..DIM).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Random trace with churn, cluster migrations, drops, zero payloads,
/// persistent offenders (ids 0 and 1) and sporadic offenders.
pub fn scripted_trace(rounds: u32, seed: u64) -> Vec<TraceRound> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let directions: Vec<Vec<f64>> = (0..TRACE_VEHICLES).map(|_| noise(&mut rng, 1.0)).collect();
    let anchor = noise(&mut rng, 3.0);
    let mut trace = Vec::new();
    for r in 1..=rounds {
        let present: Vec<VehicleId> = (0..TRACE_VEHICLES).filter(|_| rng.random::<f64>() > 0.1).collect();
        if present.len() < 3 {
            continue;
        }
        let mut pool = present.clone();
        let mut heads = Vec::new();
        for _ in 0..3 {
            let k = rng.random_range(0..pool.len());
            heads.push(pool.swap_remove(k));
        }
        let mut clusters: BTreeMap<VehicleId, Vec<VehicleId>> = heads.iter().map(|h| (*h, Vec::new())).collect();
        for v in pool {
            let h = heads[rng.random_range(0..heads.len())];
            clusters.get_mut(&h).unwrap().push(v);
        }
        let base: Option<Vec<f64>> = (r > 1).then(|| anchor.iter().zip(noise(&mut rng, 0.2)).map(|(a, n)| a + n).collect());

        let mut cm_received = BTreeMap::new();
        for members in clusters.values() {
            for &v in members {
                if rng.random::<f64>() < 0.15 {
                    continue;
                }
                let offend = if v < 2 { 0.6 } else { 0.12 };
                let u = rng.random::<f64>();
                let d = &directions[v as usize];
                let payload: Vec<f64> = if u < 0.03 {
                    vec![0.0; DIM]
                } else if u < offend {
                    match &base {
                        Some(b) if rng.random::<bool>() => b.iter().map(|x| -2.5 * x).collect(),
                        _ => d.iter().zip(noise(&mut rng, 0.5)).map(|(x, n)| -x + n).collect(),
                    }
                } else {
                    d.iter().zip(noise(&mut rng, 0.4)).map(|(x, n)| 0.1 * (x + n)).collect()
                };
                cm_received.insert(v, payload);
            }
        }

        let mut ch_received = BTreeMap::new();
        for &h in clusters.keys() {
            if rng.random::<f64>() < 0.1 {
                continue;
            }
            let reference = base.clone().unwrap_or_else(|| anchor.clone());
            let model: Vec<f64> = if (h < 2 && rng.random::<f64>() < 0.6) || rng.random::<f64>() < 0.08 {
                reference.iter().zip(noise(&mut rng, 6.0)).map(|(x, n)| -x + n).collect()
            } else {
                reference.iter().zip(noise(&mut rng, 0.3)).map(|(x, n)| x + n).collect()
            };
            ch_received.insert(h, model);
        }
        trace.push(TraceRound {
            clusters,
            cm_received,
            ch_received,
            base,
        });
    }
    trace
}

/// Deterministic stand-in for a validation accuracy.
pub fn fake_accuracy(v: VehicleId, x: &[f64]) -> f64 {
    (x.iter().map(|a| a.abs()).sum::<f64>() * 0.37 + f64::from(v) * 0.013).fract()
}

pub fn same_record(lib: &ReliabilityRecord, o: &OracleRecord) -> bool {
    lib.total_accuracy.to_bits() == o.acc.to_bits()
        && lib.total_contributions == o.contrib
        && lib.total_anomalous == o.anom
        && lib.block_flag == o.blocked
        && lib.block_duration == o.duration
        && lib.last_update == o.last
        && lib.reliability_score.to_bits() == o.score.to_bits()
        && lib.rounds_observed == o.i
}

/// Tallies of what a replay exercised, to make sure the trace is not trivial.
#[derive(Debug, Default)]
pub struct ReplayReport {
    pub rounds: usize,
    pub mismatches: Vec<String>,
    pub flagged: usize,
    pub accepted: usize,
    pub skipped: usize,
    pub reflagged: usize,
    pub migrations: usize,
}

/// Run the library rounds and the oracle side by side over `trace`,
/// comparing every record after every round.
pub fn replay(trace: &[TraceRound]) -> ReplayReport {
    let config = SecurityConfig::default();
    let mut report = ReplayReport::default();
    let (mut lib_ch, mut lib_epc) = (RecordBook::new(), RecordBook::new());
    let (mut or_ch, mut or_epc) = (OracleBook::new(), OracleBook::new());
    let mut last_head: BTreeMap<VehicleId, VehicleId> = BTreeMap::new();
    let mut ever_flagged: BTreeMap<VehicleId, u32> = BTreeMap::new();

    for (k, step) in trace.iter().enumerate() {
        let round = k as u32 + 1;
        let base = step.base.as_deref();
        for (&head, members) in &step.clusters {
            for m in members {
                if last_head.insert(*m, head).is_some_and(|h| h != head) {
                    report.migrations += 1;
                }
            }
            let lib_out = ch_round(
                &mut lib_ch,
                members,
                &step.cm_received,
                base,
                Evaluator::ClusterHead(head),
                round,
                &config,
                fake_accuracy,
            );
            let or_out = oracle_ch_round(&mut or_ch, members, &step.cm_received, base, &mut fake_accuracy);
            if (lib_out.selected.clone(), lib_out.accepted.clone(), lib_out.flagged.clone()) != or_out {
                report.mismatches.push(format!("round {round} ch{head}: outcome {lib_out:?} vs {or_out:?}"));
            }
            report.skipped += lib_out.skipped.len();
            report.accepted += lib_out.accepted.len();
            report.flagged += lib_out.flagged.len();
            for v in &lib_out.flagged {
                let n = ever_flagged.entry(*v).or_default();
                *n += 1;
                if *n > 1 {
                    report.reflagged += 1;
                }
            }
        }
        let heads: Vec<VehicleId> = step.clusters.keys().copied().collect();
        let lib_out = epc_round(&mut lib_epc, &heads, &step.ch_received, base, round, &config, fake_accuracy);
        let or_out = oracle_epc_round(&mut or_epc, &heads, &step.ch_received, base, &mut fake_accuracy);
        if (lib_out.selected.clone(), lib_out.accepted.clone(), lib_out.flagged.clone()) != or_out {
            report.mismatches.push(format!("round {round} epc: outcome {lib_out:?} vs {or_out:?}"));
        }
        report.skipped += lib_out.skipped.len();
        report.flagged += lib_out.flagged.len();

        for (tier, lib, oracle) in [("ch", &lib_ch, &or_ch), ("epc", &lib_epc, &or_epc)] {
            if lib.len() != oracle.len() {
                report.mismatches.push(format!("round {round} {tier}: {} vs {} records", lib.len(), oracle.len()));
            }
            for (v, rec) in lib {
                match oracle.get(v) {
                    Some(o) if same_record(rec, o) => {}
                    other => report
                        .mismatches
                        .push(format!("round {round} {tier} vehicle {v}: {rec:?} vs {other:?}")),
                }
            }
        }
        report.rounds += 1;
    }
    report
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check on a toy MLP.

/// Cross-entropy of one sample, written out directly from the layout
/// `[w1: in×h, b1: h, w2: h×c, b2: c]`.
pub fn toy_loss(params: &[f64], n_in: usize, n_h: usize, n_out: usize, x: &[f64], y: usize) -> f64 {
    let w1 = |i: usize, j: usize| params[i * n_h + j];
    let b1 = |j: usize| params[n_in * n_h + j];
    let o2 = n_in * n_h + n_h;
    let w2 = |j: usize, k: usize| params[o2 + j * n_out + k];
    let b2 = |k: usize| params[o2 + n_h * n_out + k];
    let h: Vec<f64> = (0..n_h)
        .map(|j| (b1(j) + (0..n_in).map(|i| x[i] * w1(i, j)).sum::<f64>()).tanh())
        .collect();
    let z: Vec<f64> = (0..n_out)
        .map(|k| b2(k) + (0..n_h).map(|j| h[j] * w2(j, k)).sum::<f64>())
        .collect();
    let log_norm = z.iter().map(|v| v.exp()).sum::<f64>().ln();
    log_norm - z[y]
}

pub struct GradientCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
    pub relative_error: f64,
    /// Worst entrywise `|a − n| / max(|a|, |n|, 1e-7)`.
    pub worst_entry: f64,
}

/// One SGD step of `local_train` on a single sample (batch 1, one epoch)
/// against central finite differences of [`toy_loss`].
pub fn gradient_check(seed: u64) -> GradientCheck {
    use vanet_hfl::model::{init_model, local_train, ClientData, Dataset, Layout, Split, TrainConfig};
    let (n_in, n_h, n_out) = (3, 1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n_in).map(|_| rng.random_range(-1.5..1.5)).collect();
    let y = 1;
    let mut features = x.clone();
    features.extend([0.0; 6]);
    let dataset = Dataset::new(n_in, n_out, features, vec![y, 0, 0], vec![Split::Train, Split::Validation, Split::Test])
        .expect("toy dataset");
    let mut params = init_model(Layout::mlp(n_in, n_h, n_out), seed).expect("toy model");
    // non-zero biases so every parameter has a non-trivial gradient
    for v in params.values.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let lr = 1e-3;
    let data = ClientData { owner: 0, indices: vec![0] };
    let config = TrainConfig { lr, epochs: 1, batch_size: 1 };
    let (_, update) = local_train(&params, &dataset, &data, &config, 1, seed).expect("train");
    let analytic: Vec<f64> = update.values.iter().map(|u| -u / lr).collect();

    let h = 1e-6;
    let numeric: Vec<f64> = (0..params.len())
        .map(|k| {
            let mut plus = params.values.clone();
            let mut minus = params.values.clone();
            plus[k] += h;
            minus[k] -= h;
            (toy_loss(&plus, n_in, n_h, n_out, &x, y) - toy_loss(&minus, n_in, n_h, n_out, &x, y)) / (2.0 * h)
        })
        .collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let relative_error = norm(&diff) / norm(&analytic).max(norm(&numeric));
    let worst_entry = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-7))
        .fold(0.0, f64::max);
    GradientCheck {
        analytic,
        numeric,
        relative_error,
        worst_entry,
    }
}
