//! Labeled branching random walk: one realization as a time-ordered event log.
//!
//! Every particle carries a label `(β₀; β₁,…,β_n)`. A particle lives an
//! `Exp(2N+θ)` lifetime and then either dies (probability `N/(2N+θ)`) or
//! gives birth. A birth retires the label and creates two successors: the
//! child `β∨e` at `B^β + W^β` and the continuing particle `β∨(1−e)` at `B^β`.
//! Dead lineages schedule nothing, so only finitely many labels are ever
//! materialized.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{sample_displacement, Displacement, LatticeConfig, Site};
use crate::rng::seeded;

pub const DEFAULT_EVENT_CAP: u64 = 100_000_000;

/// A particle label: ancestor index plus the binary descent word.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label {
    pub ancestor: u32,
    pub word: Vec<u8>,
}

impl Label {
    pub fn root(ancestor: u32) -> Label {
        Label {
            ancestor,
            word: Vec::new(),
        }
    }

    pub fn new(ancestor: u32, word: &[u8]) -> Label {
        assert!(word.iter().all(|&b| b <= 1), "label words are binary");
        Label {
            ancestor,
            word: word.to_vec(),
        }
    }

    pub fn depth(&self) -> usize {
        self.word.len()
    }

    /// Drops the last bit; a root label has no parent.
    pub fn parent(&self) -> Option<Label> {
        if self.word.is_empty() {
            return None;
        }
        Some(Label {
            ancestor: self.ancestor,
            word: self.word[..self.word.len() - 1].to_vec(),
        })
    }

    pub fn child(&self, bit: u8) -> Label {
        assert!(bit <= 1, "label words are binary");
        let mut word = self.word.clone();
        word.push(bit);
        Label {
            ancestor: self.ancestor,
            word,
        }
    }

    /// Longest common prefix, or `None` when the ancestors differ.
    pub fn meet(&self, other: &Label) -> Option<Label> {
        if self.ancestor != other.ancestor {
            return None;
        }
        let common = self
            .word
            .iter()
            .zip(other.word.iter())
            .take_while(|(a, b)| a == b)
            .count();
        Some(Label {
            ancestor: self.ancestor,
            word: self.word[..common].to_vec(),
        })
    }

    pub fn bitstring(&self) -> String {
        self.word.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }
}

pub fn label_parent(beta: &Label) -> Option<Label> {
    beta.parent()
}
pub fn label_child(beta: &Label, bit: u8) -> Label {
    beta.child(bit)
}
pub fn label_meet(beta: &Label, gamma: &Label) -> Option<Label> {
    beta.meet(gamma)
}
pub fn label_depth(beta: &Label) -> usize {
    beta.depth()
}

/// Index of a materialized label in the log's arena.
pub type LabelId = u32;
pub const NO_LABEL: LabelId = LabelId::MAX;
pub const NO_EVENT: u32 = u32::MAX;

/// Per-label data: genealogy pointers, position `B^β`, and lifetime window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelNode {
    pub parent: LabelId,
    pub ancestor: u32,
    pub bit: u8,
    pub depth: u32,
    pub site: Site,
    /// `T_{πβ}`, the time the label came into existence.
    pub birth_time: f64,
    /// `T_β` if the clock rang before the horizon, else infinity.
    pub end_time: f64,
    /// Index of the event at `T_β`, or `NO_EVENT`.
    pub event: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Death,
    Birth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub label: LabelId,
    pub kind: EventKind,
    /// `W^β`. Drawn for deaths too, since the collision term probes
    /// `B^β + W^β` on every event of a live lineage.
    pub displacement: Displacement,
    /// `e_β`; meaningful for births only.
    pub child_bit: u8,
    /// `(β∨e, β∨(1−e))` for a birth.
    pub successors: Option<(LabelId, LabelId)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub config: LatticeConfig,
    pub initial_sites: Vec<(Site, u32)>,
    pub horizon: f64,
    pub events: Vec<Event>,
    pub seed: u64,
    pub nodes: Vec<LabelNode>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenealogyError {
    #[error("initial particle set is empty")]
    EmptyInitial,
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("projected event count {projected:.3e} exceeds the cap {cap}")]
    CapExceeded { projected: f64, cap: u64 },
    #[error("time {t} lies outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
}

#[derive(Clone, Copy, Debug)]
pub struct GenerateOptions {
    pub event_cap: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            event_cap: DEFAULT_EVENT_CAP,
        }
    }
}

/// Expected number of events `M·(2N+θ)·t·e^{θ⁺t}` used by the memory guard.
pub fn projected_events(cfg: &LatticeConfig, initial: usize, t_max: f64) -> f64 {
    initial as f64 * cfg.event_rate() * t_max * (cfg.theta().max(0.0) * t_max).exp()
}

#[derive(PartialEq)]
struct Pending {
    time: f64,
    id: LabelId,
}

impl Eq for Pending {}

impl Ord for Pending {
    // Reversed so the max-heap pops the earliest clock; exact ties go to the older label.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn generate(
    cfg: &LatticeConfig,
    initial: &[Site],
    t_max: f64,
    seed: u64,
) -> Result<EventLog, GenealogyError> {
    generate_with(cfg, initial, t_max, seed, GenerateOptions::default())
}

pub fn generate_with(
    cfg: &LatticeConfig,
    initial: &[Site],
    t_max: f64,
    seed: u64,
    opts: GenerateOptions,
) -> Result<EventLog, GenealogyError> {
    if initial.is_empty() {
        return Err(GenealogyError::EmptyInitial);
    }
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(GenealogyError::BadHorizon(t_max));
    }
    let projected = projected_events(cfg, initial.len(), t_max);
    if projected > opts.event_cap as f64 {
        return Err(GenealogyError::CapExceeded {
            projected,
            cap: opts.event_cap,
        });
    }

    let mut rng = seeded(seed);
    let rate = cfg.event_rate();
    let p_death = cfg.death_probability();
    let expect = projected.min(opts.event_cap as f64).min(1e6) as usize;
    let mut nodes: Vec<LabelNode> = Vec::with_capacity(initial.len() + 2 * expect);
    let mut events: Vec<Event> = Vec::with_capacity(expect + expect / 4);
    let mut heap = BinaryHeap::with_capacity(initial.len() * 2);

    let spawn = |nodes: &mut Vec<LabelNode>,
                     heap: &mut BinaryHeap<Pending>,
                     rng: &mut crate::rng::SimRng,
                     node: LabelNode| {
        let id = nodes.len() as LabelId;
        let lifetime: f64 = Exp1.sample(rng);
        let ring = node.birth_time + lifetime / rate;
        nodes.push(node);
        if ring <= t_max {
            heap.push(Pending { time: ring, id });
        }
    };

    let initial_sites: Vec<(Site, u32)> = initial
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, i as u32 + 1))
        .collect();
    for &(site, ancestor) in &initial_sites {
        spawn(
            &mut nodes,
            &mut heap,
            &mut rng,
            LabelNode {
                parent: NO_LABEL,
                ancestor,
                bit: 0,
                depth: 0,
                site,
                birth_time: 0.0,
                end_time: f64::INFINITY,
                event: NO_EVENT,
            },
        );
    }

    while let Some(Pending { time, id }) = heap.pop() {
        if events.len() as u64 >= opts.event_cap {
            return Err(GenealogyError::CapExceeded {
                projected: events.len() as f64 + heap.len() as f64 + 1.0,
                cap: opts.event_cap,
            });
        }
        let u: f64 = rng.random();
        let kind = if u < p_death {
            EventKind::Death
        } else {
            EventKind::Birth
        };
        let displacement = sample_displacement(cfg, &mut rng);
        let child_bit: u8 = rng.random_range(0..2);
        let event_index = events.len() as u32;
        let (site, ancestor, depth) = {
            let n = &mut nodes[id as usize];
            n.end_time = time;
            n.event = event_index;
            (n.site, n.ancestor, n.depth)
        };
        let successors = match kind {
            EventKind::Death => None,
            EventKind::Birth => {
                let child_id = nodes.len() as LabelId;
                spawn(
                    &mut nodes,
                    &mut heap,
                    &mut rng,
                    LabelNode {
                        parent: id,
                        ancestor,
                        bit: child_bit,
                        depth: depth + 1,
                        site: site.offset(&displacement),
                        birth_time: time,
                        end_time: f64::INFINITY,
                        event: NO_EVENT,
                    },
                );
                let cont_id = nodes.len() as LabelId;
                spawn(
                    &mut nodes,
                    &mut heap,
                    &mut rng,
                    LabelNode {
                        parent: id,
                        ancestor,
                        bit: 1 - child_bit,
                        depth: depth + 1,
                        site,
                        birth_time: time,
                        end_time: f64::INFINITY,
                        event: NO_EVENT,
                    },
                );
                Some((child_id, cont_id))
            }
        };
        events.push(Event {
            time,
            label: id,
            kind,
            displacement,
            child_bit,
            successors,
        });
    }

    Ok(EventLog {
        config: cfg.clone(),
        initial_sites,
        horizon: t_max,
        events,
        seed,
        nodes,
    })
}

impl EventLog {
    /// Reconstructs the full label of an arena entry.
    pub fn label(&self, id: LabelId) -> Label {
        let node = &self.nodes[id as usize];
        let mut word = vec![0u8; node.depth as usize];
        let mut cur = id;
        for slot in word.iter_mut().rev() {
            let n = &self.nodes[cur as usize];
            *slot = n.bit;
            cur = n.parent;
        }
        Label {
            ancestor: node.ancestor,
            word,
        }
    }

    /// `B^β` of an arena entry.
    pub fn site(&self, id: LabelId) -> Site {
        self.nodes[id as usize].site
    }

    pub fn initial_count(&self) -> usize {
        self.initial_sites.len()
    }

    /// The BRW population at time `t`: labels with `T_{πβ} <= t < T_β`.
    pub fn alive_at(&self, t: f64) -> Result<Vec<(Label, Site)>, GenealogyError> {
        Ok(self
            .alive_ids_at(t)?
            .into_iter()
            .map(|id| (self.label(id), self.site(id)))
            .collect())
    }

    pub fn alive_ids_at(&self, t: f64) -> Result<Vec<LabelId>, GenealogyError> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(GenealogyError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok(self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.birth_time <= t && t < n.end_time)
            .map(|(i, _)| i as LabelId)
            .collect())
    }

    pub fn alive_count_at(&self, t: f64) -> Result<usize, GenealogyError> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(GenealogyError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        let mut count = self.initial_count() as i64;
        for e in &self.events {
            if e.time > t {
                break;
            }
            count += match e.kind {
                EventKind::Birth => 1,
                EventKind::Death => -1,
            };
        }
        Ok(count as usize)
    }

    /// Line-oriented CSV dump of the events.
    pub fn to_csv(&self) -> String {
        let d = self.config.d();
        let mut out = String::new();
        out.push_str("time,ancestor,word,kind");
        for i in 1..=d {
            let _ = write!(out, ",site_{i}");
        }
        for i in 1..=d {
            let _ = write!(out, ",disp_{i}");
        }
        out.push_str(",child_bit\n");
        for e in &self.events {
            let node = &self.nodes[e.label as usize];
            let label = self.label(e.label);
            let kind = match e.kind {
                EventKind::Death => "death",
                EventKind::Birth => "birth",
            };
            let _ = write!(out, "{},{},{},{}", fmt_float(e.time), node.ancestor, label.bitstring(), kind);
            for c in node.site.coords(d) {
                let _ = write!(out, ",{c}");
            }
            for c in e.displacement.coords(d) {
                match e.kind {
                    EventKind::Birth => {
                        let _ = write!(out, ",{c}");
                    }
                    EventKind::Death => out.push(','),
                }
            }
            match e.kind {
                EventKind::Birth => {
                    let _ = writeln!(out, ",{}", e.child_bit);
                }
                EventKind::Death => out.push_str(",\n"),
            }
        }
        out
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::make_config;

    #[test]
    fn label_algebra() {
        let b = Label::new(7, &[0, 1, 1]);
        assert_eq!(label_parent(&b), Some(Label::new(7, &[0, 1])));
        assert_eq!(label_parent(&Label::root(7)), None);
        assert_eq!(label_child(&Label::new(7, &[0, 1]), 1), b);
        assert_eq!(label_depth(&b), 3);
        assert_eq!(
            label_meet(&Label::new(3, &[0, 1, 0]), &Label::new(3, &[0, 0, 1])),
            Some(Label::new(3, &[0]))
        );
        assert_eq!(label_meet(&Label::new(1, &[0]), &Label::new(2, &[0])), None);
        assert_eq!(b.meet(&b), Some(b.clone()));
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = make_config(5, 50, 0.0).unwrap();
        assert_eq!(generate(&cfg, &[], 1.0, 1), Err(GenealogyError::EmptyInitial));
        let many = vec![Site::ORIGIN; 1000];
        let err = generate_with(&cfg, &many, 10.0, 1, GenerateOptions { event_cap: 1000 }).unwrap_err();
        assert!(matches!(err, GenealogyError::CapExceeded { .. }));
    }

    #[test]
    fn log_structure() {
        let cfg = make_config(5, 50, 1.0).unwrap();
        let initial = [Site::ORIGIN, Site::from_slice(&[5, 0, 0, 0, 0])];
        let log = generate(&cfg, &initial, 1.0, 42).unwrap();
        assert!(!log.events.is_empty());
        for w in log.events.windows(2) {
            assert!(w[0].time < w[1].time);
        }
        for (i, e) in log.events.iter().enumerate() {
            let node = &log.nodes[e.label as usize];
            assert_eq!(node.event as usize, i);
            assert!(node.birth_time < e.time);
            if let Some((c, k)) = e.successors {
                let (cn, kn) = (&log.nodes[c as usize], &log.nodes[k as usize]);
                assert_eq!(cn.site, node.site.offset(&e.displacement));
                assert_eq!(kn.site, node.site);
                assert_eq!(cn.bit, e.child_bit);
                assert_eq!(kn.bit, 1 - e.child_bit);
                assert_eq!(log.label(c), log.label(e.label).child(e.child_bit));
                // the parent's own event came strictly earlier
                if node.parent != NO_LABEL {
                    let pe = log.nodes[node.parent as usize].event as usize;
                    assert!(pe < i);
                }
            }
        }
        let alive = log.alive_at(0.0).unwrap();
        assert_eq!(alive.len(), 2);
        for t in [0.1, 0.5, 1.0] {
            assert_eq!(log.alive_at(t).unwrap().len(), log.alive_count_at(t).unwrap());
        }
        assert!(log.alive_at(1.5).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = make_config(5, 50, 0.0).unwrap();
        let a = generate(&cfg, &[Site::ORIGIN], 1.0, 9).unwrap();
        let b = generate(&cfg, &[Site::ORIGIN], 1.0, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn csv_header_is_fixed() {
        let cfg = make_config(4, 20, 0.0).unwrap();
        let log = generate(&cfg, &[Site::ORIGIN], 0.2, 3).unwrap();
        let csv = log.to_csv();
        assert_eq!(
            csv.lines().next().unwrap(),
            "time,ancestor,word,kind,site_1,site_2,site_3,site_4,disp_1,disp_2,disp_3,disp_4,child_bit"
        );
        assert_eq!(csv.lines().count(), log.events.len() + 1);
        for line in csv.lines().skip(1) {
            assert_eq!(line.split(',').count(), 13);
        }
    }
}
