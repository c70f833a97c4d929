//! Session schedules: which classes arrive when, and which rendered samples
//! serve as supports and queries.

use std::collections::{BTreeMap, BTreeSet};

use ifss_core::membank::ClassId;
use ifss_core::pipeline::ClassSamples;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::taxonomy::{render_sample, Taxonomy};
use crate::{mix_seed, BenchError, Result};

const SUPPORT: u64 = 1;
const QUERY: u64 = 2;

/// One rendered sample, identified by its class and render seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleRef {
    pub class_id: ClassId,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub label_space: Vec<ClassId>,
    pub support: Vec<SampleRef>,
    pub query: Vec<SampleRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub base_classes: usize,
    /// Incremental sessions after the base session.
    pub sessions: usize,
    pub shots: usize,
    pub base_support: usize,
    pub queries_per_class: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            base_classes: 8,
            sessions: 3,
            shots: 1,
            base_support: 24,
            queries_per_class: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionSchedule {
    pub sessions: Vec<Session>,
    pub shots: usize,
}

fn bad(msg: impl Into<String>) -> BenchError {
    BenchError::Schedule(msg.into())
}

/// Class order in which the taxonomy is consumed: groups take turns, so the
/// base session and every incremental session draw from as many groups as
/// possible.
fn interleaved_classes(tax: &Taxonomy, rng: &mut ChaCha8Rng) -> Vec<ClassId> {
    let mut per_group: Vec<Vec<ClassId>> = tax
        .groups
        .iter()
        .map(|g| tax.classes.iter().filter(|c| c.group == g.index).map(|c| c.class_id).collect())
        .collect();
    for members in &mut per_group {
        members.shuffle(rng);
    }
    per_group.shuffle(rng);
    let rounds = per_group.iter().map(Vec::len).max().unwrap_or(0);
    (0..rounds)
        .flat_map(|r| per_group.iter().filter_map(move |m| m.get(r).copied()))
        .collect()
}

fn sample_refs(class_ids: &[ClassId], count: usize, role: u64, seed: u64) -> Vec<SampleRef> {
    class_ids
        .iter()
        .flat_map(|&c| {
            (0..count as u64).map(move |i| SampleRef {
                class_id: c,
                seed: mix_seed(seed, &[role, u64::from(c.0), i]),
            })
        })
        .collect()
}

/// Splits the taxonomy into a base session and `spec.sessions` incremental
/// sessions whose sizes differ by at most one and together use every
/// remaining class.
pub fn build_schedule(tax: &Taxonomy, spec: &ScheduleSpec, seed: u64) -> Result<SessionSchedule> {
    build_schedule_split(tax, spec, seed, seed)
}

/// Like [`build_schedule`], with the class split and the sample draws
/// seeded separately so repeated runs can share one split.
pub fn build_schedule_split(tax: &Taxonomy, spec: &ScheduleSpec, split_seed: u64, sample_seed: u64) -> Result<SessionSchedule> {
    let total = tax.classes.len();
    if spec.base_classes == 0 || spec.shots == 0 || spec.base_support == 0 || spec.queries_per_class == 0 {
        return Err(bad("base classes, shots, base support and queries must all be positive"));
    }
    let remaining = total.saturating_sub(spec.base_classes);
    if spec.base_classes > total || remaining < spec.sessions {
        return Err(bad(format!(
            "{total} classes cannot supply {} base classes and {} non-empty sessions",
            spec.base_classes, spec.sessions
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(split_seed, &[0x5c4e]));
    let order = interleaved_classes(tax, &mut rng);
    let mut spaces = vec![order[..spec.base_classes].to_vec()];
    let mut next = spec.base_classes;
    for s in 0..spec.sessions {
        let size = remaining / spec.sessions + usize::from(s < remaining % spec.sessions);
        spaces.push(order[next..next + size].to_vec());
        next += size;
    }
    let mut sessions = Vec::with_capacity(spaces.len());
    let mut seen: Vec<ClassId> = Vec::new();
    for (i, mut space) in spaces.into_iter().enumerate() {
        space.sort();
        seen.extend(&space);
        seen.sort();
        let count = if i == 0 { spec.base_support } else { spec.shots };
        sessions.push(Session {
            support: sample_refs(&space, count, SUPPORT, sample_seed),
            query: sample_refs(&seen, spec.queries_per_class, QUERY, sample_seed),
            label_space: space,
        });
    }
    let schedule = SessionSchedule {
        sessions,
        shots: spec.shots,
    };
    schedule.validate()?;
    Ok(schedule)
}

impl SessionSchedule {
    /// Classes queried at `session`: the union of all label spaces so far.
    pub fn query_space(&self, session: usize) -> Vec<ClassId> {
        let mut all: Vec<ClassId> = self.sessions[..=session].iter().flat_map(|s| s.label_space.iter().copied()).collect();
        all.sort();
        all
    }

    /// Session in which `class` was introduced.
    pub fn session_of(&self, class: ClassId) -> Option<usize> {
        self.sessions.iter().position(|s| s.label_space.contains(&class))
    }

    /// Checks disjoint label spaces, the union rule for queries, exact shot
    /// counts after the base session, and that no support doubles as a query.
    pub fn validate(&self) -> Result<()> {
        if self.sessions.is_empty() {
            return Err(bad("no sessions"));
        }
        let mut owner: BTreeMap<ClassId, usize> = BTreeMap::new();
        let mut supports: BTreeSet<SampleRef> = BTreeSet::new();
        for (i, s) in self.sessions.iter().enumerate() {
            if s.label_space.is_empty() {
                return Err(bad(format!("session {i} has an empty label space")));
            }
            for &c in &s.label_space {
                if let Some(j) = owner.insert(c, i) {
                    return Err(bad(format!("class {c} appears in sessions {j} and {i}")));
                }
            }
            let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
            for r in &s.support {
                if !s.label_space.contains(&r.class_id) {
                    return Err(bad(format!("session {i} support holds foreign class {}", r.class_id)));
                }
                *counts.entry(r.class_id).or_default() += 1;
                supports.insert(*r);
            }
            for &c in &s.label_space {
                let n = counts.get(&c).copied().unwrap_or(0);
                if n == 0 || (i > 0 && n != self.shots) {
                    return Err(bad(format!("session {i} class {c} has {n} supports, shots = {}", self.shots)));
                }
            }
            let queried: BTreeSet<ClassId> = s.query.iter().map(|r| r.class_id).collect();
            let expected: BTreeSet<ClassId> = self.query_space(i).into_iter().collect();
            if queried != expected {
                return Err(bad(format!("session {i} query classes differ from the union of label spaces")));
            }
        }
        if let Some(r) = self.sessions.iter().flat_map(|s| &s.query).find(|r| supports.contains(r)) {
            return Err(bad(format!("sample {} of class {} is both support and query", r.seed, r.class_id)));
        }
        Ok(())
    }
}

/// Renders sample references, grouped per class in first-seen order.
pub fn render_refs(tax: &Taxonomy, refs: &[SampleRef]) -> Result<Vec<ClassSamples>> {
    let mut out: Vec<ClassSamples> = Vec::new();
    for r in refs {
        let class = tax.class(r.class_id).ok_or_else(|| bad(format!("class {} is not in the taxonomy", r.class_id)))?;
        let sample = render_sample(class, r.seed)?;
        match out.iter_mut().find(|c| c.class_id == r.class_id) {
            Some(c) => c.samples.push(sample),
            None => out.push(ClassSamples {
                class_id: r.class_id,
                samples: vec![sample],
            }),
        }
    }
    Ok(out)
}
