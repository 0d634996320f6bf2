//! Deterministic message-level simulator: exact per-rank byte accounting for
//! collectives, plus an event-driven two-stream timeline for studying
//! compute/communication overlap under overdecomposition.
//!
//! Collectives are counted analytically at the ring bandwidth lower bound
//! rather than step-simulated; the analytic volume models assume the same
//! bound, which is what makes the cross-check between the two exact. Time is
//! abstract (elements per unit, bytes per unit) — ordering and ratio
//! properties are in scope, wall-clock calibration is not.

use crate::exact::{frac, rat, Exact, Rat};
use crate::volume::{all_gather_volume, all_to_all_volume, ring_allreduce_volume};
use num_traits::Zero;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("collective group must be nonempty")]
    EmptyGroup,
    #[error("event bytes {got} inconsistent with {kind:?} formula value {expect} for group size {group}")]
    InconsistentBytes {
        kind: CollectiveKind,
        group: usize,
        got: Exact,
        expect: Exact,
    },
    #[error("shard work lists differ in structure: {left} vs {right} items")]
    ShardMismatch { left: usize, right: usize },
}

/// The collective operations the simulated algorithms issue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum CollectiveKind {
    AllReduceRow,
    AllReduceCol,
    AllToAllExpert,
    AllGatherTensor,
    AllReduceData,
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

fn bytes_per_rank_for(kind: CollectiveKind, buffer_bytes: Rat, group_size: usize) -> Rat {
    let s = group_size as u64;
    match kind {
        CollectiveKind::AllReduceRow
        | CollectiveKind::AllReduceCol
        | CollectiveKind::AllReduceData => ring_allreduce_volume(buffer_bytes, s),
        CollectiveKind::AllToAllExpert => all_to_all_volume(buffer_bytes, s),
        // buffer_bytes is the gathered size for all-gathers
        CollectiveKind::AllGatherTensor => all_gather_volume(buffer_bytes, s),
    }
}

/// One collective call: the participating ranks, the per-rank volume it
/// contributes, and a tag naming the issuing site (layer id, pass, shard).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CollectiveEvent {
    pub kind: CollectiveKind,
    pub group: Vec<u64>,
    /// Input buffer bytes (gathered size for all-gathers).
    pub buffer_bytes: Exact,
    pub bytes_per_rank: Exact,
    pub tag: String,
}

impl CollectiveEvent {
    /// Build an event with `bytes_per_rank` derived from the kind's formula.
    pub fn new(
        kind: CollectiveKind,
        group: Vec<u64>,
        buffer_bytes: Rat,
        tag: impl Into<String>,
    ) -> Result<Self, SimError> {
        if group.is_empty() {
            return Err(SimError::EmptyGroup);
        }
        let bytes = bytes_per_rank_for(kind, buffer_bytes, group.len());
        Ok(CollectiveEvent {
            kind,
            group,
            buffer_bytes: Exact(buffer_bytes),
            bytes_per_rank: Exact(bytes),
            tag: tag.into(),
        })
    }
}

/// Exact per-rank byte ledger plus the ordered event log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VolumeReport {
    /// rank -> kind -> total bytes
    pub per_rank: BTreeMap<u64, BTreeMap<CollectiveKind, Exact>>,
    pub totals: BTreeMap<CollectiveKind, Exact>,
    pub events: Vec<CollectiveEvent>,
}

impl VolumeReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rank_bytes(&self, rank: u64, kind: CollectiveKind) -> Rat {
        self.per_rank
            .get(&rank)
            .and_then(|m| m.get(&kind))
            .map(|e| e.0)
            .unwrap_or_else(Rat::zero)
    }

    /// Total bytes a rank sends+receives across all collective kinds.
    pub fn rank_total(&self, rank: u64) -> Rat {
        self.per_rank
            .get(&rank)
            .map(|m| m.values().map(|e| e.0).sum())
            .unwrap_or_else(Rat::zero)
    }

    /// Events whose group contains `rank`.
    pub fn events_for_rank(&self, rank: u64) -> impl Iterator<Item = &CollectiveEvent> {
        self.events.iter().filter(move |e| e.group.contains(&rank))
    }

    /// One event per line, each a JSON object {kind, group, bytes_per_rank,
    /// tag}.
    pub fn export_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            kind: CollectiveKind,
            group: &'a [u64],
            bytes_per_rank: Exact,
            tag: &'a str,
        }
        for e in &self.events {
            let line = Line {
                kind: e.kind,
                group: &e.group,
                bytes_per_rank: e.bytes_per_rank,
                tag: &e.tag,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Count one collective: every member rank's ledger for the event's kind
/// grows by `bytes_per_rank`, and the event is appended to the log. Events
/// whose bytes contradict their kind's formula are rejected.
pub fn run_collective(event: CollectiveEvent, report: &mut VolumeReport) -> Result<(), SimError> {
    if event.group.is_empty() {
        return Err(SimError::EmptyGroup);
    }
    let expect = bytes_per_rank_for(event.kind, event.buffer_bytes.0, event.group.len());
    if event.bytes_per_rank.0 != expect {
        return Err(SimError::InconsistentBytes {
            kind: event.kind,
            group: event.group.len(),
            got: event.bytes_per_rank,
            expect: Exact(expect),
        });
    }
    for &rank in &event.group {
        let slot = report
            .per_rank
            .entry(rank)
            .or_default()
            .entry(event.kind)
            .or_insert_with(Exact::zero);
        *slot += event.bytes_per_rank;
    }
    let total = report
        .totals
        .entry(event.kind)
        .or_insert_with(Exact::zero);
    *total += Exact(rat(event.group.len() as i128)) * event.bytes_per_rank;
    report.events.push(event);
    Ok(())
}

/// Abstract execution rates: compute in elements per time unit, network in
/// bytes per time unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub compute_rate: Rat,
    pub bandwidth: Rat,
}

impl CostModel {
    pub fn unit() -> Self {
        CostModel {
            compute_rate: rat(1),
            bandwidth: rat(1),
        }
    }

    fn compute_time(&self, elems: Rat) -> Rat {
        elems / self.compute_rate
    }

    fn comm_time(&self, bytes: Rat) -> Rat {
        bytes / self.bandwidth
    }
}

/// One layer's work: a compute phase followed by a communication phase.
/// A trailing item with zero compute models the data-parallel gradient
/// all-reduce after the last backward layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkItem {
    pub compute_elems: Rat,
    pub comm_bytes: Rat,
    pub tag: String,
}

impl WorkItem {
    pub fn new(compute_elems: Rat, comm_bytes: Rat, tag: impl Into<String>) -> Self {
        WorkItem {
            compute_elems,
            comm_bytes,
            tag: tag.into(),
        }
    }

    /// Halve both costs, for splitting a batch shard in two.
    pub fn halved(&self) -> WorkItem {
        WorkItem {
            compute_elems: self.compute_elems * frac(1, 2),
            comm_bytes: self.comm_bytes * frac(1, 2),
            tag: self.tag.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stream {
    Compute,
    Comm,
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stream::Compute => f.write_str("compute"),
            Stream::Comm => f.write_str("comm"),
        }
    }
}

/// One scheduled interval on a rank's compute or communication stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TimelineEvent {
    pub rank: u64,
    pub stream: Stream,
    pub tag: String,
    pub start: Exact,
    pub end: Exact,
}

/// A per-rank schedule in abstract time units. Events on one stream never
/// overlap; cross-stream overlap is the point.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Timeline {
    pub events: Vec<TimelineEvent>,
}

impl Timeline {
    /// Time from zero to the last event end.
    pub fn makespan(&self) -> Rat {
        self.events
            .iter()
            .map(|e| e.end.0)
            .max()
            .unwrap_or_else(Rat::zero)
    }

    /// Gaps on a rank's compute stream between its first start and last end.
    pub fn idle_time(&self, rank: u64) -> Rat {
        let mut spans: Vec<(Rat, Rat)> = self
            .events
            .iter()
            .filter(|e| e.rank == rank && e.stream == Stream::Compute && e.start.0 != e.end.0)
            .map(|e| (e.start.0, e.end.0))
            .collect();
        spans.sort();
        let mut idle = Rat::zero();
        for w in spans.windows(2) {
            let gap = w[1].0 - w[0].1;
            if gap > Rat::zero() {
                idle += gap;
            }
        }
        idle
    }

    /// CSV rows `rank,stream,tag,start,end`.
    pub fn export_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "rank,stream,tag,start,end")?;
        for e in &self.events {
            writeln!(
                out,
                "{},{},{},{},{}",
                e.rank,
                e.stream,
                e.tag,
                Exact(e.start.0),
                Exact(e.end.0)
            )?;
        }
        Ok(())
    }
}

/// Blocking baseline: compute and communication alternate on one logical
/// stream, each phase starting when the previous ends.
pub fn serialize_schedule(work: &[WorkItem], cost: &CostModel, ranks: &[u64]) -> Timeline {
    let mut timeline = Timeline::default();
    for &rank in ranks {
        let mut t = Rat::zero();
        for item in work {
            let ct = cost.compute_time(item.compute_elems);
            timeline.events.push(TimelineEvent {
                rank,
                stream: Stream::Compute,
                tag: item.tag.clone(),
                start: Exact(t),
                end: Exact(t + ct),
            });
            t += ct;
            let mt = cost.comm_time(item.comm_bytes);
            timeline.events.push(TimelineEvent {
                rank,
                stream: Stream::Comm,
                tag: item.tag.clone(),
                start: Exact(t),
                end: Exact(t + mt),
            });
            t += mt;
        }
    }
    timeline
}

/// Overdecomposed schedule: the two batch shards' work is enqueued
/// round-robin (shard A compute, shard A comm, shard B compute, shard B
/// comm, next layer ...) onto dedicated compute and communication streams.
/// Layer `l` compute of a shard waits for that shard's layer `l-1`
/// communication; each stream runs its queue in order.
pub fn schedule_overdecomposed(
    shard_a: &[WorkItem],
    shard_b: &[WorkItem],
    cost: &CostModel,
    ranks: &[u64],
) -> Result<Timeline, SimError> {
    if shard_a.len() != shard_b.len() {
        return Err(SimError::ShardMismatch {
            left: shard_a.len(),
            right: shard_b.len(),
        });
    }
    let mut timeline = Timeline::default();
    for &rank in ranks {
        let mut compute_free = Rat::zero();
        let mut comm_free = Rat::zero();
        // per-shard completion time of the previous layer's comm
        let mut comm_done = [Rat::zero(), Rat::zero()];
        for layer in 0..shard_a.len() {
            for (s, item) in [(0usize, &shard_a[layer]), (1, &shard_b[layer])] {
                let shard_name = if s == 0 { "a" } else { "b" };
                let start = compute_free.max(comm_done[s]);
                let end = start + cost.compute_time(item.compute_elems);
                timeline.events.push(TimelineEvent {
                    rank,
                    stream: Stream::Compute,
                    tag: format!("{}/{}", item.tag, shard_name),
                    start: Exact(start),
                    end: Exact(end),
                });
                compute_free = end;
                let mstart = comm_free.max(end);
                let mend = mstart + cost.comm_time(item.comm_bytes);
                timeline.events.push(TimelineEvent {
                    rank,
                    stream: Stream::Comm,
                    tag: format!("{}/{}", item.tag, shard_name),
                    start: Exact(mstart),
                    end: Exact(mend),
                });
                comm_free = mend;
                comm_done[s] = mend;
            }
        }
    }
    Ok(timeline)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(kind: CollectiveKind, group: Vec<u64>, buf: i128) -> CollectiveEvent {
        CollectiveEvent::new(kind, group, rat(buf), "t").unwrap()
    }

    #[test]
    fn allreduce_byte_accounting() {
        let mut r = VolumeReport::new();
        run_collective(ev(CollectiveKind::AllReduceCol, vec![0, 1, 2, 3], 48), &mut r).unwrap();
        for rank in 0..4 {
            assert_eq!(r.rank_bytes(rank, CollectiveKind::AllReduceCol), rat(72));
        }
        assert_eq!(r.totals[&CollectiveKind::AllReduceCol], Exact(rat(288)));
    }

    #[test]
    fn singleton_collective_is_free() {
        let mut r = VolumeReport::new();
        run_collective(ev(CollectiveKind::AllReduceRow, vec![5], 1000), &mut r).unwrap();
        assert_eq!(r.rank_bytes(5, CollectiveKind::AllReduceRow), rat(0));
    }

    #[test]
    fn all_to_all_byte_accounting() {
        let mut r = VolumeReport::new();
        run_collective(
            ev(CollectiveKind::AllToAllExpert, (0..8).collect(), 64),
            &mut r,
        )
        .unwrap();
        assert_eq!(r.rank_bytes(0, CollectiveKind::AllToAllExpert), rat(56));
    }

    #[test]
    fn inconsistent_bytes_rejected() {
        let mut r = VolumeReport::new();
        let mut e = ev(CollectiveKind::AllReduceCol, vec![0, 1], 10);
        e.bytes_per_rank = Exact(rat(11));
        assert!(matches!(
            run_collective(e, &mut r),
            Err(SimError::InconsistentBytes { .. })
        ));
    }

    #[test]
    fn per_rank_totals_sum_to_grand_totals() {
        let mut r = VolumeReport::new();
        run_collective(ev(CollectiveKind::AllReduceCol, vec![0, 2], 8), &mut r).unwrap();
        run_collective(ev(CollectiveKind::AllReduceCol, vec![1, 3], 8), &mut r).unwrap();
        run_collective(ev(CollectiveKind::AllReduceData, vec![0, 1, 2, 3], 12), &mut r).unwrap();
        for kind in [CollectiveKind::AllReduceCol, CollectiveKind::AllReduceData] {
            let summed: Rat = (0..4).map(|rank| r.rank_bytes(rank, kind)).sum();
            assert_eq!(summed, r.totals[&kind].0);
        }
    }

    #[test]
    fn jsonl_export_shape() {
        let mut r = VolumeReport::new();
        run_collective(ev(CollectiveKind::AllReduceCol, vec![0, 1], 8), &mut r).unwrap();
        let mut buf = Vec::new();
        r.export_jsonl(&mut buf).unwrap();
        let line: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(line["kind"], "AllReduceCol");
        assert_eq!(line["bytes_per_rank"], 8);
        assert_eq!(line["group"], serde_json::json!([0, 1]));
    }

    #[test]
    fn serialized_makespan_sums_costs() {
        let work: Vec<WorkItem> = (0..5).map(|i| WorkItem::new(rat(3), rat(2), format!("l{i}"))).collect();
        let t = serialize_schedule(&work, &CostModel::unit(), &[0]);
        assert_eq!(t.makespan(), rat(25));
        let empty = serialize_schedule(&[], &CostModel::unit(), &[0]);
        assert_eq!(empty.makespan(), rat(0));
    }

    #[test]
    fn zero_comm_full_overlap() {
        let a: Vec<WorkItem> = (0..4).map(|i| WorkItem::new(rat(2), rat(0), format!("l{i}"))).collect();
        let t = schedule_overdecomposed(&a, &a, &CostModel::unit(), &[0]).unwrap();
        assert_eq!(t.makespan(), rat(16));
        assert_eq!(t.idle_time(0), rat(0));
    }

    #[test]
    fn zero_compute_serializes_comm() {
        let a: Vec<WorkItem> = (0..4).map(|i| WorkItem::new(rat(0), rat(3), format!("l{i}"))).collect();
        let t = schedule_overdecomposed(&a, &a, &CostModel::unit(), &[0]).unwrap();
        assert_eq!(t.makespan(), rat(24));
    }

    #[test]
    fn overlap_beats_blocking() {
        let full: Vec<WorkItem> = (0..3).map(|i| WorkItem::new(rat(4), rat(4), format!("l{i}"))).collect();
        let halves: Vec<WorkItem> = full.iter().map(WorkItem::halved).collect();
        let blocked = serialize_schedule(&full, &CostModel::unit(), &[0]).makespan();
        let overlapped = schedule_overdecomposed(&halves, &halves, &CostModel::unit(), &[0])
            .unwrap()
            .makespan();
        assert!(overlapped < blocked, "{overlapped} !< {blocked}");
    }

    #[test]
    fn csv_export_shape() {
        let work = vec![WorkItem::new(rat(1), rat(1), "l0")];
        let t = serialize_schedule(&work, &CostModel::unit(), &[0]);
        let mut buf = Vec::new();
        t.export_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("rank,stream,tag,start,end"));
        assert_eq!(lines.next(), Some("0,compute,l0,0,1"));
        assert_eq!(lines.next(), Some("0,comm,l0,1,2"));
    }
}
