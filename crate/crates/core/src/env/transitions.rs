//! Turns a finished episode log into replay tuples.
//!
//! A holding decision at stop j pays off one stop later: the decision's
//! reward uses the headways realized at stop j+1, which in turn need both
//! the bus's own completion there and its follower's. Tuples therefore wait
//! in a pending table keyed by the stop whose completions they still need,
//! and emit the moment the last ingredient lands. Decisions at the trip's
//! final intermediate stop instead settle against that same stop's realized
//! headways, with a terminal sentinel as next state and done set.
//!
//! Running this over a log replays exactly the information the live episode
//! had, so resolved tuples match what an online assembler would have built.

use std::collections::BTreeMap;

use super::reward::reward_for_target;
use super::StateVector;
use crate::scenario::{Direction, STOP_COUNT};
use crate::sim::{EpisodeLog, EventRecord, RecordKind};

/// One replay tuple. Actions are kept in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: StateVector,
    pub action: f64,
    pub reward: f64,
    pub next_state: StateVector,
    pub done: bool,
}

#[derive(Debug)]
struct Pending {
    state: StateVector,
    action: f64,
    done: bool,
    realized_h_f: Option<f64>,
    realized_h_b: Option<f64>,
    next_state: Option<StateVector>,
}

impl Pending {
    fn ready(&self) -> bool {
        self.realized_h_f.is_some() && self.realized_h_b.is_some() && self.next_state.is_some()
    }
}

#[derive(Debug)]
pub struct AssemblyOutcome {
    /// Emission order is deterministic for a given log.
    pub transitions: Vec<Transition>,
    /// Number of decision events seen; always equals `transitions.len()`.
    pub decision_count: usize,
    pub cumulative_reward: f64,
    /// Tuples force-resolved with the target headway at the end of the log.
    pub flush_warnings: usize,
}

/// Pending tuples are keyed by (bus, direction, stop whose completions
/// they await); several can share a key near the end of a trip.
type PendingKey = (usize, usize, usize);

pub fn resolve_transitions(log: &EpisodeLog) -> AssemblyOutcome {
    let h_star = log.h_star;
    let mut pending: BTreeMap<PendingKey, Vec<Pending>> = BTreeMap::new();
    let mut tails: Vec<Option<(usize, f64)>> = vec![None; 2 * STOP_COUNT];
    let mut out = AssemblyOutcome {
        transitions: Vec::new(),
        decision_count: 0,
        cumulative_reward: 0.0,
        flush_warnings: 0,
    };

    let emit = |p: Pending, out: &mut AssemblyOutcome| {
        let r = reward_for_target(
            p.realized_h_f.expect("emitted tuple is fully resolved"),
            p.realized_h_b.expect("emitted tuple is fully resolved"),
            h_star,
        );
        out.cumulative_reward += r;
        out.transitions.push(Transition {
            state: p.state,
            action: p.action,
            reward: r,
            next_state: p.next_state.expect("emitted tuple is fully resolved"),
            done: p.done,
        });
    };

    for record in &log.records {
        if record.kind != RecordKind::ServiceComplete {
            continue;
        }
        out.decision_count += 1;
        let EventRecord { time_s: y, bus_id, direction, stop, .. } = *record;
        let h_f = record.h_f.expect("service completions carry h_f");
        let dir = direction.index();

        // The gap this completion creates resolves the backward headway of
        // whoever completed this stop last.
        let tail = &mut tails[dir * STOP_COUNT + stop];
        if let Some((prev_bus, prev_y)) = tail.replace((bus_id, y)) {
            if let Some(list) = pending.get_mut(&(prev_bus, dir, stop)) {
                for p in list.iter_mut() {
                    if p.realized_h_b.is_none() {
                        p.realized_h_b = Some(y - prev_y);
                    }
                }
                let mut kept = Vec::new();
                for p in list.drain(..) {
                    if p.ready() {
                        emit(p, &mut out);
                    } else {
                        kept.push(p);
                    }
                }
                if kept.is_empty() {
                    pending.remove(&(prev_bus, dir, stop));
                } else {
                    *pending.get_mut(&(prev_bus, dir, stop)).unwrap() = kept;
                }
            }
        }

        let state_now = StateVector::from_decision(
            bus_id,
            stop,
            direction,
            y,
            h_f,
            record.h_b_est.expect("service completions carry h_b_est"),
            record.seg_speed_norm.expect("service completions carry segment speed"),
            h_star,
        );

        // This bus's previous decision was waiting for this very completion
        // to learn its realized forward headway and next state.
        if let Some(list) = pending.get_mut(&(bus_id, dir, stop)) {
            for p in list.iter_mut() {
                if p.next_state.is_none() {
                    p.realized_h_f = Some(h_f);
                    p.next_state = Some(state_now);
                }
            }
            let mut kept = Vec::new();
            for p in list.drain(..) {
                if p.ready() {
                    emit(p, &mut out);
                } else {
                    kept.push(p);
                }
            }
            if kept.is_empty() {
                pending.remove(&(bus_id, dir, stop));
            } else {
                *pending.get_mut(&(bus_id, dir, stop)).unwrap() = kept;
            }
        }

        // The day's final trip per direction never gets a follower; its
        // backward gaps settle to the target immediately.
        let preset_h_b = if record.is_last_trip { Some(h_star) } else { None };
        let action = record.hold_s.expect("service completions carry the hold");
        let fresh = if record.is_final_stop {
            Pending {
                state: state_now,
                action,
                done: true,
                realized_h_f: Some(h_f),
                realized_h_b: preset_h_b,
                next_state: Some(StateVector::terminal_sentinel(bus_id, direction, y)),
            }
        } else {
            Pending {
                state: state_now,
                action,
                done: false,
                realized_h_f: None,
                realized_h_b: preset_h_b,
                next_state: None,
            }
        };
        if fresh.ready() {
            emit(fresh, &mut out);
        } else {
            let await_stop = if record.is_final_stop { stop } else { direction.next_stop(stop) };
            pending.entry((bus_id, dir, await_stop)).or_default().push(fresh);
        }
    }

    // Whatever still waits for a follower at the end of the day resolves
    // against the target headway; a complete log only ever lacks h_b here.
    for (_, list) in std::mem::take(&mut pending) {
        for mut p in list {
            out.flush_warnings += 1;
            if p.realized_h_b.is_none() {
                p.realized_h_b = Some(h_star);
            }
            if p.realized_h_f.is_none() {
                p.realized_h_f = Some(h_star);
            }
            if p.next_state.is_none() {
                p.next_state = Some(StateVector::terminal_sentinel(
                    p.state.bus_id,
                    p.state.direction,
                    p.state.time_period as f64 * 3600.0,
                ));
            }
            emit(p, &mut out);
        }
    }

    debug_assert_eq!(out.transitions.len(), out.decision_count);
    out
}

/// Builds the service-completion record a scripted trace needs; tests and
/// benchmarks assemble logs from these.
#[allow(clippy::too_many_arguments)]
pub fn scripted_completion(
    time_s: f64,
    bus_id: usize,
    direction: Direction,
    stop: usize,
    h_f: f64,
    h_b_est: f64,
    hold_s: f64,
    is_final_stop: bool,
    is_last_trip: bool,
) -> EventRecord {
    EventRecord {
        time_s,
        bus_id,
        direction,
        stop,
        kind: RecordKind::ServiceComplete,
        h_f: Some(h_f),
        h_b_est: Some(h_b_est),
        hold_s: Some(hold_s),
        board: 0,
        alight: 0,
        seg_speed_norm: Some(0.8),
        is_final_stop,
        is_last_trip,
        note: None,
    }
}
