//! Post-hoc analysis of episode logs: headway-collapse detection, where and
//! when it happens, reward-curve smoothing, and plot-ready CSV exports.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::scenario::{hour_of, Direction, ScenarioConfig, HOURS, STOP_COUNT};
use crate::sim::{EpisodeLog, RecordKind};

/// Two buses serving the same stop within this many seconds count as bunched.
/// A quarter of the 360 s target headway; callers may tighten or loosen it.
pub const DEFAULT_BUNCHING_THRESHOLD_SECS: f64 = 90.0;

/// Stops reported in the per-direction hotspot ranking.
pub const TOP_STOP_COUNT: usize = 7;

/// A pair of service completions at one stop closer together than the
/// detection threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BunchingEvent {
    /// Completion time of the trailing bus.
    pub time_s: f64,
    pub stop: usize,
    pub direction: Direction,
    pub leading_bus: usize,
    pub trailing_bus: usize,
    /// Seconds between the two completions. Always < the threshold used.
    pub gap_s: f64,
}

/// Scans service completions per (stop, direction) in log order and flags
/// every consecutive pair closer than `threshold_secs`. Larger thresholds
/// yield supersets: the pair structure is fixed, only the cut varies.
pub fn detect_bunching(log: &EpisodeLog, threshold_secs: f64) -> Vec<BunchingEvent> {
    let mut last: [[Option<(f64, usize)>; STOP_COUNT]; 2] = [[None; STOP_COUNT]; 2];
    let mut events = Vec::new();
    for record in &log.records {
        if record.kind != RecordKind::ServiceComplete {
            continue;
        }
        let slot = &mut last[record.direction.index()][record.stop];
        if let Some((prev_time, prev_bus)) = slot.replace((record.time_s, record.bus_id)) {
            let gap = record.time_s - prev_time;
            if gap < threshold_secs {
                events.push(BunchingEvent {
                    time_s: record.time_s,
                    stop: record.stop,
                    direction: record.direction,
                    leading_bus: prev_bus,
                    trailing_bus: record.bus_id,
                    gap_s: gap,
                });
            }
        }
    }
    events
}

/// Where and when bunching happened. All tables index `[direction.index()]`
/// first, and each direction's per-stop total equals its per-hour total
/// equals its event count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BunchingStats {
    pub per_stop: [[u64; STOP_COUNT]; 2],
    pub per_hour: [[u64; HOURS]; 2],
    /// `(stop, count)` ranked by count descending, ties by stop index.
    pub top_stops: [[(usize, u64); TOP_STOP_COUNT]; 2],
}

pub fn bunching_stats(events: &[BunchingEvent]) -> BunchingStats {
    let mut per_stop = [[0u64; STOP_COUNT]; 2];
    let mut per_hour = [[0u64; HOURS]; 2];
    for event in events {
        let d = event.direction.index();
        per_stop[d][event.stop] += 1;
        per_hour[d][hour_of(event.time_s)] += 1;
    }
    let mut top_stops = [[(0usize, 0u64); TOP_STOP_COUNT]; 2];
    for d in 0..2 {
        let mut ranked: Vec<(usize, u64)> = per_stop[d].iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        for (slot, entry) in top_stops[d].iter_mut().zip(ranked) {
            *slot = entry;
        }
    }
    BunchingStats { per_stop, per_hour, top_stops }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothKind {
    /// Trailing mean of the last ten points; shorter windows near the start.
    Rolling10,
    /// Exponentially weighted mean, weight 0.3 on the newest point, seeded
    /// with the first value.
    Ewm03,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("cannot smooth an empty series")]
pub struct EmptySeries;

/// Length-preserving smoothing.
pub fn smooth(series: &[f64], kind: SmoothKind) -> Result<Vec<f64>, EmptySeries> {
    if series.is_empty() {
        return Err(EmptySeries);
    }
    let out = match kind {
        SmoothKind::Rolling10 => (0..series.len())
            .map(|i| {
                let window = &series[i.saturating_sub(9)..=i];
                window.iter().sum::<f64>() / window.len() as f64
            })
            .collect(),
        SmoothKind::Ewm03 => {
            let mut state = series[0];
            series
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    if i > 0 {
                        state = 0.3 * x + 0.7 * state;
                    }
                    state
                })
                .collect()
        }
    };
    Ok(out)
}

/// Per-episode cumulative rewards with both smoothed companions. Spread over
/// evaluation rollouts lives in the evaluation report, not here; training
/// episodes are single rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardCurve {
    pub raw: Vec<f64>,
    pub rolling10: Vec<f64>,
    pub ewm03: Vec<f64>,
}

impl RewardCurve {
    pub fn from_rewards(raw: &[f64]) -> RewardCurve {
        if raw.is_empty() {
            return RewardCurve { raw: Vec::new(), rolling10: Vec::new(), ewm03: Vec::new() };
        }
        RewardCurve {
            raw: raw.to_vec(),
            rolling10: smooth(raw, SmoothKind::Rolling10).expect("raw is non-empty"),
            ewm03: smooth(raw, SmoothKind::Ewm03).expect("raw is non-empty"),
        }
    }
}

pub const TRAJECTORIES_CSV_HEADER: &str = "time_s,bus_id,position_m,stop,direction";
pub const BUNCHING_CSV_HEADER: &str = "time_s,stop,direction,leading_bus,trailing_bus,gap_s";
pub const BUNCHING_BY_HOUR_CSV_HEADER: &str = "hour,down,up";
pub const REWARD_CURVE_CSV_HEADER: &str = "episode,reward,rolling10,ewm03";

fn write_text(path: &Path, text: &str) -> std::io::Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(text.as_bytes())
}

/// One row per stop passage (dispatches, arrivals, departures, terminal
/// arrivals), positioned along the corridor for time-space plotting.
pub fn write_trajectories_csv(
    log: &EpisodeLog,
    scenario: &ScenarioConfig,
    path: &Path,
) -> std::io::Result<()> {
    let mut text = String::with_capacity(log.records.len() * 40);
    text.push_str(TRAJECTORIES_CSV_HEADER);
    text.push('\n');
    for record in &log.records {
        let keep = matches!(
            record.kind,
            RecordKind::Dispatch
                | RecordKind::ArriveStop
                | RecordKind::DepartStop
                | RecordKind::ArriveTerminal
        );
        if !keep {
            continue;
        }
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            record.time_s,
            record.bus_id,
            scenario.stops[record.stop].position_m,
            record.stop,
            record.direction,
        );
    }
    write_text(path, &text)
}

pub fn write_bunching_csv(events: &[BunchingEvent], path: &Path) -> std::io::Result<()> {
    let mut text = String::with_capacity(events.len() * 40 + 64);
    text.push_str(BUNCHING_CSV_HEADER);
    text.push('\n');
    for event in events {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{}",
            event.time_s,
            event.stop,
            event.direction,
            event.leading_bus,
            event.trailing_bus,
            event.gap_s,
        );
    }
    write_text(path, &text)
}

pub fn write_bunching_by_hour_csv(stats: &BunchingStats, path: &Path) -> std::io::Result<()> {
    let mut text = String::with_capacity(HOURS * 16 + 32);
    text.push_str(BUNCHING_BY_HOUR_CSV_HEADER);
    text.push('\n');
    for hour in 0..HOURS {
        let _ = writeln!(text, "{hour},{},{}", stats.per_hour[0][hour], stats.per_hour[1][hour]);
    }
    write_text(path, &text)
}

pub fn write_reward_curve_csv(curve: &RewardCurve, path: &Path) -> std::io::Result<()> {
    let mut text = String::with_capacity(curve.raw.len() * 48 + 48);
    text.push_str(REWARD_CURVE_CSV_HEADER);
    text.push('\n');
    for (i, &reward) in curve.raw.iter().enumerate() {
        let _ = writeln!(text, "{i},{reward},{},{}", curve.rolling10[i], curve.ewm03[i]);
    }
    write_text(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::scripted_completion;
    use crate::scenario::generate_synthetic_scenario;
    use crate::sim::{EpisodeTotals, EventRecord};
    use approx::assert_abs_diff_eq;

    fn completion(time_s: f64, bus_id: usize, direction: Direction, stop: usize) -> EventRecord {
        scripted_completion(time_s, bus_id, direction, stop, 360.0, 360.0, 0.0, false, false)
    }

    fn log_of(records: Vec<EventRecord>) -> EpisodeLog {
        EpisodeLog {
            records,
            totals: EpisodeTotals::default(),
            h_star: 360.0,
            max_hold: 180.0,
        }
    }

    #[test]
    fn well_spaced_completions_produce_no_events() {
        let mut records = Vec::new();
        for trip in 0..5 {
            for (bus, stop) in [(trip % 3, 5), (trip % 3, 6)] {
                records.push(completion(1000.0 + 360.0 * trip as f64, bus, Direction::Up, stop));
            }
        }
        let log = log_of(records);
        assert!(detect_bunching(&log, DEFAULT_BUNCHING_THRESHOLD_SECS).is_empty());
        assert!(detect_bunching(&log, 360.0).is_empty());
    }

    #[test]
    fn one_close_pair_yields_one_event() {
        let log = log_of(vec![
            completion(1000.0, 3, Direction::Up, 5),
            completion(1060.0, 4, Direction::Up, 5),
        ]);
        let events = detect_bunching(&log, 90.0);
        assert_eq!(events.len(), 1);
        let e = events[0];
        assert_eq!((e.stop, e.leading_bus, e.trailing_bus), (5, 3, 4));
        assert_abs_diff_eq!(e.gap_s, 60.0);
        assert_abs_diff_eq!(e.time_s, 1060.0);
    }

    #[test]
    fn three_buses_in_a_cluster_pair_up_consecutively() {
        let log = log_of(vec![
            completion(1000.0, 0, Direction::Down, 9),
            completion(1050.0, 1, Direction::Down, 9),
            completion(1100.0, 2, Direction::Down, 9),
        ]);
        let events = detect_bunching(&log, 90.0);
        assert_eq!(events.len(), 2);
        assert_eq!((events[0].leading_bus, events[0].trailing_bus), (0, 1));
        assert_eq!((events[1].leading_bus, events[1].trailing_bus), (1, 2));
    }

    #[test]
    fn same_gap_different_stop_or_direction_does_not_pair() {
        let log = log_of(vec![
            completion(1000.0, 0, Direction::Up, 5),
            completion(1030.0, 1, Direction::Up, 6),
            completion(1060.0, 2, Direction::Down, 5),
        ]);
        assert!(detect_bunching(&log, 90.0).is_empty());
    }

    #[test]
    fn threshold_is_monotone_on_a_synthetic_episode() {
        let scenario = generate_synthetic_scenario(42);
        let mut controller = crate::env::NoneController;
        let log = crate::sim::run_episode(&scenario, &mut controller, 42).unwrap();
        let mut previous: Option<Vec<BunchingEvent>> = None;
        for threshold in [30.0, 90.0, 180.0, 360.0] {
            let events = detect_bunching(&log, threshold);
            if let Some(smaller) = &previous {
                assert!(smaller.iter().all(|e| events.contains(e)));
                assert!(smaller.len() <= events.len());
            }
            previous = Some(events);
        }
    }

    #[test]
    fn empty_events_give_all_zero_tables() {
        let stats = bunching_stats(&[]);
        assert_eq!(stats.per_stop, [[0; STOP_COUNT]; 2]);
        assert_eq!(stats.per_hour, [[0; HOURS]; 2]);
        for d in 0..2 {
            for (rank, &(stop, count)) in stats.top_stops[d].iter().enumerate() {
                assert_eq!((stop, count), (rank, 0));
            }
        }
    }

    #[test]
    fn one_hot_stop_dominates_the_ranking() {
        let events: Vec<BunchingEvent> = (0..10)
            .map(|i| BunchingEvent {
                time_s: 2.0 * 3600.0 + 60.0 * i as f64,
                stop: 18,
                direction: Direction::Up,
                leading_bus: i,
                trailing_bus: i + 1,
                gap_s: 45.0,
            })
            .collect();
        let stats = bunching_stats(&events);
        assert_eq!(stats.top_stops[1][0], (18, 10));
        assert!(stats.top_stops[1][1..].iter().all(|&(_, c)| c == 0));
        assert_eq!(stats.per_hour[1][2], 10);
        assert_eq!(stats.per_hour[1].iter().sum::<u64>(), 10);
        assert_eq!(stats.per_stop[0], [0; STOP_COUNT]);
    }

    #[test]
    fn stats_conserve_event_counts_per_direction() {
        let scenario = generate_synthetic_scenario(7);
        let mut controller = crate::env::NoneController;
        let log = crate::sim::run_episode(&scenario, &mut controller, 7).unwrap();
        let events = detect_bunching(&log, 90.0);
        let stats = bunching_stats(&events);
        for direction in Direction::BOTH {
            let d = direction.index();
            let expected =
                events.iter().filter(|e| e.direction == direction).count() as u64;
            assert_eq!(stats.per_stop[d].iter().sum::<u64>(), expected);
            assert_eq!(stats.per_hour[d].iter().sum::<u64>(), expected);
        }
    }

    #[test]
    fn constant_series_is_a_fixed_point_of_both_smoothers() {
        let series = [4.25; 17];
        for kind in [SmoothKind::Rolling10, SmoothKind::Ewm03] {
            let smoothed = smooth(&series, kind).unwrap();
            assert_eq!(smoothed, series.to_vec());
        }
    }

    #[test]
    fn exponential_smoother_matches_recursion() {
        assert_eq!(smooth(&[0.0, 10.0], SmoothKind::Ewm03).unwrap(), vec![0.0, 3.0]);
        let s = smooth(&[1.0, 2.0, 4.0], SmoothKind::Ewm03).unwrap();
        assert_abs_diff_eq!(s[1], 0.3 * 2.0 + 0.7 * 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s[2], 0.3 * 4.0 + 0.7 * s[1], epsilon = 1e-15);
    }

    #[test]
    fn short_series_rolling_mean_uses_partial_windows() {
        let series = [2.0, 4.0, 6.0, 8.0, 10.0];
        let smoothed = smooth(&series, SmoothKind::Rolling10).unwrap();
        assert_eq!(smoothed.len(), series.len());
        assert_abs_diff_eq!(smoothed[0], 2.0);
        assert_abs_diff_eq!(smoothed[1], 3.0);
        assert_abs_diff_eq!(smoothed[4], 6.0);
    }

    #[test]
    fn full_window_rolling_mean_is_shift_equivariant() {
        let base: Vec<f64> = (0..25).map(|i| ((i * 7) % 11) as f64).collect();
        let shifted: Vec<f64> = base.iter().map(|x| x + 3.5).collect();
        let a = smooth(&base, SmoothKind::Rolling10).unwrap();
        let b = smooth(&shifted, SmoothKind::Rolling10).unwrap();
        for i in 9..base.len() {
            assert_abs_diff_eq!(b[i], a[i] + 3.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_series_is_rejected() {
        assert_eq!(smooth(&[], SmoothKind::Rolling10), Err(EmptySeries));
        assert_eq!(smooth(&[], SmoothKind::Ewm03), Err(EmptySeries));
    }

    #[test]
    fn csv_exports_have_documented_headers_and_row_counts() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = generate_synthetic_scenario(3);
        let mut controller = crate::env::NoneController;
        let log = crate::sim::run_episode(&scenario, &mut controller, 3).unwrap();
        let events = detect_bunching(&log, 90.0);
        let stats = bunching_stats(&events);
        let curve = RewardCurve::from_rewards(&[-100.0, -90.0, -80.5]);

        let read = |name: &str| -> Vec<String> {
            fs::read_to_string(dir.path().join(name))
                .unwrap()
                .lines()
                .map(str::to_owned)
                .collect()
        };

        write_trajectories_csv(&log, &scenario, &dir.path().join("trajectories.csv")).unwrap();
        let lines = read("trajectories.csv");
        assert_eq!(lines[0], TRAJECTORIES_CSV_HEADER);
        let passages = log
            .records
            .iter()
            .filter(|r| {
                matches!(
                    r.kind,
                    RecordKind::Dispatch
                        | RecordKind::ArriveStop
                        | RecordKind::DepartStop
                        | RecordKind::ArriveTerminal
                )
            })
            .count();
        assert_eq!(lines.len(), passages + 1);

        write_bunching_csv(&events, &dir.path().join("bunching.csv")).unwrap();
        let lines = read("bunching.csv");
        assert_eq!(lines[0], BUNCHING_CSV_HEADER);
        assert_eq!(lines.len(), events.len() + 1);

        write_bunching_by_hour_csv(&stats, &dir.path().join("bunching_by_hour.csv")).unwrap();
        let lines = read("bunching_by_hour.csv");
        assert_eq!(lines[0], BUNCHING_BY_HOUR_CSV_HEADER);
        assert_eq!(lines.len(), HOURS + 1);
        assert_eq!(lines[1], format!("0,{},{}", stats.per_hour[0][0], stats.per_hour[1][0]));

        write_reward_curve_csv(&curve, &dir.path().join("reward_curve.csv")).unwrap();
        let lines = read("reward_curve.csv");
        assert_eq!(lines[0], REWARD_CURVE_CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "0,-100,-100,-100");
    }
}
