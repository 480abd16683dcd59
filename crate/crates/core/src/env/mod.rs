//! The control-facing view of the simulation: decision states, the headway
//! reward, deferred transition assembly, the replay buffer, and the
//! controller interface with its two non-learning baselines.

mod replay;
mod reward;
mod transitions;

pub use replay::{NotReady, ReplayBuffer};
pub use reward::{reward, reward_for_target, ASYMMETRY_WEIGHT, LATE_PENALTY};
pub use transitions::{resolve_transitions, scripted_completion, AssemblyOutcome, Transition};

use crate::scenario::{hour_of, Direction, ScenarioConfig, HOURS, STOP_COUNT};
use crate::sim::{Bus, BusStatus};
use crate::MAX_FLEET;

/// Numerical speed features are scaled by this ceiling.
pub const SPEED_NORM_MPS: f64 = 15.0;

/// What a holding decision sees: four categorical ids plus three unit-scale
/// numerical features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector {
    pub bus_id: usize,
    pub stop_id: usize,
    pub time_period: usize,
    pub direction: Direction,
    /// Realized forward headway over the target headway.
    pub h_f_norm: f64,
    /// Projected backward headway over the target headway.
    pub h_b_norm: f64,
    /// Upcoming segment's hourly mean speed over [`SPEED_NORM_MPS`].
    pub seg_speed_norm: f64,
}

impl StateVector {
    /// State observed at a service completion on an intermediate stop.
    #[allow(clippy::too_many_arguments)]
    pub fn from_decision(
        bus_id: usize,
        stop: usize,
        direction: Direction,
        sim_time: f64,
        h_f_secs: f64,
        h_b_est_secs: f64,
        seg_speed_norm: f64,
        h_star: f64,
    ) -> StateVector {
        debug_assert!(bus_id < MAX_FLEET);
        debug_assert!((1..STOP_COUNT - 1).contains(&stop));
        debug_assert!(h_f_secs.is_finite() && h_b_est_secs.is_finite());
        debug_assert!(h_star > 0.0);
        StateVector {
            bus_id,
            stop_id: stop,
            time_period: hour_of(sim_time),
            direction,
            h_f_norm: h_f_secs / h_star,
            h_b_norm: h_b_est_secs / h_star,
            seg_speed_norm,
        }
    }

    /// Post-trip resting state. Its value is never used (terminal decisions
    /// mask bootstrapping), so the features take fixed neutral values and
    /// the stop id points at the destination terminal.
    pub fn terminal_sentinel(bus_id: usize, direction: Direction, sim_time: f64) -> StateVector {
        StateVector {
            bus_id,
            stop_id: direction.destination_terminal(),
            time_period: hour_of(sim_time),
            direction,
            h_f_norm: 1.0,
            h_b_norm: 1.0,
            seg_speed_norm: 1.0,
        }
    }

    pub fn direction_index(&self) -> usize {
        self.direction.index()
    }
}

/// Seconds to keep holding the bus after dwell finishes. The simulator
/// clamps whatever a controller returns into `[0, max_hold_secs]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldAction {
    pub seconds: f64,
}

pub trait HoldingController {
    fn observe(&mut self, state: &StateVector) -> HoldAction;
}

/// Never holds; the uncontrolled baseline.
pub struct NoneController;

impl HoldingController for NoneController {
    fn observe(&mut self, _state: &StateVector) -> HoldAction {
        HoldAction { seconds: 0.0 }
    }
}

/// Classic schedule-based holder: wait out the remaining gap to the target
/// headway, up to the action bound.
pub struct RuleController {
    pub h_star: f64,
    pub max_hold: f64,
}

impl RuleController {
    pub fn for_scenario(scenario: &ScenarioConfig) -> Self {
        RuleController {
            h_star: scenario.target_headway_secs,
            max_hold: scenario.max_hold_secs,
        }
    }
}

impl HoldingController for RuleController {
    fn observe(&mut self, state: &StateVector) -> HoldAction {
        let h_f = state.h_f_norm * self.h_star;
        HoldAction { seconds: (self.h_star - h_f).clamp(0.0, self.max_hold) }
    }
}

/// Builds the decision state for `fleet[me]`, which has just completed
/// service at `stop` at `sim_time` with realized forward headway `h_f`.
///
/// The backward headway cannot be observed yet, so it is projected: among
/// active same-direction buses strictly behind, take the earliest arrival
/// at this stop assuming each rolls from its last completion point over the
/// remaining segments at the current hour's mean speeds with no dwell.
/// Returns the state plus the projection in seconds (target headway when no
/// follower is active).
pub fn assemble_state(
    fleet: &[Bus],
    me: usize,
    stop: usize,
    sim_time: f64,
    h_f: f64,
    scenario: &ScenarioConfig,
) -> (StateVector, f64) {
    let bus = &fleet[me];
    let direction = bus.direction;
    let hour = hour_of(sim_time);
    let h_star = scenario.target_headway_secs;
    debug_assert_eq!(bus.last_completion.map(|(s, _)| s), Some(stop));

    let my_progress = bus.progress();
    let mut projected: Option<f64> = None;
    for (idx, other) in fleet.iter().enumerate() {
        if idx == me
            || other.direction != direction
            || other.status == BusStatus::IdleAtTerminal
            || other.progress() >= my_progress
        {
            continue;
        }
        let (from_stop, since) = other
            .last_completion
            .unwrap_or((direction.origin_terminal(), other.dispatched_at));
        let (lo, hi) = match direction {
            Direction::Up => (from_stop, stop),
            Direction::Down => (stop, from_stop),
        };
        let mut t = since;
        for segment in lo..hi {
            t += scenario.segment_length(segment) / scenario.mean_speed(segment, hour);
        }
        projected = Some(projected.map_or(t, |p: f64| p.min(t)));
    }
    let h_b_est = projected.map_or(h_star, |t| (t - sim_time).max(0.0));

    let segment = direction.segment_from(stop);
    let seg_speed_norm = scenario.mean_speed(segment, hour) / SPEED_NORM_MPS;
    let state = StateVector::from_decision(
        bus.id, stop, direction, sim_time, h_f, h_b_est, seg_speed_norm, h_star,
    );
    (state, h_b_est)
}

/// Categorical vocabulary sizes in state order: bus, stop, period, direction.
pub const STATE_VOCABS: [usize; 4] = [MAX_FLEET, STOP_COUNT, HOURS, 2];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::generate_synthetic_scenario;
    use crate::sim::Place;

    fn test_bus(id: usize, direction: Direction) -> Bus {
        Bus {
            id,
            direction,
            status: BusStatus::Holding,
            place: Place::AtStop(0),
            onboard_by_destination: [0; STOP_COUNT],
            onboard_total: 0,
            trip_count: 1,
            trip_serial: id as u64,
            dispatched_at: 0.0,
            last_completion: None,
            is_last_trip: false,
        }
    }

    fn flat_speed_scenario(mps: f64) -> ScenarioConfig {
        let mut scenario = generate_synthetic_scenario(1);
        for profile in &mut scenario.speed_profiles {
            profile.hourly_mean_mps = [mps; HOURS];
        }
        scenario
    }

    #[test]
    fn no_follower_projects_target_headway() {
        let scenario = flat_speed_scenario(10.0);
        let mut me = test_bus(0, Direction::Up);
        me.last_completion = Some((5, 1000.0));
        let fleet = vec![me];
        let (state, h_b) = assemble_state(&fleet, 0, 5, 1000.0, 360.0, &scenario);
        assert_eq!(h_b, 360.0);
        assert_eq!(state.h_b_norm, 1.0);
        assert_eq!(state.h_f_norm, 1.0);
    }

    #[test]
    fn follower_one_segment_back_projects_travel_time() {
        let scenario = flat_speed_scenario(10.0);
        let mut me = test_bus(0, Direction::Up);
        me.last_completion = Some((5, 1000.0));
        let mut follower = test_bus(1, Direction::Up);
        follower.status = BusStatus::Driving;
        follower.last_completion = Some((4, 1000.0));
        let fleet = vec![me, follower];
        // 800 m at 10 m/s, projected from the same instant.
        let (state, h_b) = assemble_state(&fleet, 0, 5, 1000.0, 360.0, &scenario);
        assert_eq!(h_b, 80.0);
        assert!((state.h_b_norm - 80.0 / 360.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_of_two_followers_wins_and_direction_matters() {
        let scenario = flat_speed_scenario(10.0);
        let mut me = test_bus(0, Direction::Down);
        me.last_completion = Some((10, 2000.0));
        let mut near = test_bus(1, Direction::Down);
        near.status = BusStatus::Driving;
        near.last_completion = Some((12, 1990.0));
        let mut far = test_bus(2, Direction::Down);
        far.status = BusStatus::Driving;
        far.last_completion = Some((15, 1800.0));
        let mut other_dir = test_bus(3, Direction::Up);
        other_dir.status = BusStatus::Driving;
        other_dir.last_completion = Some((2, 1999.0));
        let fleet = vec![me, near, far, other_dir];
        let (_, h_b) = assemble_state(&fleet, 0, 10, 2000.0, 360.0, &scenario);
        // near: 2 segments x 80 s from 1990 -> 2150; far: 5 x 80 from 1800 -> 2200.
        assert_eq!(h_b, 150.0);
    }

    #[test]
    fn projection_clamps_at_zero_for_late_followers() {
        let scenario = flat_speed_scenario(10.0);
        let mut me = test_bus(0, Direction::Up);
        me.last_completion = Some((5, 5000.0));
        let mut follower = test_bus(1, Direction::Up);
        follower.status = BusStatus::Driving;
        follower.last_completion = Some((4, 1000.0));
        let fleet = vec![me, follower];
        let (_, h_b) = assemble_state(&fleet, 0, 5, 5000.0, 360.0, &scenario);
        assert_eq!(h_b, 0.0);
    }

    #[test]
    fn fresh_followers_project_from_their_dispatch() {
        let scenario = flat_speed_scenario(10.0);
        let mut me = test_bus(0, Direction::Up);
        me.last_completion = Some((2, 500.0));
        let mut fresh = test_bus(1, Direction::Up);
        fresh.status = BusStatus::Driving;
        fresh.dispatched_at = 400.0;
        let fleet = vec![me, fresh];
        let (_, h_b) = assemble_state(&fleet, 0, 2, 500.0, 360.0, &scenario);
        // Two segments from the origin terminal, 80 s each, from t=400.
        assert_eq!(h_b, 60.0);
    }

    #[test]
    fn rule_controller_tops_up_short_headways() {
        let mut rule = RuleController { h_star: 360.0, max_hold: 60.0 };
        let state = |h_f_norm: f64| StateVector {
            bus_id: 0,
            stop_id: 5,
            time_period: 0,
            direction: Direction::Up,
            h_f_norm,
            h_b_norm: 1.0,
            seg_speed_norm: 0.8,
        };
        assert_eq!(rule.observe(&state(320.0 / 360.0)).seconds, 40.0);
        assert_eq!(rule.observe(&state(1.0)).seconds, 0.0);
        assert_eq!(rule.observe(&state(500.0 / 360.0)).seconds, 0.0);
        assert_eq!(rule.observe(&state(0.0)).seconds, 60.0);
    }

    #[test]
    fn sentinel_state_is_terminal_shaped() {
        let s = StateVector::terminal_sentinel(3, Direction::Up, 7200.0);
        assert_eq!(s.stop_id, STOP_COUNT - 1);
        assert_eq!(s.time_period, 2);
        assert_eq!(s.h_f_norm, 1.0);
        let s = StateVector::terminal_sentinel(3, Direction::Down, 0.0);
        assert_eq!(s.stop_id, 0);
    }
}
