//! The discrete-event loop: timetable dispatch, segment motion, dwell,
//! holding, and the per-stop completion ledger that headways are measured
//! against.
//!
//! Events are processed in `(time, seq)` order with a monotone sequence
//! number assigned at scheduling, so a run is a pure function of the
//! scenario, the controller, and the seed. A bus cycles
//! idle -> driving -> dwelling -> holding -> driving -> ... -> idle; it
//! rests at whichever terminal its trip ended at and is reused first-in
//! first-out by later dispatches from that terminal.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::env::{assemble_state, HoldingController};
use crate::scenario::{
    hour_of, Direction, ScenarioConfig, ScenarioError, SEGMENT_COUNT, STOP_COUNT,
};
use crate::stochastic::{
    generate_demand, sample_segment_speed, RngStream, SampleError, StreamKind,
};
use crate::MAX_FLEET;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("timetable requires more than {max} concurrent buses")]
    FleetExceeded { max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusStatus {
    IdleAtTerminal,
    Driving,
    Dwelling,
    Holding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Place {
    AtStop(usize),
    OnSegment(usize),
}

#[derive(Debug, Clone)]
pub struct Bus {
    pub id: usize,
    pub direction: Direction,
    pub status: BusStatus,
    pub place: Place,
    /// Onboard passengers keyed by destination stop.
    pub onboard_by_destination: [u32; STOP_COUNT],
    pub onboard_total: u32,
    /// Trips completed or in progress over the vehicle's whole day.
    pub trip_count: u32,
    /// Global dispatch ordinal; keys the traffic noise substreams.
    pub trip_serial: u64,
    pub dispatched_at: f64,
    /// `(stop, y)` of the newest service completion on the current trip.
    pub last_completion: Option<(usize, f64)>,
    /// Whether the current trip is its direction's final departure.
    pub is_last_trip: bool,
}

impl Bus {
    /// Stops already covered on the current trip; orders buses of one
    /// direction front-to-back regardless of travel sense.
    pub fn progress(&self) -> isize {
        match self.last_completion {
            Some((stop, _)) => self.direction.progress_at(stop) as isize,
            None => 0,
        }
    }

    fn set_status(&mut self, next: BusStatus) {
        use BusStatus::*;
        let legal = matches!(
            (self.status, next),
            (IdleAtTerminal, Driving)
                | (Driving, Dwelling)
                | (Dwelling, Holding)
                | (Holding, Driving)
                | (Driving, IdleAtTerminal)
        );
        debug_assert!(legal, "illegal status change {:?} -> {next:?}", self.status);
        self.status = next;
    }
}

/// Natural dwell: boarding and alighting happen in parallel channels, the
/// stop is busy for whichever takes longer.
pub fn compute_dwell(board: u32, alight: u32, board_secs: f64, alight_secs: f64) -> f64 {
    (board_secs * board as f64).max(alight_secs * alight as f64)
}

/// Per-(direction, stop) service-completion history. Append-only; order is
/// completion order, which tolerates physical overtaking.
pub struct HeadwayLedger {
    completions: Vec<Vec<(usize, f64)>>,
}

impl HeadwayLedger {
    pub fn new() -> Self {
        HeadwayLedger { completions: vec![Vec::new(); 2 * STOP_COUNT] }
    }

    pub fn completions(&self, direction: Direction, stop: usize) -> &[(usize, f64)] {
        &self.completions[direction.index() * STOP_COUNT + stop]
    }

    pub fn record(&mut self, direction: Direction, stop: usize, bus: usize, y_time: f64) {
        let list = &mut self.completions[direction.index() * STOP_COUNT + stop];
        if let Some(&(_, prev)) = list.last() {
            debug_assert!(y_time > prev, "completion times must increase at a stop");
        }
        list.push((bus, y_time));
    }

    /// Gap to the previous completion at the same stop and direction. The
    /// caller's own completion must already be recorded at `y_time`; a bus
    /// with no predecessor gets the neutral `fallback` (the target headway).
    pub fn forward_headway(
        &self,
        direction: Direction,
        stop: usize,
        bus: usize,
        y_time: f64,
        fallback: f64,
    ) -> f64 {
        let list = self.completions(direction, stop);
        let tail = list.last();
        debug_assert!(
            matches!(tail, Some(&(b, y)) if b == bus && y == y_time),
            "forward_headway expects the caller's completion on top"
        );
        let _ = tail;
        if list.len() >= 2 {
            y_time - list[list.len() - 2].1
        } else {
            fallback
        }
    }
}

impl Default for HeadwayLedger {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Dispatch,
    ArriveStop,
    ServiceComplete,
    DepartStop,
    ArriveTerminal,
    Warning,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Dispatch => "dispatch",
            RecordKind::ArriveStop => "arrive",
            RecordKind::ServiceComplete => "service_complete",
            RecordKind::DepartStop => "depart",
            RecordKind::ArriveTerminal => "arrive_terminal",
            RecordKind::Warning => "warning",
        }
    }
}

/// One logged event. Service completions additionally carry everything a
/// decision state needs, so transitions can be rebuilt from the log alone.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time_s: f64,
    pub bus_id: usize,
    pub direction: Direction,
    pub stop: usize,
    pub kind: RecordKind,
    pub h_f: Option<f64>,
    pub h_b_est: Option<f64>,
    pub hold_s: Option<f64>,
    pub board: u32,
    pub alight: u32,
    /// Upcoming segment's hourly mean over 15 m/s, as seen by the decision.
    pub seg_speed_norm: Option<f64>,
    /// Decision at the trip's last intermediate stop.
    pub is_final_stop: bool,
    /// Trip is the day's final departure in its direction.
    pub is_last_trip: bool,
    pub note: Option<String>,
}

impl EventRecord {
    fn csv_line(&self, out: &mut String) {
        fn push_opt(out: &mut String, v: Option<f64>) {
            if let Some(v) = v {
                let _ = write!(out, "{v}");
            }
        }
        let _ = write!(
            out,
            "{},{},{},{},{}",
            self.time_s,
            self.bus_id,
            self.direction,
            self.stop,
            self.kind.as_str()
        );
        out.push(',');
        push_opt(out, self.h_f);
        out.push(',');
        push_opt(out, self.h_b_est);
        out.push(',');
        push_opt(out, self.hold_s);
        let _ = write!(out, ",{},{}", self.board, self.alight);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeTotals {
    pub passengers_generated: u64,
    pub boarded: u64,
    pub alighted: u64,
    pub left_waiting: u64,
    pub trips_completed: u32,
    pub total_hold_secs: f64,
    pub final_event_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub records: Vec<EventRecord>,
    pub totals: EpisodeTotals,
    /// Target headway the run was measured against.
    pub h_star: f64,
    /// Action bound the controller was clamped to.
    pub max_hold: f64,
}

pub const EPISODE_CSV_HEADER: &str =
    "time_s,bus_id,direction,stop,kind,h_f,h_b,hold_s,board,alight";

impl EpisodeLog {
    /// FNV-1a over the canonical CSV rendering; equal hashes mean equal
    /// observable traces.
    pub fn trace_hash(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut line = String::new();
        for record in &self.records {
            line.clear();
            record.csv_line(&mut line);
            line.push('\n');
            for byte in line.as_bytes() {
                hash ^= u64::from(*byte);
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        hash
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut text = String::with_capacity(self.records.len() * 48);
        text.push_str(EPISODE_CSV_HEADER);
        text.push('\n');
        for record in &self.records {
            record.csv_line(&mut text);
            text.push('\n');
        }
        let mut file = fs::File::create(path)?;
        file.write_all(text.as_bytes())
    }
}

struct QueuedEvent {
    time: f64,
    seq: u64,
    kind: EventKind,
}

enum EventKind {
    Dispatch { direction: Direction, departure_index: usize },
    ArriveStop { bus: usize, stop: usize },
    ServiceComplete { bus: usize, stop: usize },
    DepartStop { bus: usize, stop: usize },
    ArriveTerminal { bus: usize, terminal: usize },
}

impl PartialEq for QueuedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}
impl Eq for QueuedEvent {}
impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueuedEvent {
    // Reversed so the std max-heap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Waiting passengers at one (direction, stop), sorted by arrival time.
/// `next` indexes the first passenger still waiting.
struct StopQueue {
    arrivals: Vec<(f64, usize)>,
    next: usize,
}

struct Runner<'a> {
    scenario: &'a ScenarioConfig,
    controller: &'a mut dyn HoldingController,
    seed: u64,
    heap: BinaryHeap<QueuedEvent>,
    next_seq: u64,
    next_trip_serial: u64,
    fleet: Vec<Bus>,
    /// Idle vehicles per terminal: index 0 for stop 0, 1 for stop 21.
    idle: [VecDeque<usize>; 2],
    queues: Vec<StopQueue>,
    ledger: HeadwayLedger,
    records: Vec<EventRecord>,
    totals: EpisodeTotals,
}

fn terminal_slot(stop: usize) -> usize {
    if stop == 0 {
        0
    } else {
        debug_assert_eq!(stop, STOP_COUNT - 1);
        1
    }
}

/// Runs one full service day and returns the complete log. The controller
/// is consulted at every intermediate-stop service completion; out-of-range
/// or non-finite actions are clamped into `[0, max_hold_secs]` and flagged
/// with a warning record.
pub fn run_episode(
    scenario: &ScenarioConfig,
    controller: &mut dyn HoldingController,
    rng_seed: u64,
) -> Result<EpisodeLog, SimError> {
    scenario.validate()?;

    let demand = generate_demand(&scenario.od_matrices, rng_seed)?;
    let mut queues: Vec<StopQueue> = (0..2 * STOP_COUNT)
        .map(|_| StopQueue { arrivals: Vec::new(), next: 0 })
        .collect();
    for p in &demand {
        let slot = p.direction().index() * STOP_COUNT + p.origin;
        queues[slot].arrivals.push((p.time, p.destination));
    }
    for q in &mut queues {
        q.arrivals.sort_by(|a, b| a.0.total_cmp(&b.0));
    }

    let mut runner = Runner {
        scenario,
        controller,
        seed: rng_seed,
        heap: BinaryHeap::new(),
        next_seq: 0,
        next_trip_serial: 0,
        fleet: Vec::new(),
        idle: [VecDeque::new(), VecDeque::new()],
        queues,
        ledger: HeadwayLedger::new(),
        records: Vec::new(),
        totals: EpisodeTotals { passengers_generated: demand.len() as u64, ..Default::default() },
    };

    for direction in Direction::BOTH {
        for (departure_index, &time) in
            scenario.timetable(direction).departures.iter().enumerate()
        {
            runner.schedule(time, EventKind::Dispatch { direction, departure_index });
        }
    }

    while let Some(event) = runner.heap.pop() {
        runner.totals.final_event_time_s = event.time;
        match event.kind {
            EventKind::Dispatch { direction, departure_index } => {
                runner.dispatch(event.time, direction, departure_index)?
            }
            EventKind::ArriveStop { bus, stop } => runner.arrive_stop(event.time, bus, stop)?,
            EventKind::ServiceComplete { bus, stop } => {
                runner.service_complete(event.time, bus, stop)?
            }
            EventKind::DepartStop { bus, stop } => runner.depart_stop(event.time, bus, stop)?,
            EventKind::ArriveTerminal { bus, terminal } => {
                runner.arrive_terminal(event.time, bus, terminal)
            }
        }
    }

    for bus in &runner.fleet {
        debug_assert_eq!(bus.status, BusStatus::IdleAtTerminal);
        debug_assert_eq!(bus.onboard_total, 0);
    }
    runner.totals.left_waiting = runner
        .queues
        .iter()
        .map(|q| (q.arrivals.len() - q.next) as u64)
        .sum();
    debug_assert_eq!(
        runner.totals.passengers_generated,
        runner.totals.alighted + runner.totals.left_waiting,
        "passenger conservation"
    );
    debug_assert_eq!(runner.totals.boarded, runner.totals.alighted);

    Ok(EpisodeLog {
        records: runner.records,
        totals: runner.totals,
        h_star: scenario.target_headway_secs,
        max_hold: scenario.max_hold_secs,
    })
}

impl<'a> Runner<'a> {
    fn schedule(&mut self, time: f64, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(QueuedEvent { time, seq, kind });
    }

    /// One Gaussian speed draw from the substream owned by this
    /// (trip, segment) traversal; independent of all other consumers.
    fn sample_speed(&self, trip_serial: u64, segment: usize, time: f64) -> Result<f64, SampleError> {
        let mean = self.scenario.mean_speed(segment, hour_of(time));
        let mut rng = RngStream::with_index(
            self.seed,
            StreamKind::Traffic,
            trip_serial * SEGMENT_COUNT as u64 + segment as u64,
        );
        sample_segment_speed(mean, self.scenario.speed_sigma, &mut rng)
    }

    fn log(&mut self, record: EventRecord) {
        if let Some(last) = self.records.last() {
            debug_assert!(record.time_s >= last.time_s, "log times must not decrease");
        }
        self.records.push(record);
    }

    fn plain_record(time: f64, bus: &Bus, stop: usize, kind: RecordKind) -> EventRecord {
        EventRecord {
            time_s: time,
            bus_id: bus.id,
            direction: bus.direction,
            stop,
            kind,
            h_f: None,
            h_b_est: None,
            hold_s: None,
            board: 0,
            alight: 0,
            seg_speed_norm: None,
            is_final_stop: false,
            is_last_trip: bus.is_last_trip,
            note: None,
        }
    }

    fn dispatch(
        &mut self,
        time: f64,
        direction: Direction,
        departure_index: usize,
    ) -> Result<(), SimError> {
        let origin = direction.origin_terminal();
        let is_last_trip =
            departure_index + 1 == self.scenario.timetable(direction).departures.len();
        let trip_serial = self.next_trip_serial;
        self.next_trip_serial += 1;

        let bus_idx = match self.idle[terminal_slot(origin)].pop_front() {
            Some(idx) => {
                let bus = &mut self.fleet[idx];
                bus.set_status(BusStatus::Driving);
                bus.direction = direction;
                bus.trip_count += 1;
                bus.trip_serial = trip_serial;
                bus.dispatched_at = time;
                bus.last_completion = None;
                bus.is_last_trip = is_last_trip;
                idx
            }
            None => {
                if self.fleet.len() >= MAX_FLEET {
                    return Err(SimError::FleetExceeded { max: MAX_FLEET });
                }
                let idx = self.fleet.len();
                self.fleet.push(Bus {
                    id: idx,
                    direction,
                    status: BusStatus::Driving,
                    place: Place::OnSegment(direction.segment_from(origin)),
                    onboard_by_destination: [0; STOP_COUNT],
                    onboard_total: 0,
                    trip_count: 1,
                    trip_serial,
                    dispatched_at: time,
                    last_completion: None,
                    is_last_trip,
                });
                idx
            }
        };

        let segment = direction.segment_from(origin);
        self.fleet[bus_idx].place = Place::OnSegment(segment);
        let record = Self::plain_record(time, &self.fleet[bus_idx], origin, RecordKind::Dispatch);
        self.log(record);

        let speed = self.sample_speed(trip_serial, segment, time)?;
        let arrival = time + self.scenario.segment_length(segment) / speed;
        self.schedule(
            arrival,
            EventKind::ArriveStop { bus: bus_idx, stop: direction.next_stop(origin) },
        );
        Ok(())
    }

    fn arrive_stop(&mut self, time: f64, bus_idx: usize, stop: usize) -> Result<(), SimError> {
        debug_assert!(stop != 0 && stop != STOP_COUNT - 1);
        let capacity = self.scenario.bus_capacity;
        let bus = &mut self.fleet[bus_idx];
        bus.set_status(BusStatus::Dwelling);
        bus.place = Place::AtStop(stop);

        let alight = bus.onboard_by_destination[stop];
        bus.onboard_by_destination[stop] = 0;
        bus.onboard_total -= alight;

        // Boarding closes at the arrival instant: passengers turning up
        // during the dwell wait for the next bus.
        let queue = &mut self.queues[bus.direction.index() * STOP_COUNT + stop];
        let mut board = 0u32;
        while queue.next < queue.arrivals.len()
            && queue.arrivals[queue.next].0 <= time
            && bus.onboard_total < capacity
        {
            let (_, destination) = queue.arrivals[queue.next];
            queue.next += 1;
            bus.onboard_by_destination[destination] += 1;
            bus.onboard_total += 1;
            board += 1;
        }
        debug_assert!(bus.onboard_total <= capacity);
        self.totals.alighted += u64::from(alight);
        self.totals.boarded += u64::from(board);

        let dwell = compute_dwell(
            board,
            alight,
            self.scenario.dwell_board_secs,
            self.scenario.dwell_alight_secs,
        );
        let mut record = Self::plain_record(time, &self.fleet[bus_idx], stop, RecordKind::ArriveStop);
        record.board = board;
        record.alight = alight;
        self.log(record);

        self.schedule(time + dwell, EventKind::ServiceComplete { bus: bus_idx, stop });
        Ok(())
    }

    fn service_complete(&mut self, time: f64, bus_idx: usize, stop: usize) -> Result<(), SimError> {
        let h_star = self.scenario.target_headway_secs;
        let max_hold = self.scenario.max_hold_secs;
        let direction = self.fleet[bus_idx].direction;

        self.ledger.record(direction, stop, self.fleet[bus_idx].id, time);
        let h_f = self
            .ledger
            .forward_headway(direction, stop, self.fleet[bus_idx].id, time, h_star);
        {
            let bus = &mut self.fleet[bus_idx];
            bus.set_status(BusStatus::Holding);
            bus.last_completion = Some((stop, time));
        }

        let (state, h_b_est) =
            assemble_state(&self.fleet, bus_idx, stop, time, h_f, self.scenario);
        let raw = self.controller.observe(&state).seconds;
        let (hold, warning) = if raw.is_finite() && (0.0..=max_hold).contains(&raw) {
            (raw, None)
        } else {
            let clamped = if raw.is_finite() { raw.clamp(0.0, max_hold) } else { 0.0 };
            (clamped, Some(format!("action {raw} outside [0, {max_hold}], clamped to {clamped}")))
        };
        self.totals.total_hold_secs += hold;

        let bus = &self.fleet[bus_idx];
        let mut record = Self::plain_record(time, bus, stop, RecordKind::ServiceComplete);
        record.h_f = Some(h_f);
        record.h_b_est = Some(h_b_est);
        record.hold_s = Some(hold);
        record.seg_speed_norm = Some(state.seg_speed_norm);
        record.is_final_stop = stop == direction.last_intermediate();
        self.log(record);
        if let Some(note) = warning {
            let mut warn = Self::plain_record(time, &self.fleet[bus_idx], stop, RecordKind::Warning);
            warn.note = Some(note);
            self.log(warn);
        }

        self.schedule(time + hold, EventKind::DepartStop { bus: bus_idx, stop });
        Ok(())
    }

    fn depart_stop(&mut self, time: f64, bus_idx: usize, stop: usize) -> Result<(), SimError> {
        let (direction, trip_serial) = {
            let bus = &mut self.fleet[bus_idx];
            bus.set_status(BusStatus::Driving);
            (bus.direction, bus.trip_serial)
        };
        let segment = direction.segment_from(stop);
        self.fleet[bus_idx].place = Place::OnSegment(segment);

        let record = Self::plain_record(time, &self.fleet[bus_idx], stop, RecordKind::DepartStop);
        self.log(record);

        let speed = self.sample_speed(trip_serial, segment, time)?;
        let arrival = time + self.scenario.segment_length(segment) / speed;
        let next = direction.next_stop(stop);
        if next == direction.destination_terminal() {
            self.schedule(arrival, EventKind::ArriveTerminal { bus: bus_idx, terminal: next });
        } else {
            self.schedule(arrival, EventKind::ArriveStop { bus: bus_idx, stop: next });
        }
        Ok(())
    }

    fn arrive_terminal(&mut self, time: f64, bus_idx: usize, terminal: usize) {
        let bus = &mut self.fleet[bus_idx];
        debug_assert_eq!(bus.onboard_total, 0, "passengers must alight before the terminal");
        bus.set_status(BusStatus::IdleAtTerminal);
        bus.place = Place::AtStop(terminal);
        self.idle[terminal_slot(terminal)].push_back(bus_idx);
        self.totals.trips_completed += 1;

        let record = Self::plain_record(time, &self.fleet[bus_idx], terminal, RecordKind::ArriveTerminal);
        self.log(record);
    }
}
