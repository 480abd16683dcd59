//! Static corridor inputs: stop geometry, hourly origin-destination demand,
//! hourly segment speed means, timetables, and the scalar knobs that the
//! simulator reads. Everything round-trips through a directory of CSV files
//! plus one `scenario.cfg` of `key = value` lines.
//!
//! A scenario is immutable after load and safe to share across episode
//! runners.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::stochastic::{RngStream, StreamKind};

/// Stops per direction, terminals included.
pub const STOP_COUNT: usize = 22;
/// Inter-stop segments per direction.
pub const SEGMENT_COUNT: usize = STOP_COUNT - 1;
/// Service-day length in hours; hour 0 maps to 06:00 wall clock.
pub const HOURS: usize = 13;
/// Service-day length in seconds.
pub const HORIZON_SECS: f64 = HOURS as f64 * 3600.0;

/// Hour bin of a simulation time. Times past the service window keep the
/// final hour, so late events still resolve to a valid bin.
pub fn hour_of(time_s: f64) -> usize {
    let h = (time_s / 3600.0).floor();
    if h < 0.0 {
        0
    } else if h >= (HOURS - 1) as f64 {
        HOURS - 1
    } else {
        h as usize
    }
}

/// Travel direction. `Up` runs from stop 0 to stop 21, `Down` the reverse.
/// The numeric codes (down=0, up=1) appear in CSV files and embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Down,
    Up,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Down, Direction::Up];

    pub fn index(self) -> usize {
        match self {
            Direction::Down => 0,
            Direction::Up => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Direction> {
        match index {
            0 => Some(Direction::Down),
            1 => Some(Direction::Up),
            _ => None,
        }
    }

    /// Terminal a trip departs from.
    pub fn origin_terminal(self) -> usize {
        match self {
            Direction::Up => 0,
            Direction::Down => STOP_COUNT - 1,
        }
    }

    /// Terminal a trip ends at.
    pub fn destination_terminal(self) -> usize {
        match self {
            Direction::Up => STOP_COUNT - 1,
            Direction::Down => 0,
        }
    }

    pub fn first_intermediate(self) -> usize {
        match self {
            Direction::Up => 1,
            Direction::Down => STOP_COUNT - 2,
        }
    }

    pub fn last_intermediate(self) -> usize {
        match self {
            Direction::Up => STOP_COUNT - 2,
            Direction::Down => 1,
        }
    }

    /// Stop after `stop` along this direction. Caller must not be at the
    /// destination terminal already.
    pub fn next_stop(self, stop: usize) -> usize {
        match self {
            Direction::Up => stop + 1,
            Direction::Down => stop - 1,
        }
    }

    /// Segment entered when leaving `stop` along this direction. Segment
    /// `s` joins stops `s` and `s+1` regardless of direction.
    pub fn segment_from(self, stop: usize) -> usize {
        match self {
            Direction::Up => stop,
            Direction::Down => stop - 1,
        }
    }

    /// Stops covered so far when standing at `stop`; defines "behind" and
    /// "ahead" uniformly for both directions.
    pub fn progress_at(self, stop: usize) -> usize {
        match self {
            Direction::Up => stop,
            Direction::Down => STOP_COUNT - 1 - stop,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopKind {
    Terminal,
    Intermediate,
}

impl StopKind {
    fn as_str(self) -> &'static str {
        match self {
            StopKind::Terminal => "terminal",
            StopKind::Intermediate => "intermediate",
        }
    }

    fn parse(s: &str) -> Option<StopKind> {
        match s {
            "terminal" => Some(StopKind::Terminal),
            "intermediate" => Some(StopKind::Intermediate),
            _ => None,
        }
    }

    /// Kind implied by a stop's position in the sequence.
    pub fn expected_for(index: usize) -> StopKind {
        if index == 0 || index == STOP_COUNT - 1 {
            StopKind::Terminal
        } else {
            StopKind::Intermediate
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopSpec {
    pub index: usize,
    pub kind: StopKind,
    pub position_m: f64,
}

/// One hour of origin-destination demand, pax per hour.
#[derive(Debug, Clone, PartialEq)]
pub struct OdMatrix {
    pub hour: usize,
    pub rates: [[f64; STOP_COUNT]; STOP_COUNT],
}

impl OdMatrix {
    pub fn zero(hour: usize) -> Self {
        OdMatrix { hour, rates: [[0.0; STOP_COUNT]; STOP_COUNT] }
    }

    pub fn total_rate(&self) -> f64 {
        self.rates.iter().flatten().sum()
    }
}

/// Hourly mean speeds for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedProfile {
    pub segment: usize,
    pub hourly_mean_mps: [f64; HOURS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timetable {
    pub direction: Direction,
    /// Seconds since service start, sorted, uniformly spaced.
    pub departures: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub stops: Vec<StopSpec>,
    /// One matrix per hour, index == hour.
    pub od_matrices: Vec<OdMatrix>,
    /// One profile per segment, index == segment.
    pub speed_profiles: Vec<SpeedProfile>,
    /// Indexed by `Direction::index()`.
    pub timetables: [Timetable; 2],
    pub speed_sigma: f64,
    pub dwell_board_secs: f64,
    pub dwell_alight_secs: f64,
    pub bus_capacity: u32,
    pub max_hold_secs: f64,
    pub target_headway_secs: f64,
    pub rng_seed: u64,
}

impl ScenarioConfig {
    pub fn segment_length(&self, segment: usize) -> f64 {
        self.stops[segment + 1].position_m - self.stops[segment].position_m
    }

    pub fn mean_speed(&self, segment: usize, hour: usize) -> f64 {
        self.speed_profiles[segment].hourly_mean_mps[hour]
    }

    pub fn timetable(&self, direction: Direction) -> &Timetable {
        &self.timetables[direction.index()]
    }

    /// Full consistency check; every constructor and loader goes through
    /// this before a config escapes.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.stops.len() != STOP_COUNT {
            return Err(invalid(
                "stops.csv",
                format!("expected {STOP_COUNT} stops, got {}", self.stops.len()),
            ));
        }
        for (i, stop) in self.stops.iter().enumerate() {
            if stop.index != i {
                return Err(invalid(
                    "stops.csv",
                    format!("row {i}: expected index {i}, got {}", stop.index),
                ));
            }
            if stop.kind != StopKind::expected_for(i) {
                return Err(invalid(
                    "stops.csv",
                    format!("stop {i}: kind {} does not match position", stop.kind.as_str()),
                ));
            }
            if !stop.position_m.is_finite() {
                return Err(invalid(
                    "stops.csv",
                    format!("stop {i}: position must be finite, got {}", stop.position_m),
                ));
            }
            if i > 0 && stop.position_m <= self.stops[i - 1].position_m {
                return Err(invalid(
                    "stops.csv",
                    format!("stop {i}: position must increase along the corridor"),
                ));
            }
        }

        if self.od_matrices.len() != HOURS {
            return Err(invalid(
                "od.csv",
                format!("expected {HOURS} hourly matrices, got {}", self.od_matrices.len()),
            ));
        }
        for (h, matrix) in self.od_matrices.iter().enumerate() {
            if matrix.hour != h {
                return Err(invalid(
                    "od.csv",
                    format!("matrix {h} labeled with hour {}", matrix.hour),
                ));
            }
            for from in 0..STOP_COUNT {
                for to in 0..STOP_COUNT {
                    let rate = matrix.rates[from][to];
                    if !rate.is_finite() || rate < 0.0 {
                        return Err(invalid(
                            "od.csv",
                            format!("hour {h} pair ({from},{to}): bad rate {rate}"),
                        ));
                    }
                    let touches_terminal = from == 0
                        || to == 0
                        || from == STOP_COUNT - 1
                        || to == STOP_COUNT - 1;
                    if rate > 0.0 && (from == to || touches_terminal) {
                        return Err(invalid(
                            "od.csv",
                            format!(
                                "hour {h} pair ({from},{to}): demand allowed only between distinct intermediate stops"
                            ),
                        ));
                    }
                }
            }
        }

        if self.speed_profiles.len() != SEGMENT_COUNT {
            return Err(invalid(
                "speeds.csv",
                format!(
                    "expected {SEGMENT_COUNT} segment profiles, got {}",
                    self.speed_profiles.len()
                ),
            ));
        }
        for (s, profile) in self.speed_profiles.iter().enumerate() {
            if profile.segment != s {
                return Err(invalid(
                    "speeds.csv",
                    format!("profile {s} labeled with segment {}", profile.segment),
                ));
            }
            for (h, &v) in profile.hourly_mean_mps.iter().enumerate() {
                if !v.is_finite() || v <= 0.0 {
                    return Err(invalid(
                        "speeds.csv",
                        format!("segment {s} hour {h}: mean speed must be positive, got {v}"),
                    ));
                }
            }
        }

        for direction in Direction::BOTH {
            let table = self.timetable(direction);
            if table.direction != direction {
                return Err(invalid(
                    "timetable.csv",
                    format!("table stored under direction {direction} disagrees"),
                ));
            }
            let deps = &table.departures;
            if deps.is_empty() {
                return Err(invalid(
                    "timetable.csv",
                    format!("direction {direction}: no departures"),
                ));
            }
            if deps.iter().any(|d| !d.is_finite())
                || deps[0] < 0.0
                || *deps.last().unwrap() >= HORIZON_SECS
            {
                return Err(invalid(
                    "timetable.csv",
                    format!("direction {direction}: departures must lie in [0, {HORIZON_SECS})"),
                ));
            }
            if deps.len() >= 2 {
                let gap = deps[1] - deps[0];
                if gap <= 0.0 {
                    return Err(invalid(
                        "timetable.csv",
                        format!("direction {direction}: departures must strictly increase"),
                    ));
                }
                for i in 2..deps.len() {
                    if ((deps[i] - deps[i - 1]) - gap).abs() > 1e-9 {
                        return Err(invalid(
                            "timetable.csv",
                            format!(
                                "direction {direction}: gap before departure {i} is {} but the schedule interval is {gap}",
                                deps[i] - deps[i - 1]
                            ),
                        ));
                    }
                }
            }
        }

        let positive = [
            ("max_hold_secs", self.max_hold_secs),
            ("target_headway_secs", self.target_headway_secs),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(invalid("scenario.cfg", format!("{name} must be positive, got {v}")));
            }
        }
        let nonnegative = [
            ("speed_sigma", self.speed_sigma),
            ("dwell_board_secs", self.dwell_board_secs),
            ("dwell_alight_secs", self.dwell_alight_secs),
        ];
        for (name, v) in nonnegative {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(
                    "scenario.cfg",
                    format!("{name} must be nonnegative, got {v}"),
                ));
            }
        }
        if self.bus_capacity == 0 {
            return Err(invalid("scenario.cfg", "bus_capacity must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{file}: {detail}")]
    Invalid { file: String, detail: String },
    #[error("bad argument: {0}")]
    Argument(String),
}

fn invalid(file: &str, detail: String) -> ScenarioError {
    ScenarioError::Invalid { file: file.to_string(), detail }
}

/// Evenly spaced departures `offset, offset+interval, ... < horizon`.
pub fn generate_timetable(
    direction: Direction,
    interval_secs: u32,
    offset_secs: u32,
    horizon_secs: u32,
) -> Result<Timetable, ScenarioError> {
    if interval_secs == 0 {
        return Err(ScenarioError::Argument("timetable interval must be positive".into()));
    }
    if offset_secs >= interval_secs {
        return Err(ScenarioError::Argument(format!(
            "timetable offset {offset_secs} must be smaller than the interval {interval_secs}"
        )));
    }
    let departures = (offset_secs..horizon_secs)
        .step_by(interval_secs as usize)
        .map(f64::from)
        .collect();
    Ok(Timetable { direction, departures })
}

// Synthetic corridor shape. Demand and congestion follow Gaussian hour bumps
// centered on the rush hours. The evening bump carries more demand over a
// wider window than the morning one; amplitudes, widths and pair density are
// the calibration knobs.
const SYNTH_STOP_SPACING_M: f64 = 800.0;
const SYNTH_BASE_RATE: f64 = 10.0;
const SYNTH_PEAK_BOOST: f64 = 3.0;
const SYNTH_PEAK_HOURS: [f64; 2] = [3.0, 11.0];
const SYNTH_DEMAND_AMPLITUDE: [f64; 2] = [0.15, 1.0];
const SYNTH_DEMAND_WIDTH: [f64; 2] = [0.4, 1.2];
const SYNTH_SPEED_WIDTH: [f64; 2] = [1.6, 1.2];
const SYNTH_PAIR_PROB: f64 = 0.62;
const SYNTH_MIN_SPAN: usize = 2;
const SYNTH_MAX_SPAN: usize = 6;
const SYNTH_SPEED_BASE_MPS: f64 = 12.0;
const SYNTH_SPEED_DIP_MPS: f64 = 6.0;
const SYNTH_HEADWAY_SECS: u32 = 360;
// Init substream index reserved for scenario synthesis, distinct from
// network weight init which uses index 0.
const SYNTH_STREAM_INDEX: u64 = 9;

/// Demand intensity in [0, 1]: exactly 1 at the evening peak hour, lower at
/// the morning one. The bumps sit 8 h apart, so cross-terms underflow.
fn demand_weight(hour: usize) -> f64 {
    let h = hour as f64;
    SYNTH_PEAK_HOURS
        .iter()
        .zip(SYNTH_DEMAND_AMPLITUDE.iter().zip(SYNTH_DEMAND_WIDTH))
        .map(|(center, (amp, width))| {
            let z = (h - center) / width;
            amp * (-0.5 * z * z).exp()
        })
        .sum()
}

/// Congestion intensity in [0, 1], exactly 1 at both peak hours so segment
/// speeds bottom out when demand peaks. The evening slowdown lasts longer.
fn congestion_weight(hour: usize) -> f64 {
    let h = hour as f64;
    SYNTH_PEAK_HOURS
        .iter()
        .zip(SYNTH_SPEED_WIDTH)
        .map(|(center, width)| {
            let z = (h - center) / width;
            (-0.5 * z * z).exp()
        })
        .fold(0.0, f64::max)
}

/// Builds a self-contained two-peak corridor: a random set of mid-distance
/// stop pairs carries demand that swells around 09:00 and 17:00 while
/// segment speeds sag to half their base at the same hours.
pub fn generate_synthetic_scenario(seed: u64) -> ScenarioConfig {
    let stops = (0..STOP_COUNT)
        .map(|i| StopSpec {
            index: i,
            kind: StopKind::expected_for(i),
            position_m: i as f64 * SYNTH_STOP_SPACING_M,
        })
        .collect();

    let mut pair_rng = RngStream::with_index(seed, StreamKind::Init, SYNTH_STREAM_INDEX);
    let mut active = Vec::new();
    for from in 1..STOP_COUNT - 1 {
        for to in 1..STOP_COUNT - 1 {
            let span = from.abs_diff(to);
            if (SYNTH_MIN_SPAN..=SYNTH_MAX_SPAN).contains(&span)
                && rand::Rng::random::<f64>(&mut pair_rng) < SYNTH_PAIR_PROB
            {
                active.push((from, to));
            }
        }
    }

    let od_matrices = (0..HOURS)
        .map(|hour| {
            let mut matrix = OdMatrix::zero(hour);
            let rate = SYNTH_BASE_RATE * (1.0 + SYNTH_PEAK_BOOST * demand_weight(hour));
            for &(from, to) in &active {
                matrix.rates[from][to] = rate;
            }
            matrix
        })
        .collect();

    let mut hourly_speed = [0.0; HOURS];
    for (hour, slot) in hourly_speed.iter_mut().enumerate() {
        *slot = SYNTH_SPEED_BASE_MPS - SYNTH_SPEED_DIP_MPS * congestion_weight(hour);
    }
    let speed_profiles = (0..SEGMENT_COUNT)
        .map(|segment| SpeedProfile { segment, hourly_mean_mps: hourly_speed })
        .collect();

    let horizon = HORIZON_SECS as u32;
    let up = generate_timetable(Direction::Up, SYNTH_HEADWAY_SECS, 0, horizon)
        .expect("static interval is positive");
    let down = generate_timetable(Direction::Down, SYNTH_HEADWAY_SECS, 180, horizon)
        .expect("static interval is positive");

    let config = ScenarioConfig {
        stops,
        od_matrices,
        speed_profiles,
        timetables: [down, up],
        speed_sigma: 0.65,
        dwell_board_secs: 2.0,
        dwell_alight_secs: 1.0,
        bus_capacity: 80,
        max_hold_secs: 60.0,
        target_headway_secs: 360.0,
        rng_seed: seed,
    };
    config.validate().expect("synthetic scenario must be internally consistent");
    config
}

#[derive(Serialize, Deserialize)]
struct StopRow {
    index: usize,
    kind: String,
    position_m: f64,
}

#[derive(Serialize, Deserialize)]
struct OdRow {
    hour: usize,
    from: usize,
    to: usize,
    rate_per_hour: f64,
}

#[derive(Serialize, Deserialize)]
struct SpeedRow {
    segment: usize,
    hour: usize,
    mean_mps: f64,
}

#[derive(Serialize, Deserialize)]
struct TimetableRow {
    direction: usize,
    departure_s: f64,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ScenarioError> {
    let file = fs::File::open(path)
        .map_err(|source| ScenarioError::Read { path: path.to_owned(), source })?;
    let mut reader = csv::Reader::from_reader(file);
    reader
        .deserialize()
        .collect::<Result<Vec<T>, csv::Error>>()
        .map_err(|source| ScenarioError::Csv { path: path.to_owned(), source })
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ScenarioError> {
    let file = fs::File::create(path)
        .map_err(|source| ScenarioError::Write { path: path.to_owned(), source })?;
    let mut writer = csv::Writer::from_writer(file);
    for row in rows {
        writer
            .serialize(row)
            .map_err(|source| ScenarioError::Csv { path: path.to_owned(), source })?;
    }
    writer
        .into_inner()
        .map_err(|e| ScenarioError::Write { path: path.to_owned(), source: e.into_error() })?
        .flush()
        .map_err(|source| ScenarioError::Write { path: path.to_owned(), source })?;
    Ok(())
}

/// Reads the five scenario files from `dir` and validates the result.
pub fn load_scenario(dir: &Path) -> Result<ScenarioConfig, ScenarioError> {
    let stop_rows: Vec<StopRow> = read_rows(&dir.join("stops.csv"))?;
    let mut stops = Vec::with_capacity(stop_rows.len());
    for (i, row) in stop_rows.into_iter().enumerate() {
        let kind = StopKind::parse(&row.kind).ok_or_else(|| {
            invalid("stops.csv", format!("row {i}: unknown stop kind {:?}", row.kind))
        })?;
        stops.push(StopSpec { index: row.index, kind, position_m: row.position_m });
    }

    let od_rows: Vec<OdRow> = read_rows(&dir.join("od.csv"))?;
    let mut od_matrices: Vec<OdMatrix> = (0..HOURS).map(OdMatrix::zero).collect();
    for (i, row) in od_rows.into_iter().enumerate() {
        if row.hour >= HOURS || row.from >= STOP_COUNT || row.to >= STOP_COUNT {
            return Err(invalid(
                "od.csv",
                format!(
                    "row {i}: indices out of range (hour {}, from {}, to {})",
                    row.hour, row.from, row.to
                ),
            ));
        }
        let slot = &mut od_matrices[row.hour].rates[row.from][row.to];
        if *slot != 0.0 {
            return Err(invalid(
                "od.csv",
                format!("row {i}: duplicate entry for hour {} pair ({},{})", row.hour, row.from, row.to),
            ));
        }
        *slot = row.rate_per_hour;
    }

    let speed_rows: Vec<SpeedRow> = read_rows(&dir.join("speeds.csv"))?;
    let mut speed_profiles: Vec<SpeedProfile> = (0..SEGMENT_COUNT)
        .map(|segment| SpeedProfile { segment, hourly_mean_mps: [0.0; HOURS] })
        .collect();
    let mut seen = [[false; HOURS]; SEGMENT_COUNT];
    for (i, row) in speed_rows.into_iter().enumerate() {
        if row.segment >= SEGMENT_COUNT || row.hour >= HOURS {
            return Err(invalid(
                "speeds.csv",
                format!("row {i}: indices out of range (segment {}, hour {})", row.segment, row.hour),
            ));
        }
        if seen[row.segment][row.hour] {
            return Err(invalid(
                "speeds.csv",
                format!("row {i}: duplicate entry for segment {} hour {}", row.segment, row.hour),
            ));
        }
        seen[row.segment][row.hour] = true;
        speed_profiles[row.segment].hourly_mean_mps[row.hour] = row.mean_mps;
    }
    for (segment, row) in seen.iter().enumerate() {
        for (hour, &filled) in row.iter().enumerate() {
            if !filled {
                return Err(invalid(
                    "speeds.csv",
                    format!("missing entry for segment {segment} hour {hour}"),
                ));
            }
        }
    }

    let timetable_rows: Vec<TimetableRow> = read_rows(&dir.join("timetable.csv"))?;
    let mut timetables = [
        Timetable { direction: Direction::Down, departures: Vec::new() },
        Timetable { direction: Direction::Up, departures: Vec::new() },
    ];
    for (i, row) in timetable_rows.into_iter().enumerate() {
        let direction = Direction::from_index(row.direction).ok_or_else(|| {
            invalid("timetable.csv", format!("row {i}: unknown direction {}", row.direction))
        })?;
        timetables[direction.index()].departures.push(row.departure_s);
    }

    let cfg = parse_cfg_file(&dir.join("scenario.cfg"))?;

    let config = ScenarioConfig {
        stops,
        od_matrices,
        speed_profiles,
        timetables,
        speed_sigma: cfg.speed_sigma,
        dwell_board_secs: cfg.dwell_board_secs,
        dwell_alight_secs: cfg.dwell_alight_secs,
        bus_capacity: cfg.bus_capacity,
        max_hold_secs: cfg.max_hold_secs,
        target_headway_secs: cfg.target_headway_secs,
        rng_seed: cfg.rng_seed,
    };
    config.validate()?;
    Ok(config)
}

/// Writes the five scenario files into `dir`, creating it if needed.
/// Emission order is fixed, so identical configs produce identical bytes.
pub fn save_scenario(config: &ScenarioConfig, dir: &Path) -> Result<(), ScenarioError> {
    config.validate()?;
    fs::create_dir_all(dir)
        .map_err(|source| ScenarioError::Write { path: dir.to_owned(), source })?;

    let stop_rows: Vec<StopRow> = config
        .stops
        .iter()
        .map(|s| StopRow {
            index: s.index,
            kind: s.kind.as_str().to_string(),
            position_m: s.position_m,
        })
        .collect();
    write_rows(&dir.join("stops.csv"), &stop_rows)?;

    let mut od_rows = Vec::new();
    for matrix in &config.od_matrices {
        for from in 0..STOP_COUNT {
            for to in 0..STOP_COUNT {
                let rate = matrix.rates[from][to];
                if rate != 0.0 {
                    od_rows.push(OdRow { hour: matrix.hour, from, to, rate_per_hour: rate });
                }
            }
        }
    }
    write_rows(&dir.join("od.csv"), &od_rows)?;

    let mut speed_rows = Vec::new();
    for profile in &config.speed_profiles {
        for (hour, &mean_mps) in profile.hourly_mean_mps.iter().enumerate() {
            speed_rows.push(SpeedRow { segment: profile.segment, hour, mean_mps });
        }
    }
    write_rows(&dir.join("speeds.csv"), &speed_rows)?;

    let mut timetable_rows = Vec::new();
    for direction in Direction::BOTH {
        for &departure_s in &config.timetable(direction).departures {
            timetable_rows.push(TimetableRow { direction: direction.index(), departure_s });
        }
    }
    write_rows(&dir.join("timetable.csv"), &timetable_rows)?;

    let path = dir.join("scenario.cfg");
    let mut file = fs::File::create(&path)
        .map_err(|source| ScenarioError::Write { path: path.clone(), source })?;
    write!(
        file,
        "speed_sigma = {}\ndwell_board_secs = {}\ndwell_alight_secs = {}\nbus_capacity = {}\nmax_hold_secs = {}\ntarget_headway_secs = {}\nrng_seed = {}\n",
        config.speed_sigma,
        config.dwell_board_secs,
        config.dwell_alight_secs,
        config.bus_capacity,
        config.max_hold_secs,
        config.target_headway_secs,
        config.rng_seed,
    )
    .map_err(|source| ScenarioError::Write { path: path.clone(), source })?;
    Ok(())
}

struct CfgValues {
    speed_sigma: f64,
    dwell_board_secs: f64,
    dwell_alight_secs: f64,
    bus_capacity: u32,
    max_hold_secs: f64,
    target_headway_secs: f64,
    rng_seed: u64,
}

fn parse_cfg_file(path: &Path) -> Result<CfgValues, ScenarioError> {
    let text = fs::read_to_string(path)
        .map_err(|source| ScenarioError::Read { path: path.to_owned(), source })?;
    let file = "scenario.cfg";
    let mut speed_sigma = None;
    let mut dwell_board_secs = None;
    let mut dwell_alight_secs = None;
    let mut bus_capacity = None;
    let mut max_hold_secs = None;
    let mut target_headway_secs = None;
    let mut rng_seed = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| invalid(file, format!("line {}: expected `key = value`", lineno + 1)))?;
        let key = key.trim();
        let value = value.trim();
        let parse_f64 = || {
            value.parse::<f64>().map_err(|_| {
                invalid(file, format!("line {}: {key} wants a number, got {value:?}", lineno + 1))
            })
        };
        let dup = |set: bool| {
            if set {
                Err(invalid(file, format!("line {}: duplicate key {key}", lineno + 1)))
            } else {
                Ok(())
            }
        };
        match key {
            "speed_sigma" => {
                dup(speed_sigma.is_some())?;
                speed_sigma = Some(parse_f64()?);
            }
            "dwell_board_secs" => {
                dup(dwell_board_secs.is_some())?;
                dwell_board_secs = Some(parse_f64()?);
            }
            "dwell_alight_secs" => {
                dup(dwell_alight_secs.is_some())?;
                dwell_alight_secs = Some(parse_f64()?);
            }
            "bus_capacity" => {
                dup(bus_capacity.is_some())?;
                bus_capacity = Some(value.parse::<u32>().map_err(|_| {
                    invalid(file, format!("line {}: bus_capacity wants an integer", lineno + 1))
                })?);
            }
            "max_hold_secs" => {
                dup(max_hold_secs.is_some())?;
                max_hold_secs = Some(parse_f64()?);
            }
            "target_headway_secs" => {
                dup(target_headway_secs.is_some())?;
                target_headway_secs = Some(parse_f64()?);
            }
            "rng_seed" => {
                dup(rng_seed.is_some())?;
                rng_seed = Some(value.parse::<u64>().map_err(|_| {
                    invalid(file, format!("line {}: rng_seed wants an integer", lineno + 1))
                })?);
            }
            other => {
                return Err(invalid(file, format!("line {}: unknown key {other:?}", lineno + 1)));
            }
        }
    }

    let missing = |name: &str| invalid(file, format!("missing key {name}"));
    Ok(CfgValues {
        speed_sigma: speed_sigma.ok_or_else(|| missing("speed_sigma"))?,
        dwell_board_secs: dwell_board_secs.ok_or_else(|| missing("dwell_board_secs"))?,
        dwell_alight_secs: dwell_alight_secs.ok_or_else(|| missing("dwell_alight_secs"))?,
        bus_capacity: bus_capacity.ok_or_else(|| missing("bus_capacity"))?,
        max_hold_secs: max_hold_secs.ok_or_else(|| missing("max_hold_secs"))?,
        target_headway_secs: target_headway_secs.ok_or_else(|| missing("target_headway_secs"))?,
        rng_seed: rng_seed.ok_or_else(|| missing("rng_seed"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timetable_shapes() {
        let t = generate_timetable(Direction::Up, 360, 0, 46800).unwrap();
        assert_eq!(t.departures.len(), 130);
        assert_eq!(t.departures[0], 0.0);
        assert_eq!(t.departures[1], 360.0);

        let t = generate_timetable(Direction::Down, 360, 180, 46800).unwrap();
        assert_eq!(t.departures.len(), 130);
        assert_eq!(t.departures[0], 180.0);

        let t = generate_timetable(Direction::Up, 360, 0, 360).unwrap();
        assert_eq!(t.departures, vec![0.0]);

        assert!(matches!(
            generate_timetable(Direction::Up, 0, 0, 46800),
            Err(ScenarioError::Argument(_))
        ));
        assert!(matches!(
            generate_timetable(Direction::Up, 100, 100, 46800),
            Err(ScenarioError::Argument(_))
        ));
    }

    #[test]
    fn timetable_length_matches_closed_form() {
        for (interval, offset, horizon) in
            [(360u32, 0u32, 46800u32), (360, 180, 46800), (77, 30, 10000), (500, 499, 500)]
        {
            let t = generate_timetable(Direction::Up, interval, offset, horizon).unwrap();
            let expected = ((horizon - offset) as f64 / interval as f64).ceil() as usize;
            assert_eq!(t.departures.len(), expected, "{interval}/{offset}/{horizon}");
        }
    }

    #[test]
    fn synthetic_demand_and_speed_peak_at_rush_hours() {
        let config = generate_synthetic_scenario(7);
        let totals: Vec<f64> = config.od_matrices.iter().map(OdMatrix::total_rate).collect();
        // Morning bump is local, evening bump is the global peak at 4x base.
        assert!(totals[3] > totals[0]);
        assert!(totals[3] > totals[6]);
        let peak = totals.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(totals[11], peak);
        assert!((peak / totals[0] - 4.0).abs() < 1e-6, "{}", peak / totals[0]);

        let avg_speed = |hour: usize| -> f64 {
            config.speed_profiles.iter().map(|p| p.hourly_mean_mps[hour]).sum::<f64>()
                / SEGMENT_COUNT as f64
        };
        assert!(avg_speed(11) < avg_speed(7));
        let slowest = (0..HOURS).map(avg_speed).fold(f64::MAX, f64::min);
        assert_eq!(avg_speed(3), slowest);
        assert_eq!(avg_speed(11), slowest);
        assert_eq!(slowest, 6.0);
    }

    #[test]
    fn synthetic_scenario_is_deterministic() {
        assert_eq!(generate_synthetic_scenario(7), generate_synthetic_scenario(7));
        assert_ne!(generate_synthetic_scenario(7), generate_synthetic_scenario(8));
    }

    #[test]
    fn hour_of_clamps_to_service_window() {
        assert_eq!(hour_of(0.0), 0);
        assert_eq!(hour_of(3599.9), 0);
        assert_eq!(hour_of(3600.0), 1);
        assert_eq!(hour_of(46799.0), 12);
        assert_eq!(hour_of(50000.0), 12);
        assert_eq!(hour_of(-5.0), 0);
    }

    #[test]
    fn validation_rejects_terminal_demand() {
        let mut config = generate_synthetic_scenario(7);
        config.od_matrices[2].rates[0][5] = 3.0;
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("od.csv"), "{err}");
    }

    #[test]
    fn validation_rejects_uneven_timetable_gap() {
        let mut config = generate_synthetic_scenario(7);
        config.timetables[1].departures[5] += 1.0;
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("gap"), "{err}");
    }

    #[test]
    fn validation_rejects_misplaced_terminal_kind() {
        let mut config = generate_synthetic_scenario(7);
        config.stops[3].kind = StopKind::Terminal;
        assert!(config.validate().is_err());
    }
}
