//! Seeded randomness, split into named streams so that consumers never
//! perturb each other's draws.
//!
//! Every random quantity in the system is pulled from a [`RngStream`], which
//! is a ChaCha8 generator keyed by `(seed, kind, index)`. Two runs with the
//! same seed therefore see identical demand and identical traffic noise even
//! if one of them consults a policy network (which draws from its own
//! stream) and the other does not. Traffic noise goes further: each
//! `(trip, segment)` pair gets its own indexed substream, so the travel-time
//! shocks a trip experiences do not depend on how many draws other trips
//! made before it.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::scenario::{Direction, OdMatrix, STOP_COUNT};

/// Sampled speeds never drop below this, so trips always finish.
pub const SPEED_FLOOR_MPS: f64 = 0.5;

/// Consumers of randomness. The discriminant is baked into the ChaCha
/// stream id, so adding a variant never shifts existing streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    /// Passenger arrival processes.
    Demand = 0,
    /// Per-trip, per-segment speed noise.
    Traffic = 1,
    /// Policy action sampling during rollouts.
    Policy = 2,
    /// Network weight initialization.
    Init = 3,
    /// Minibatch index sampling during training.
    Batch = 4,
}

/// A ChaCha8 generator pinned to one `(seed, kind, index)` triple.
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, kind: StreamKind) -> Self {
        Self::with_index(seed, kind, 0)
    }

    /// Indexed substream, e.g. one per `(trip, segment)`. `index` must fit
    /// in 32 bits; the kind occupies the high half of the stream id.
    pub fn with_index(seed: u64, kind: StreamKind, index: u64) -> Self {
        debug_assert!(index < (1 << 32), "substream index {index} overflows");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((kind as u64) << 32) | index);
        RngStream { rng }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SampleError {
    #[error("arrival rate must be nonnegative, got {0}")]
    NegativeRate(f64),
    #[error("window end {1} must be greater than start {0}")]
    EmptyWindow(f64, f64),
    #[error("speed mean must be positive, got {0}")]
    NonPositiveMean(f64),
    #[error("speed sigma must be nonnegative, got {0}")]
    NegativeSigma(f64),
}

/// One passenger wanting to ride between two intermediate stops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassengerArrival {
    /// Seconds since service start.
    pub time: f64,
    pub origin: usize,
    pub destination: usize,
}

impl PassengerArrival {
    pub fn new(time: f64, origin: usize, destination: usize) -> Self {
        debug_assert!(origin != destination);
        debug_assert!((1..STOP_COUNT - 1).contains(&origin));
        debug_assert!((1..STOP_COUNT - 1).contains(&destination));
        PassengerArrival { time, origin, destination }
    }

    /// Travel direction implied by the stop pair.
    pub fn direction(&self) -> Direction {
        if self.origin < self.destination {
            Direction::Up
        } else {
            Direction::Down
        }
    }
}

/// Draws arrival instants of a Poisson process with the given hourly rate
/// over `[window.0, window.1)`. Times come back strictly increasing.
pub fn sample_arrivals(
    rate_per_hour: f64,
    window: (f64, f64),
    rng: &mut RngStream,
) -> Result<Vec<f64>, SampleError> {
    if !rate_per_hour.is_finite() || rate_per_hour < 0.0 {
        return Err(SampleError::NegativeRate(rate_per_hour));
    }
    if !window.0.is_finite() || !window.1.is_finite() || window.1 <= window.0 {
        return Err(SampleError::EmptyWindow(window.0, window.1));
    }
    let mut out = Vec::new();
    if rate_per_hour == 0.0 {
        return Ok(out);
    }
    let gaps = Exp::new(rate_per_hour / 3600.0).expect("rate checked positive");
    let mut t = window.0;
    loop {
        let dt: f64 = gaps.sample(rng);
        if dt <= 0.0 {
            // Probability-zero draw; skip it to keep times strictly increasing.
            continue;
        }
        t += dt;
        if t >= window.1 {
            return Ok(out);
        }
        out.push(t);
    }
}

/// One Gaussian speed draw, clamped at [`SPEED_FLOOR_MPS`]. A zero sigma
/// returns the mean without touching the generator.
pub fn sample_segment_speed(
    mean_mps: f64,
    sigma: f64,
    rng: &mut RngStream,
) -> Result<f64, SampleError> {
    if !mean_mps.is_finite() || mean_mps <= 0.0 {
        return Err(SampleError::NonPositiveMean(mean_mps));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(SampleError::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(mean_mps);
    }
    let noise = Normal::new(mean_mps, sigma).expect("parameters checked");
    Ok(noise.sample(rng).max(SPEED_FLOOR_MPS))
}

/// Realizes the full day of passenger arrivals for one seed. Matrices must
/// be hour-sorted; pairs are visited in `(hour, origin, destination)` order
/// so the realization is a pure function of the seed and the matrices.
pub fn generate_demand(
    od: &[OdMatrix],
    seed: u64,
) -> Result<Vec<PassengerArrival>, SampleError> {
    let mut rng = RngStream::new(seed, StreamKind::Demand);
    let mut out = Vec::new();
    for matrix in od {
        let start = matrix.hour as f64 * 3600.0;
        let window = (start, start + 3600.0);
        for origin in 0..STOP_COUNT {
            for destination in 0..STOP_COUNT {
                let rate = matrix.rates[origin][destination];
                if rate == 0.0 {
                    continue;
                }
                for time in sample_arrivals(rate, window, &mut rng)? {
                    out.push(PassengerArrival::new(time, origin, destination));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_yields_no_arrivals() {
        let mut rng = RngStream::new(1, StreamKind::Demand);
        let got = sample_arrivals(0.0, (0.0, 3600.0), &mut rng).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn invalid_arguments_are_rejected() {
        let mut rng = RngStream::new(1, StreamKind::Demand);
        assert!(matches!(
            sample_arrivals(-1.0, (0.0, 1.0), &mut rng),
            Err(SampleError::NegativeRate(_))
        ));
        assert!(matches!(
            sample_arrivals(1.0, (5.0, 5.0), &mut rng),
            Err(SampleError::EmptyWindow(..))
        ));
        assert!(matches!(
            sample_segment_speed(0.0, 1.0, &mut rng),
            Err(SampleError::NonPositiveMean(_))
        ));
        assert!(matches!(
            sample_segment_speed(10.0, -0.1, &mut rng),
            Err(SampleError::NegativeSigma(_))
        ));
    }

    #[test]
    fn hourly_counts_match_rate() {
        let mut rng = RngStream::new(11, StreamKind::Demand);
        let mut total = 0usize;
        for hour in 0..100 {
            let t0 = hour as f64 * 3600.0;
            total += sample_arrivals(36.0, (t0, t0 + 3600.0), &mut rng)
                .unwrap()
                .len();
        }
        let mean = total as f64 / 100.0;
        assert!((34.0..=38.0).contains(&mean), "mean hourly count {mean}");
    }

    #[test]
    fn empty_window_probability_matches_poisson() {
        // Rate 3600/h over one second is a unit-mean Poisson count, so the
        // no-arrival probability should sit near exp(-1).
        let mut rng = RngStream::new(5, StreamKind::Demand);
        let trials = 100_000;
        let mut empty = 0usize;
        for i in 0..trials {
            let t0 = i as f64;
            if sample_arrivals(3600.0, (t0, t0 + 1.0), &mut rng)
                .unwrap()
                .is_empty()
            {
                empty += 1;
            }
        }
        let frac = empty as f64 / trials as f64;
        assert!(
            (frac - (-1.0f64).exp()).abs() <= 0.02,
            "empty fraction {frac}"
        );
    }

    #[test]
    fn arrivals_stay_inside_window_and_sorted() {
        let mut rng = RngStream::new(3, StreamKind::Demand);
        let times = sample_arrivals(500.0, (7200.0, 10800.0), &mut rng).unwrap();
        assert!(!times.is_empty());
        for pair in times.windows(2) {
            assert!(pair[0] < pair[1]);
        }
        assert!(times[0] >= 7200.0);
        assert!(*times.last().unwrap() < 10800.0);
    }

    #[test]
    fn zero_sigma_speed_is_exact() {
        let mut rng = RngStream::new(9, StreamKind::Traffic);
        let v = sample_segment_speed(12.0, 0.0, &mut rng).unwrap();
        assert_eq!(v, 12.0);
    }

    #[test]
    fn speeds_clamp_at_floor() {
        let mut rng = RngStream::new(2, StreamKind::Traffic);
        let mut clamped = 0usize;
        for _ in 0..200 {
            let v = sample_segment_speed(1.0, 50.0, &mut rng).unwrap();
            assert!(v >= SPEED_FLOOR_MPS);
            if v == SPEED_FLOOR_MPS {
                clamped += 1;
            }
        }
        assert!(clamped > 0, "wide noise never hit the floor");
    }

    #[test]
    fn speed_moments_match_parameters() {
        let mut rng = RngStream::new(7, StreamKind::Traffic);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let v = sample_segment_speed(12.0, 1.5, &mut rng).unwrap();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let sd = (sumsq / n as f64 - mean * mean).sqrt();
        assert!((11.97..=12.03).contains(&mean), "mean {mean}");
        assert!((1.45..=1.55).contains(&sd), "sd {sd}");
    }

    #[test]
    fn streams_reproduce_and_separate() {
        let draw = |seed, kind, index| {
            let mut rng = RngStream::with_index(seed, kind, index);
            (0..16).map(|_| rng.next_u64()).collect::<Vec<_>>()
        };
        assert_eq!(
            draw(7, StreamKind::Demand, 0),
            draw(7, StreamKind::Demand, 0)
        );
        assert_ne!(
            draw(7, StreamKind::Demand, 0),
            draw(7, StreamKind::Traffic, 0)
        );
        assert_ne!(
            draw(7, StreamKind::Traffic, 1),
            draw(7, StreamKind::Traffic, 2)
        );
        assert_ne!(
            draw(7, StreamKind::Demand, 0),
            draw(8, StreamKind::Demand, 0)
        );
    }

    #[test]
    fn arrival_direction_follows_stop_order() {
        assert_eq!(PassengerArrival::new(0.0, 3, 9).direction(), Direction::Up);
        assert_eq!(
            PassengerArrival::new(0.0, 9, 3).direction(),
            Direction::Down
        );
    }
}
