//! Headway-regularity reward. The surface forms a ridge peaking where both
//! gaps sit exactly on the target; it falls away with schedule deviation,
//! with asymmetry between the two gaps, and takes a flat penalty once
//! either gap strays past half the target.

/// Weight on the |h_f - h_b| asymmetry term.
pub const ASYMMETRY_WEIGHT: f64 = 0.5;
/// Flat penalty once either deviation exceeds half the target headway.
pub const LATE_PENALTY: f64 = 20.0;

/// Canonical target headway used by the fixed-target reward.
const TARGET_SECS: f64 = 360.0;

/// Reward against the standard 360 s target.
pub fn reward(h_f: f64, h_b: f64) -> f64 {
    reward_for_target(h_f, h_b, TARGET_SECS)
}

/// Both headways in seconds, nonnegative. The deviation term averages the
/// two gaps' deviations weighted by their own magnitudes, i.e. with
/// a = |h_f - target| and b = |h_b - target| it contributes
/// -(a^2 + b^2)/(a + b), which is exchange-symmetric and exactly 0 at the
/// apex. Equivalent to weighting -a by a/(a+b) and -b by b/(a+b), written
/// in a form with no tie-break constant so symmetry holds bitwise.
pub fn reward_for_target(h_f: f64, h_b: f64, target: f64) -> f64 {
    debug_assert!(h_f >= 0.0 && h_b >= 0.0, "headways are time gaps");
    let a = (h_f - target).abs();
    let b = (h_b - target).abs();
    let deviation = if a + b > 0.0 { -(a * a + b * b) / (a + b) } else { 0.0 };
    let asymmetry = -ASYMMETRY_WEIGHT * (h_f - h_b).abs();
    let penalty = if a > target / 2.0 || b > target / 2.0 { -LATE_PENALTY } else { 0.0 };
    deviation + asymmetry + penalty
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn frozen_surface_values() {
        assert_eq!(reward(360.0, 360.0), 0.0);
        assert_eq!(reward(360.0, 540.0), -270.0);
        assert_eq!(reward(180.0, 540.0), -360.0);
        assert_eq!(reward(600.0, 360.0), -380.0);
    }

    #[test]
    fn penalty_boundary_is_strict() {
        // Deviation of exactly 180 stays penalty-free; one second more pays.
        assert_eq!(reward(540.0, 360.0), -270.0);
        assert_eq!(reward(541.0, 360.0), -181.0 - 90.5 - 20.0);
    }

    #[test]
    fn diagonal_collapses_to_single_deviation() {
        for h in [0.0, 90.0, 180.0, 360.0, 540.0, 720.0] {
            let a = (h - 360.0_f64).abs();
            let expected = -a - if a > 180.0 { 20.0 } else { 0.0 };
            assert_eq!(reward(h, h), expected, "h = {h}");
        }
    }

    #[test]
    fn symmetric_in_the_two_gaps() {
        let mut rng = crate::stochastic::RngStream::new(17, crate::stochastic::StreamKind::Batch);
        for _ in 0..10_000 {
            let a = rng.random_range(0.0..720.0);
            let b = rng.random_range(0.0..720.0);
            let lhs = reward(a, b);
            let rhs = reward(b, a);
            assert!((lhs - rhs).abs() <= 1e-9, "({a}, {b}): {lhs} vs {rhs}");
        }
    }

    #[test]
    fn apex_dominates_neighbors() {
        let apex = reward(360.0, 360.0);
        for (df, db) in [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0), (5.0, -5.0)] {
            assert!(reward(360.0 + df, 360.0 + db) < apex);
        }
    }
}
