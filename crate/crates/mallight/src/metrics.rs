//! Shared result record for a single simulated run.

/// Throughput and accident figures for one run, optionally paired with a
/// reduction ratio once a no-malfunction reference run exists.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentMetrics {
    /// Trips completed anywhere in the network during the window.
    pub network_throughput: u64,
    /// Mean number of vehicles that fully crossed the focus intersections
    /// during the window.
    pub intersection_throughput: f64,
    /// Percent throughput lost versus the no-malfunction reference;
    /// `None` until the pairing run exists or when the reference is zero.
    pub reduction_ratio: Option<f64>,
    /// Collisions logged at the focus intersections during the window.
    pub accidents: u64,
    pub seed: u64,
    /// Fingerprint of the full experiment configuration.
    pub config_digest: String,
}

/// Percent reduction from `reference` to `observed`; `None` when the
/// reference is zero.
pub fn reduction_ratio(reference: f64, observed: f64) -> Option<f64> {
    if reference > 0.0 {
        Some(100.0 * (reference - observed) / reference)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_ratio_matches_hand_computed_rows() {
        // 538 -> 390 loses 27.5%; 540 -> 365 loses 32.4%.
        assert!((reduction_ratio(538.0, 390.0).unwrap() - 27.5).abs() < 0.05);
        assert!((reduction_ratio(540.0, 365.0).unwrap() - 32.4).abs() < 0.05);
    }

    #[test]
    fn zero_reference_has_no_ratio() {
        assert_eq!(reduction_ratio(0.0, 0.0), None);
    }
}
