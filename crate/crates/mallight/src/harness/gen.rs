//! Synthetic dataset generation: uniform grid networks and steady-rate
//! random-OD traffic flows.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::HarnessError;
use crate::network::{Intersection, RoadNetwork, RoadSegment, LANES_PER_DIRECTION};
use crate::simulator::FlowRecord;

/// Uniform `rows x cols` lattice with `block` meters between neighboring
/// intersections. Node (r, c) gets id `r*cols + c`; row 0 is the north
/// edge and x grows eastward, so id 0 sits at the upper-left corner.
pub fn generate_grid(rows: usize, cols: usize, block: f64) -> Result<RoadNetwork, HarnessError> {
    if rows < 2 || cols < 2 {
        return Err(HarnessError::BadGrid { rows, cols });
    }
    if !(block.is_finite() && block > 0.0) {
        return Err(HarnessError::Config(format!(
            "block length must be positive, got {block}"
        )));
    }
    let mut nodes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            nodes.push(Intersection {
                id: r * cols + c,
                x: c as f64 * block,
                y: -(r as f64) * block,
            });
        }
    }
    let mut edges = Vec::new();
    let mut push_pair = |a: usize, b: usize| {
        for (from, to) in [(a, b), (b, a)] {
            edges.push(RoadSegment {
                from,
                to,
                length_m: block,
                lanes_per_direction: LANES_PER_DIRECTION,
            });
        }
    };
    for r in 0..rows {
        for c in 0..cols {
            let id = r * cols + c;
            if c + 1 < cols {
                push_pair(id, id + 1);
            }
            if r + 1 < rows {
                push_pair(id, id + cols);
            }
        }
    }
    Ok(RoadNetwork::new(nodes, edges)?)
}

/// Where trip endpoints may fall.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdPolicy {
    /// Uniform over all ordered node pairs with distinct endpoints.
    All,
    /// Uniform over boundary nodes (degree below four).
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSpec {
    /// Vehicles inserted network-wide per 300 seconds.
    pub rate_per_300s: u64,
    pub duration_s: u64,
    pub od: OdPolicy,
    pub seed: u64,
}

/// Exactly `rate * duration / 300` vehicles with evenly spaced departures
/// and seeded uniform origin/destination pairs.
pub fn generate_flow(net: &RoadNetwork, spec: &FlowSpec) -> Result<Vec<FlowRecord>, HarnessError> {
    if spec.rate_per_300s == 0 {
        return Err(HarnessError::Config("arrival rate must be positive".into()));
    }
    let candidates: Vec<usize> = match spec.od {
        OdPolicy::All => (0..net.node_count()).collect(),
        OdPolicy::Boundary => (0..net.node_count())
            .filter(|&v| net.neighbors(v).len() < 4)
            .collect(),
    };
    if candidates.len() < 2 {
        return Err(HarnessError::Config(
            "need at least two candidate endpoints for flow generation".into(),
        ));
    }
    let count = spec.rate_per_300s * spec.duration_s / 300;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(count as usize);
    for i in 0..count {
        let depart_s = i as f64 * spec.duration_s as f64 / count as f64;
        let o = rng.random_range(0..candidates.len());
        let mut d = rng.random_range(0..candidates.len() - 1);
        if d >= o {
            d += 1;
        }
        records.push(FlowRecord {
            origin: candidates[o],
            dest: candidates[d],
            depart_s,
        });
    }
    Ok(records)
}
