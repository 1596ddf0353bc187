//! Traffic demand: `veh <origin> <dest> <depart_s>` records.

use std::fmt::Write as _;
use std::path::Path;

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowRecord {
    pub origin: usize,
    pub dest: usize,
    pub depart_s: f64,
}

pub fn parse_flow(text: &str) -> Result<Vec<FlowRecord>, SimError> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "veh" {
            return Err(SimError::Parse {
                line,
                msg: format!("expected `veh <origin> <dest> <depart_s>`, got `{body}`"),
            });
        }
        let parse_id = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| SimError::Parse {
                line,
                msg: format!("bad {what} `{s}`"),
            })
        };
        let origin = parse_id(fields[1], "origin")?;
        let dest = parse_id(fields[2], "destination")?;
        let depart_s = fields[3].parse::<f64>().map_err(|_| SimError::Parse {
            line,
            msg: format!("bad departure time `{}`", fields[3]),
        })?;
        if !depart_s.is_finite() || depart_s < 0.0 {
            return Err(SimError::Parse {
                line,
                msg: format!("departure time must be non-negative, got {depart_s}"),
            });
        }
        records.push(FlowRecord {
            origin,
            dest,
            depart_s,
        });
    }
    Ok(records)
}

pub fn load_flow(path: impl AsRef<Path>) -> Result<Vec<FlowRecord>, SimError> {
    parse_flow(&std::fs::read_to_string(path)?)
}

pub fn flow_to_text(records: &[FlowRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "veh {} {} {}", r.origin, r.dest, r.depart_s);
    }
    out
}
