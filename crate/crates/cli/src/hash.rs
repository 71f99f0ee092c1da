//! Config fingerprints embedded in every artifact.

use crate::config::ExperimentConfig;
use std::hash::Hasher;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Canonical JSON of the fields that change results. Output location,
/// run name and parallelism are left out.
fn canonical(cfg: &ExperimentConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    let o = v.as_object_mut().expect("config is an object");
    for k in ["output_dir", "name", "jobs"] {
        o.remove(k);
    }
    v
}

/// Hash of a whole sweep.
pub fn run_hash(cfg: &ExperimentConfig) -> u64 {
    fnv1a(canonical(cfg).to_string().as_bytes())
}

/// Hash of one cell: independent of which other cuts and seeds are swept.
pub fn cell_hash(cfg: &ExperimentConfig, cut: usize, seed: u64) -> u64 {
    let mut v = canonical(cfg);
    let o = v.as_object_mut().expect("config is an object");
    o.remove("cuts");
    o.remove("seeds");
    o.insert("cut".into(), cut.into());
    o.insert("seed".into(), seed.into());
    fnv1a(v.to_string().as_bytes())
}

pub fn hex(h: u64) -> String {
    format!("{h:016x}")
}

pub fn parse_hex(s: &str) -> Option<u64> {
    (s.len() == 16).then(|| u64::from_str_radix(s, 16).ok()).flatten()
}
