//! Synthetic problem instances: beam pools, constraint sets, persistence.
//!
//! A [`Scenario`] bundles the assignment grid dimensions, a pool of beams with
//! integer bandwidth demands, and the intra-/inter-group constraint pairs that
//! the environment enforces. Generation is fully seeded so instances are
//! reproducible byte-for-byte.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Beam identifier, unique within a pool.
pub type BeamId = u32;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid instance: {0}")]
    Instance(String),
    #[error("scenario validation failed: {0}")]
    Validation(String),
    #[error("failed to parse scenario file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A single beam: bandwidth demand in slots, synthetic pointing location in
/// the unit square, and the serving-satellite band it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    pub id: BeamId,
    pub bw: u32,
    pub pos: [f64; 2],
    pub sat: u32,
}

impl Beam {
    pub fn distance(&self, other: &Beam) -> f64 {
        let dx = self.pos[0] - other.pos[0];
        let dy = self.pos[1] - other.pos[1];
        (dx * dx + dy * dy).sqrt()
    }
}

/// Unordered constraint pairs, stored canonically as `(lo, hi)` with `lo < hi`.
///
/// A pair may appear in both sets; the environment checks each kind
/// independently.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub intra: BTreeSet<(BeamId, BeamId)>,
    pub inter: BTreeSet<(BeamId, BeamId)>,
}

/// Canonical unordered form of a beam-id pair.
pub fn canonical_pair(i: BeamId, j: BeamId) -> (BeamId, BeamId) {
    if i <= j {
        (i, j)
    } else {
        (j, i)
    }
}

impl ConstraintSet {
    pub fn insert_intra(&mut self, i: BeamId, j: BeamId) {
        self.intra.insert(canonical_pair(i, j));
    }

    pub fn insert_inter(&mut self, i: BeamId, j: BeamId) {
        self.inter.insert(canonical_pair(i, j));
    }

    pub fn has_intra(&self, i: BeamId, j: BeamId) -> bool {
        self.intra.contains(&canonical_pair(i, j))
    }

    pub fn has_inter(&self, i: BeamId, j: BeamId) -> bool {
        self.inter.contains(&canonical_pair(i, j))
    }

    pub fn is_empty(&self) -> bool {
        self.intra.is_empty() && self.inter.is_empty()
    }
}

/// A full problem instance: grid shape, beam pool, and constraint pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub n_fg: usize,
    pub n_fs: usize,
    pub beams: Vec<Beam>,
    #[serde(flatten)]
    pub constraints: ConstraintSet,
    #[serde(default)]
    pub meta: String,
}

impl Scenario {
    /// Total number of grid cells, `n_fg * n_fs`.
    pub fn cells(&self) -> usize {
        self.n_fg * self.n_fs
    }

    pub fn find_beam(&self, id: BeamId) -> Option<&Beam> {
        self.beams.iter().find(|b| b.id == id)
    }

    /// Checks every structural invariant; errors name the offending field.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.n_fg < 1 {
            return Err(ScenarioError::Validation("n_fg must be >= 1".into()));
        }
        if self.n_fs < 1 {
            return Err(ScenarioError::Validation("n_fs must be >= 1".into()));
        }
        if self.n_fg % 2 != 0 {
            return Err(ScenarioError::Validation(format!(
                "n_fg must be even (groups pair off by polarization), got {}",
                self.n_fg
            )));
        }
        let mut ids = BTreeSet::new();
        for beam in &self.beams {
            if !ids.insert(beam.id) {
                return Err(ScenarioError::Validation(format!(
                    "beams: duplicate id {}",
                    beam.id
                )));
            }
            if beam.bw < 1 {
                return Err(ScenarioError::Validation(format!(
                    "beams: beam {} has bw 0",
                    beam.id
                )));
            }
            if beam.bw as usize > self.n_fs {
                return Err(ScenarioError::Validation(format!(
                    "beams: beam {} demands bw {} > n_fs {}",
                    beam.id, beam.bw, self.n_fs
                )));
            }
        }
        for (name, set) in [("intra", &self.constraints.intra), ("inter", &self.constraints.inter)]
        {
            for &(i, j) in set {
                if i == j {
                    return Err(ScenarioError::Validation(format!(
                        "{name}: self-pair [{i}, {j}]"
                    )));
                }
                if i > j {
                    return Err(ScenarioError::Validation(format!(
                        "{name}: pair [{i}, {j}] not in canonical i < j order"
                    )));
                }
                for id in [i, j] {
                    if !ids.contains(&id) {
                        return Err(ScenarioError::Validation(format!(
                            "{name}: pair [{i}, {j}] references unknown beam id {id}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic instance generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_beams: usize,
    pub n_sats: u32,
    pub bw_min: u32,
    pub bw_max: u32,
    /// Beams closer than this get an inter-group constraint.
    pub r_inter: f64,
    /// Beams in the same satellite band closer than this get an intra-group
    /// constraint.
    pub r_intra: f64,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.bw_min < 1 || self.bw_min > self.bw_max {
            return Err(ScenarioError::Config(format!(
                "require 1 <= bw_min <= bw_max, got bw_min={} bw_max={}",
                self.bw_min, self.bw_max
            )));
        }
        if self.r_inter < 0.0 || self.r_intra < 0.0 {
            return Err(ScenarioError::Config("constraint radii must be >= 0".into()));
        }
        if self.n_sats < 1 {
            return Err(ScenarioError::Config("n_sats must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draws `cfg.n_beams` beams: bandwidth uniform in `{bw_min..bw_max}`,
/// position uniform in the unit square, satellite band from the x stripe.
pub fn generate_pool(cfg: &GenConfig) -> Result<Vec<Beam>, ScenarioError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut beams = Vec::with_capacity(cfg.n_beams);
    for id in 0..cfg.n_beams {
        let bw = rng.gen_range(cfg.bw_min..=cfg.bw_max);
        let x: f64 = rng.gen();
        let y: f64 = rng.gen();
        let sat = ((x * cfg.n_sats as f64) as u32).min(cfg.n_sats - 1);
        beams.push(Beam {
            id: id as BeamId,
            bw,
            pos: [x, y],
            sat,
        });
    }
    Ok(beams)
}

/// Builds constraint pairs from the geometric model: inter when within
/// `r_inter`, intra when within `r_intra` and in the same satellite band.
pub fn generate_constraints(
    beams: &[Beam],
    cfg: &GenConfig,
) -> Result<ConstraintSet, ScenarioError> {
    if beams.is_empty() {
        return Err(ScenarioError::Instance(
            "cannot build constraints for an empty beam pool".into(),
        ));
    }
    let mut set = ConstraintSet::default();
    for (a, bi) in beams.iter().enumerate() {
        for bj in beams.iter().skip(a + 1) {
            let d = bi.distance(bj);
            if d < cfg.r_inter {
                set.insert_inter(bi.id, bj.id);
            }
            if bi.sat == bj.sat && d < cfg.r_intra {
                set.insert_intra(bi.id, bj.id);
            }
        }
    }
    Ok(set)
}

/// Generates a complete scenario (pool plus constraints) in one call.
pub fn generate_scenario(
    n_fg: usize,
    n_fs: usize,
    cfg: &GenConfig,
    meta: &str,
) -> Result<Scenario, ScenarioError> {
    let beams = generate_pool(cfg)?;
    if beams.iter().any(|b| b.bw as usize > n_fs) {
        return Err(ScenarioError::Config(format!(
            "bw_max {} exceeds n_fs {}",
            cfg.bw_max, n_fs
        )));
    }
    let constraints = generate_constraints(&beams, cfg)?;
    let scenario = Scenario {
        n_fg,
        n_fs,
        beams,
        constraints,
        meta: meta.to_string(),
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Splits a pool into disjoint train/test halves. `|test|` is
/// `round(test_fraction * |pool|)`.
pub fn split_pool(
    pool: &[Beam],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<Beam>, Vec<Beam>), ScenarioError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(ScenarioError::Config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    indices.shuffle(&mut rng);
    let n_test = (test_fraction * pool.len() as f64).round() as usize;
    let test: Vec<Beam> = indices[..n_test].iter().map(|&i| pool[i].clone()).collect();
    let train: Vec<Beam> = indices[n_test..].iter().map(|&i| pool[i].clone()).collect();
    Ok((train, test))
}

/// Samples `n` distinct beams without replacement; the returned order is the
/// assignment order for the episode.
pub fn sample_episode(pool: &[Beam], n: usize, seed: u64) -> Result<Vec<Beam>, ScenarioError> {
    if n > pool.len() {
        return Err(ScenarioError::Instance(format!(
            "cannot sample {n} beams from a pool of {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    let (picked, _) = indices.partial_shuffle(&mut rng, n);
    Ok(picked.iter().map(|&i| pool[i].clone()).collect())
}

/// Scales every demand by `factor`, rounding half away from zero and
/// saturating at `cap`. Ids and positions are untouched.
pub fn scale_bandwidth(pool: &[Beam], factor: f64, cap: u32) -> Vec<Beam> {
    pool.iter()
        .map(|b| Beam {
            bw: ((b.bw as f64 * factor).round() as u32).min(cap),
            ..b.clone()
        })
        .collect()
}

/// Writes the canonical JSON form: beams sorted by id, pairs lexicographic,
/// so identical scenarios serialize byte-identically.
pub fn save_scenario(scenario: &Scenario, path: &Path) -> Result<(), ScenarioError> {
    scenario.validate()?;
    let mut canonical = scenario.clone();
    canonical.beams.sort_by_key(|b| b.id);
    let mut text = serde_json::to_string_pretty(&canonical)
        .map_err(|e| ScenarioError::Parse(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path)?;
    let scenario: Scenario =
        serde_json::from_str(&text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    scenario.validate()?;
    Ok(scenario)
}
