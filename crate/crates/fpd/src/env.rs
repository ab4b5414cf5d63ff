//! The frequency-plan MDP: placements, violation semantics, grid and
//! tetris-like action spaces, state tensors, and the three reward functions.
//!
//! One timestep assigns (or, in the tetris-like space, nudges) a single beam;
//! an episode ends when every beam of the sampled sequence is finalized.
//! Groups and slots are 0-based throughout; polarization is group-index
//! parity.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{Beam, BeamId, Scenario};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("invalid instance: {0}")]
    Instance(String),
    #[error("action does not match the episode's action space")]
    ActionSpaceMismatch,
    #[error("contract violation: {0}")]
    Contract(String),
}

/// A finalized or tentative assignment: frequency group (row) and first slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub group: usize,
    pub start: usize,
}

/// Cells `(group, slot)` occupied by a placement of the given demand.
pub fn occupied_cells(p: Placement, bw: u32) -> Vec<(usize, usize)> {
    (p.start..p.start + bw as usize).map(|s| (p.group, s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionSpaceKind {
    Grid,
    Tetris,
}

impl ActionSpaceKind {
    /// Number of discrete actions for a given grid.
    pub fn size(self, n_fg: usize, n_fs: usize) -> usize {
        match self {
            ActionSpaceKind::Grid => n_fg * n_fs,
            ActionSpaceKind::Tetris => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TetrisMove {
    Up,
    Down,
    Left,
    Right,
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Grid { group: usize, start: usize },
    Tetris(TetrisMove),
}

impl Action {
    /// Decodes a flat action index for the given space and grid shape.
    pub fn from_index(
        space: ActionSpaceKind,
        n_fg: usize,
        n_fs: usize,
        index: usize,
    ) -> Result<Action, EnvError> {
        if index >= space.size(n_fg, n_fs) {
            return Err(EnvError::Contract(format!(
                "action index {index} out of range for {space:?}"
            )));
        }
        Ok(match space {
            ActionSpaceKind::Grid => Action::Grid {
                group: index / n_fs,
                start: index % n_fs,
            },
            ActionSpaceKind::Tetris => Action::Tetris(match index {
                0 => TetrisMove::Up,
                1 => TetrisMove::Down,
                2 => TetrisMove::Left,
                3 => TetrisMove::Right,
                _ => TetrisMove::New,
            }),
        })
    }

    pub fn index(&self, n_fs: usize) -> usize {
        match self {
            Action::Grid { group, start } => group * n_fs + start,
            Action::Tetris(m) => match m {
                TetrisMove::Up => 0,
                TetrisMove::Down => 1,
                TetrisMove::Left => 2,
                TetrisMove::Right => 3,
                TetrisMove::New => 4,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Each,
    Final,
    MonteCarlo,
}

/// State-encoding switch: whether the constant lookahead channel is added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateRepr {
    pub lookahead: bool,
}

impl StateRepr {
    pub fn channels(self, space: ActionSpaceKind) -> usize {
        1 + usize::from(space == ActionSpaceKind::Tetris) + usize::from(self.lookahead)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    Intra,
    Inter,
}

fn slots_overlap(s1: usize, bw1: u32, s2: usize, bw2: u32) -> bool {
    s1 < s2 + bw2 as usize && s2 < s1 + bw1 as usize
}

/// Whether two placements violate a constraint of the given kind. Intra
/// requires the same group; inter only the same polarization parity.
pub fn violates(p_i: Placement, bw_i: u32, p_j: Placement, bw_j: u32, kind: ConstraintKind) -> bool {
    let overlap = slots_overlap(p_i.start, bw_i, p_j.start, bw_j);
    match kind {
        ConstraintKind::Intra => p_i.group == p_j.group && overlap,
        ConstraintKind::Inter => p_i.group % 2 == p_j.group % 2 && overlap,
    }
}

/// Per-step reward at assignment events.
///
/// `mc_estimate` is the rollout terminal count and is required only for the
/// Monte-Carlo kind on non-terminal events.
pub fn assignment_reward(
    kind: RewardKind,
    b_prev: usize,
    b_now: usize,
    is_terminal: bool,
    mc_estimate: Option<usize>,
) -> Result<f64, EnvError> {
    Ok(match kind {
        RewardKind::Each => b_now as f64 - b_prev as f64,
        RewardKind::Final => {
            if is_terminal {
                b_now as f64
            } else {
                0.0
            }
        }
        RewardKind::MonteCarlo => {
            if is_terminal {
                0.0
            } else {
                let mc = mc_estimate.ok_or_else(|| {
                    EnvError::Contract(
                        "Monte-Carlo reward needs a rollout estimate before the terminal".into(),
                    )
                })?;
                mc as f64 - b_now as f64
            }
        }
    })
}

/// The observation: `channels x n_fg x n_fs`, values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTensor {
    pub channels: usize,
    pub n_fg: usize,
    pub n_fs: usize,
    pub data: Vec<f64>,
}

impl StateTensor {
    pub fn channel(&self, c: usize) -> &[f64] {
        let cells = self.n_fg * self.n_fs;
        &self.data[c * cells..(c + 1) * cells]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// `B(s_t)`: successfully-assigned beams after this step.
    pub successful: usize,
    /// True when this step finalized a beam.
    pub assigned: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Environment knobs that are not part of the problem definition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// When set, a tetris-like beam is force-finalized after this many
    /// intermediate moves. Off by default; training may enable it to bound
    /// episode length.
    pub tetris_move_cap: Option<usize>,
}

impl EnvConfig {
    /// The conventional cap when one is wanted: `4 * (n_fg + n_fs)` moves.
    pub fn default_move_cap(n_fg: usize, n_fs: usize) -> usize {
        4 * (n_fg + n_fs)
    }
}

/// One in-flight episode: the assignment sequence, finalized placements,
/// tentative placement (tetris-like only), and the seeded generator that
/// drives random initial placements and rollouts.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    scenario: Arc<Scenario>,
    space: ActionSpaceKind,
    repr: StateRepr,
    config: EnvConfig,
    episode: Vec<Beam>,
    /// Constrained partners within the episode, by episode index.
    intra_adj: Vec<Vec<u32>>,
    inter_adj: Vec<Vec<u32>>,
    placements: Vec<Option<Placement>>,
    current: usize,
    tentative: Option<Placement>,
    cached_b: usize,
    steps: usize,
    moves_this_beam: usize,
    rng: ChaCha8Rng,
}

/// Exported plan row, one per finalized beam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub beam_id: BeamId,
    pub group: usize,
    pub start: usize,
    pub bw: u32,
    pub successful: bool,
}

/// Starts a fresh episode over the given beam sequence.
pub fn reset(
    scenario: Arc<Scenario>,
    episode: Vec<Beam>,
    space: ActionSpaceKind,
    repr: StateRepr,
    config: EnvConfig,
    seed: u64,
) -> Result<EpisodeState, EnvError> {
    reset_with_plan(scenario, episode, space, repr, config, seed, &[])
}

/// Starts from a partially-assigned plan: `plan` must finalize a prefix of
/// `episode`, in order, and the episode resumes at index `plan.len()`.
pub fn reset_with_plan(
    scenario: Arc<Scenario>,
    episode: Vec<Beam>,
    space: ActionSpaceKind,
    repr: StateRepr,
    config: EnvConfig,
    seed: u64,
    plan: &[(BeamId, Placement)],
) -> Result<EpisodeState, EnvError> {
    if episode.is_empty() {
        return Err(EnvError::Instance("episode needs at least one beam".into()));
    }
    if plan.len() > episode.len() {
        return Err(EnvError::Instance("warm-start plan longer than episode".into()));
    }
    for beam in &episode {
        if beam.bw as usize > scenario.n_fs {
            return Err(EnvError::Instance(format!(
                "beam {} demands bw {} > n_fs {}",
                beam.id, beam.bw, scenario.n_fs
            )));
        }
    }

    let index_of: BTreeMap<BeamId, u32> = episode
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id, i as u32))
        .collect();
    if index_of.len() != episode.len() {
        return Err(EnvError::Instance("episode contains duplicate beam ids".into()));
    }

    let mut intra_adj = vec![Vec::new(); episode.len()];
    let mut inter_adj = vec![Vec::new(); episode.len()];
    for (pairs, adj) in [
        (&scenario.constraints.intra, &mut intra_adj),
        (&scenario.constraints.inter, &mut inter_adj),
    ] {
        for &(i, j) in pairs.iter() {
            if let (Some(&a), Some(&b)) = (index_of.get(&i), index_of.get(&j)) {
                adj[a as usize].push(b);
                adj[b as usize].push(a);
            }
        }
    }

    let mut placements = vec![None; episode.len()];
    for (k, &(id, p)) in plan.iter().enumerate() {
        if episode[k].id != id {
            return Err(EnvError::Instance(format!(
                "warm-start plan entry {k} finalizes beam {id}, episode expects {}",
                episode[k].id
            )));
        }
        validate_placement(p, episode[k].bw, scenario.n_fg, scenario.n_fs)?;
        placements[k] = Some(p);
    }

    let mut state = EpisodeState {
        scenario,
        space,
        repr,
        config,
        episode,
        intra_adj,
        inter_adj,
        placements,
        current: plan.len(),
        tentative: None,
        cached_b: 0,
        steps: 0,
        moves_this_beam: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    state.cached_b = state.count_successful();
    if space == ActionSpaceKind::Tetris && !state.is_done() {
        state.tentative = Some(state.random_placement(state.current));
    }
    Ok(state)
}

fn validate_placement(p: Placement, bw: u32, n_fg: usize, n_fs: usize) -> Result<(), EnvError> {
    if p.group >= n_fg || p.start + bw as usize > n_fs {
        return Err(EnvError::Instance(format!(
            "placement (group {}, start {}) out of bounds for bw {bw}",
            p.group, p.start
        )));
    }
    Ok(())
}

impl EpisodeState {
    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn space(&self) -> ActionSpaceKind {
        self.space
    }

    pub fn repr(&self) -> StateRepr {
        self.repr
    }

    pub fn n_beams(&self) -> usize {
        self.episode.len()
    }

    /// Index of the beam being assigned; equals the number finalized so far.
    pub fn current_index(&self) -> usize {
        self.current
    }

    pub fn current_beam(&self) -> Option<&Beam> {
        self.episode.get(self.current)
    }

    pub fn episode_beams(&self) -> &[Beam] {
        &self.episode
    }

    pub fn tentative(&self) -> Option<Placement> {
        self.tentative
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `B` after the most recent finalization.
    pub fn successful(&self) -> usize {
        self.cached_b
    }

    pub fn is_done(&self) -> bool {
        self.current == self.episode.len()
    }

    pub fn placement_of(&self, id: BeamId) -> Option<Placement> {
        self.episode
            .iter()
            .position(|b| b.id == id)
            .and_then(|i| self.placements[i])
    }

    fn random_placement(&mut self, idx: usize) -> Placement {
        let bw = self.episode[idx].bw as usize;
        let group = self.rng.gen_range(0..self.scenario.n_fg);
        let start = self.rng.gen_range(0..=self.scenario.n_fs - bw);
        Placement { group, start }
    }

    /// Number of finalized beams violating no constraint against any other
    /// finalized beam. Both members of a violating pair count as failed.
    pub fn count_successful(&self) -> usize {
        let mut ok = vec![true; self.episode.len()];
        for (a, pa) in self.placements.iter().enumerate() {
            let Some(pa) = *pa else { continue };
            let bw_a = self.episode[a].bw;
            for (adj, kind) in [
                (&self.intra_adj, ConstraintKind::Intra),
                (&self.inter_adj, ConstraintKind::Inter),
            ] {
                for &b in &adj[a] {
                    let b = b as usize;
                    if b <= a {
                        continue;
                    }
                    let Some(pb) = self.placements[b] else { continue };
                    if violates(pa, bw_a, pb, self.episode[b].bw, kind) {
                        ok[a] = false;
                        ok[b] = false;
                    }
                }
            }
        }
        self.placements
            .iter()
            .zip(&ok)
            .filter(|(p, ok)| p.is_some() && **ok)
            .count()
    }

    /// Binary grid marking every cell the current beam must avoid: occupied
    /// cells of finalized intra partners, plus finalized inter partners'
    /// slots expanded over all groups of their polarization parity.
    pub fn conflict_mask(&self) -> Result<Vec<f64>, EnvError> {
        let cur = self.current;
        if cur >= self.episode.len() {
            return Err(EnvError::EpisodeFinished);
        }
        let (n_fg, n_fs) = (self.scenario.n_fg, self.scenario.n_fs);
        let mut mask = vec![0.0; n_fg * n_fs];
        for &j in &self.intra_adj[cur] {
            if let Some(p) = self.placements[j as usize] {
                let bw = self.episode[j as usize].bw as usize;
                for s in p.start..p.start + bw {
                    mask[p.group * n_fs + s] = 1.0;
                }
            }
        }
        for &j in &self.inter_adj[cur] {
            if let Some(p) = self.placements[j as usize] {
                let bw = self.episode[j as usize].bw as usize;
                for g in (p.group % 2..n_fg).step_by(2) {
                    for s in p.start..p.start + bw {
                        mask[g * n_fs + s] = 1.0;
                    }
                }
            }
        }
        Ok(mask)
    }

    /// Bandwidth still to come from unassigned beams constrained with the
    /// current one, normalized by grid area and clamped to 1.
    pub fn lookahead_value(&self) -> Result<f64, EnvError> {
        let cur = self.current;
        if cur >= self.episode.len() {
            return Err(EnvError::EpisodeFinished);
        }
        let mut seen = vec![false; self.episode.len()];
        let mut slots = 0u64;
        for adj in [&self.intra_adj, &self.inter_adj] {
            for &j in &adj[cur] {
                let j = j as usize;
                if j > cur && !seen[j] {
                    seen[j] = true;
                    slots += u64::from(self.episode[j].bw);
                }
            }
        }
        Ok((slots as f64 / self.scenario.cells() as f64).min(1.0))
    }

    /// Assembles the observation tensor: conflict mask, then (tetris-like)
    /// the tentative placement indicator, then the optional lookahead layer.
    pub fn build_state(&self) -> Result<StateTensor, EnvError> {
        if self.is_done() {
            return Err(EnvError::EpisodeFinished);
        }
        let (n_fg, n_fs) = (self.scenario.n_fg, self.scenario.n_fs);
        let cells = n_fg * n_fs;
        let channels = self.repr.channels(self.space);
        let mut data = Vec::with_capacity(channels * cells);
        data.extend_from_slice(&self.conflict_mask()?);
        if self.space == ActionSpaceKind::Tetris {
            let mut layer = vec![0.0; cells];
            let p = self.tentative.expect("tetris episode always has a tentative");
            let bw = self.episode[self.current].bw as usize;
            for s in p.start..p.start + bw {
                layer[p.group * n_fs + s] = 1.0;
            }
            data.extend_from_slice(&layer);
        }
        if self.repr.lookahead {
            let v = self.lookahead_value()?;
            data.extend(std::iter::repeat(v).take(cells));
        }
        Ok(StateTensor {
            channels,
            n_fg,
            n_fs,
            data,
        })
    }

    /// Random completion of the plan: copies the state, assigns every
    /// remaining beam a uniform legal placement, and returns the terminal
    /// success count. The live state is untouched.
    pub fn mc_rollout(&self, seed: u64) -> usize {
        let mut sim = self.clone();
        sim.rng = ChaCha8Rng::seed_from_u64(seed);
        for idx in sim.current..sim.episode.len() {
            let p = sim.random_placement(idx);
            sim.placements[idx] = Some(p);
        }
        sim.count_successful()
    }

    fn finalize(&mut self, p: Placement, reward_kind: RewardKind) -> Result<StepResult, EnvError> {
        let b_prev = self.cached_b;
        self.placements[self.current] = Some(p);
        self.current += 1;
        self.tentative = None;
        self.moves_this_beam = 0;
        self.cached_b = self.count_successful();
        let done = self.is_done();
        let mc = if reward_kind == RewardKind::MonteCarlo && !done {
            let seed = self.rng.gen();
            Some(self.mc_rollout(seed))
        } else {
            None
        };
        let reward = assignment_reward(reward_kind, b_prev, self.cached_b, done, mc)?;
        if !done && self.space == ActionSpaceKind::Tetris {
            self.tentative = Some(self.random_placement(self.current));
        }
        Ok(StepResult {
            reward,
            done,
            info: StepInfo {
                successful: self.cached_b,
                assigned: true,
            },
        })
    }

    /// Applies one action. Grid actions finalize the current beam at the
    /// chosen cell (start clamped to fit); tetris-like moves nudge the
    /// tentative placement at a small penalty until `new` finalizes it.
    pub fn step(&mut self, action: Action, reward_kind: RewardKind) -> Result<StepResult, EnvError> {
        if self.is_done() {
            return Err(EnvError::EpisodeFinished);
        }
        let (n_fg, n_fs) = (self.scenario.n_fg, self.scenario.n_fs);
        let bw = self.episode[self.current].bw as usize;
        self.steps += 1;
        match (self.space, action) {
            (ActionSpaceKind::Grid, Action::Grid { group, start }) => {
                if group >= n_fg || start >= n_fs {
                    return Err(EnvError::Contract(format!(
                        "grid action ({group}, {start}) outside the {n_fg}x{n_fs} grid"
                    )));
                }
                let start = start.min(n_fs - bw);
                self.finalize(Placement { group, start }, reward_kind)
            }
            (ActionSpaceKind::Tetris, Action::Tetris(mv)) => {
                let capped = self
                    .config
                    .tetris_move_cap
                    .is_some_and(|cap| self.moves_this_beam >= cap);
                let mv = if capped { TetrisMove::New } else { mv };
                if mv == TetrisMove::New {
                    let p = self.tentative.expect("tetris episode always has a tentative");
                    return self.finalize(p, reward_kind);
                }
                let p = self.tentative.as_mut().expect("tetris episode always has a tentative");
                match mv {
                    TetrisMove::Up => p.group = p.group.saturating_sub(1),
                    TetrisMove::Down => p.group = (p.group + 1).min(n_fg - 1),
                    TetrisMove::Left => p.start = p.start.saturating_sub(1),
                    TetrisMove::Right => p.start = (p.start + 1).min(n_fs - bw),
                    TetrisMove::New => unreachable!(),
                }
                self.moves_this_beam += 1;
                Ok(StepResult {
                    reward: -1.0 / self.scenario.cells() as f64,
                    done: false,
                    info: StepInfo {
                        successful: self.cached_b,
                        assigned: false,
                    },
                })
            }
            _ => Err(EnvError::ActionSpaceMismatch),
        }
    }

    /// Rows for every finalized beam, with per-beam success flags.
    pub fn plan(&self) -> Vec<PlanEntry> {
        let mut ok = vec![true; self.episode.len()];
        for (a, pa) in self.placements.iter().enumerate() {
            let Some(pa) = *pa else { continue };
            for (adj, kind) in [
                (&self.intra_adj, ConstraintKind::Intra),
                (&self.inter_adj, ConstraintKind::Inter),
            ] {
                for &b in &adj[a] {
                    let b = b as usize;
                    if b <= a {
                        continue;
                    }
                    let Some(pb) = self.placements[b] else { continue };
                    if violates(pa, self.episode[a].bw, pb, self.episode[b].bw, kind) {
                        ok[a] = false;
                        ok[b] = false;
                    }
                }
            }
        }
        self.episode
            .iter()
            .zip(&self.placements)
            .zip(&ok)
            .filter_map(|((beam, p), ok)| {
                p.map(|p| PlanEntry {
                    beam_id: beam.id,
                    group: p.group,
                    start: p.start,
                    bw: beam.bw,
                    successful: *ok,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, ConstraintSet, GenConfig};
    use std::collections::BTreeSet;

    fn tiny_scenario(n_fg: usize, n_fs: usize, beams: Vec<Beam>, constraints: ConstraintSet) -> Arc<Scenario> {
        Arc::new(Scenario {
            n_fg,
            n_fs,
            beams,
            constraints,
            meta: String::new(),
        })
    }

    fn beam(id: BeamId, bw: u32) -> Beam {
        Beam {
            id,
            bw,
            pos: [0.5, 0.5],
            sat: 0,
        }
    }

    fn grid_reset(s: &Arc<Scenario>, seed: u64) -> EpisodeState {
        reset(
            s.clone(),
            s.beams.clone(),
            ActionSpaceKind::Grid,
            StateRepr { lookahead: false },
            EnvConfig::default(),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn occupied_cells_paper_fig3() {
        // 1-based "group 1, slots 6-8" is 0-based group 0, slots 5-7.
        let cells = occupied_cells(Placement { group: 0, start: 5 }, 3);
        assert_eq!(cells, vec![(0, 5), (0, 6), (0, 7)]);
        assert_eq!(occupied_cells(Placement { group: 2, start: 4 }, 1), vec![(2, 4)]);
        assert_eq!(occupied_cells(Placement { group: 1, start: 0 }, 4).len(), 4);
    }

    #[test]
    fn violates_cases() {
        let a = Placement { group: 4, start: 5 }; // 1-based group 5, slots 6-8
        let b = Placement { group: 2, start: 6 }; // 1-based group 3, slot 7
        assert!(violates(a, 3, b, 1, ConstraintKind::Inter));
        // Intra needs the same group.
        assert!(!violates(a, 3, b, 1, ConstraintKind::Intra));
        // Same parity, disjoint slots.
        let c = Placement { group: 2, start: 10 };
        assert!(!violates(a, 3, c, 3, ConstraintKind::Inter));
        // Different parity, overlapping slots.
        let d = Placement { group: 3, start: 5 };
        assert!(!violates(a, 3, d, 3, ConstraintKind::Inter));
        assert!(violates(a, 3, d, 3, ConstraintKind::Intra) == false);
    }

    #[test]
    fn violates_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let p = Placement { group: rng.gen_range(0..6), start: rng.gen_range(0..10) };
            let q = Placement { group: rng.gen_range(0..6), start: rng.gen_range(0..10) };
            let (bi, bj) = (rng.gen_range(1..4), rng.gen_range(1..4));
            for kind in [ConstraintKind::Intra, ConstraintKind::Inter] {
                assert_eq!(violates(p, bi, q, bj, kind), violates(q, bj, p, bi, kind));
            }
        }
    }

    #[test]
    fn conflict_mask_empty_without_constraints() {
        let s = tiny_scenario(4, 10, vec![beam(0, 2), beam(1, 3)], ConstraintSet::default());
        let mut st = grid_reset(&s, 0);
        st.step(Action::Grid { group: 1, start: 2 }, RewardKind::Each).unwrap();
        assert!(st.conflict_mask().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conflict_mask_inter_expands_parity_groups() {
        // Paper's Fig. 4: b1 in 1-based group 5 slots 6-8 with an inter pair
        // marks slots 6-8 in 1-based groups 1, 3, 5, 7 (0-based 0, 2, 4, 6).
        let mut cs = ConstraintSet::default();
        cs.insert_inter(0, 1);
        let s = tiny_scenario(8, 13, vec![beam(0, 3), beam(1, 2)], cs);
        let mut st = grid_reset(&s, 0);
        st.step(Action::Grid { group: 4, start: 5 }, RewardKind::Each).unwrap();
        let mask = st.conflict_mask().unwrap();
        for g in 0..8 {
            for slot in 0..13 {
                let expected = g % 2 == 0 && (5..8).contains(&slot);
                assert_eq!(mask[g * 13 + slot] == 1.0, expected, "cell ({g},{slot})");
            }
        }
    }

    #[test]
    fn conflict_mask_matches_per_cell_brute_force() {
        // Random 8-beam instances: each cell is marked iff a 1-slot probe
        // placed there violates something against the finalized beams.
        for seed in 0..20u64 {
            let cfg = GenConfig {
                n_beams: 8,
                n_sats: 2,
                bw_min: 1,
                bw_max: 4,
                r_inter: 0.5,
                r_intra: 0.7,
                seed,
            };
            let scenario = Arc::new(generate_scenario(4, 8, &cfg, "t").unwrap());
            let mut st = grid_reset(&scenario, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for _ in 0..5 {
                st.step(
                    Action::Grid {
                        group: rng.gen_range(0..4),
                        start: rng.gen_range(0..8),
                    },
                    RewardKind::Each,
                )
                .unwrap();
            }
            let mask = st.conflict_mask().unwrap();
            let cur = st.current_beam().unwrap().clone();
            for g in 0..4 {
                for slot in 0..8 {
                    let probe = Placement { group: g, start: slot };
                    let mut conflict = false;
                    for prev in &st.episode_beams()[..st.current_index()] {
                        let p = st.placement_of(prev.id).unwrap();
                        if scenario.constraints.has_intra(cur.id, prev.id)
                            && violates(probe, 1, p, prev.bw, ConstraintKind::Intra)
                        {
                            conflict = true;
                        }
                        if scenario.constraints.has_inter(cur.id, prev.id)
                            && violates(probe, 1, p, prev.bw, ConstraintKind::Inter)
                        {
                            conflict = true;
                        }
                    }
                    assert_eq!(mask[g * 8 + slot] == 1.0, conflict, "cell ({g},{slot})");
                }
            }
        }
    }

    #[test]
    fn count_successful_no_constraints_counts_all() {
        let s = tiny_scenario(2, 6, vec![beam(0, 2), beam(1, 2), beam(2, 2)], ConstraintSet::default());
        let mut st = grid_reset(&s, 0);
        for _ in 0..3 {
            st.step(Action::Grid { group: 0, start: 0 }, RewardKind::Each).unwrap();
        }
        assert_eq!(st.count_successful(), 3);
    }

    #[test]
    fn count_successful_symmetric_failure() {
        let mut cs = ConstraintSet::default();
        cs.insert_intra(0, 1);
        let s = tiny_scenario(2, 6, vec![beam(0, 3), beam(1, 3)], cs);
        let mut st = grid_reset(&s, 0);
        st.step(Action::Grid { group: 0, start: 0 }, RewardKind::Each).unwrap();
        let r = st.step(Action::Grid { group: 0, start: 2 }, RewardKind::Each).unwrap();
        assert_eq!(st.count_successful(), 0, "both members of the pair fail");
        assert_eq!(r.reward, -1.0, "placing the second beam knocked out the first");
    }

    #[test]
    fn lookahead_value_cases() {
        let mut cs = ConstraintSet::default();
        cs.insert_inter(0, 1);
        let s = tiny_scenario(4, 20, vec![beam(0, 2), beam(1, 8)], cs);
        let st = grid_reset(&s, 0);
        assert_eq!(st.lookahead_value().unwrap(), 8.0 / 80.0);

        // No remaining constrained beams once we are at the last one.
        let mut st2 = grid_reset(&s, 0);
        st2.step(Action::Grid { group: 0, start: 0 }, RewardKind::Each).unwrap();
        assert_eq!(st2.lookahead_value().unwrap(), 0.0);

        // Remaining constrained bandwidth beyond the grid area clamps to 1.
        let mut cs3 = ConstraintSet::default();
        for j in 1..=3 {
            cs3.insert_inter(0, j);
        }
        let s3 = tiny_scenario(2, 4, vec![beam(0, 1), beam(1, 4), beam(2, 4), beam(3, 4)], cs3);
        let st3 = grid_reset(&s3, 0);
        assert_eq!(st3.lookahead_value().unwrap(), 1.0);
    }

    #[test]
    fn lookahead_counts_dual_kind_pairs_once() {
        let mut cs = ConstraintSet::default();
        cs.insert_inter(0, 1);
        cs.insert_intra(0, 1);
        let s = tiny_scenario(4, 20, vec![beam(0, 2), beam(1, 8)], cs);
        let st = grid_reset(&s, 0);
        assert_eq!(st.lookahead_value().unwrap(), 0.1);
    }

    #[test]
    fn build_state_channel_layout() {
        let s = tiny_scenario(4, 10, vec![beam(0, 3), beam(1, 2)], ConstraintSet::default());
        let grid = reset(
            s.clone(),
            s.beams.clone(),
            ActionSpaceKind::Grid,
            StateRepr { lookahead: false },
            EnvConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(grid.build_state().unwrap().channels, 1);

        let tetris = reset(
            s.clone(),
            s.beams.clone(),
            ActionSpaceKind::Tetris,
            StateRepr { lookahead: true },
            EnvConfig::default(),
            1,
        )
        .unwrap();
        let tensor = tetris.build_state().unwrap();
        assert_eq!(tensor.channels, 3);
        let placed: f64 = tensor.channel(1).iter().sum();
        assert_eq!(placed, 3.0, "tentative channel has exactly bw ones");
        assert_eq!(tensor.channel(0), &grid.conflict_mask().unwrap()[..]);
        let lk = tensor.channel(2);
        assert!(lk.iter().all(|&v| v == lk[0]), "lookahead layer is constant");
    }

    #[test]
    fn build_state_after_done_errors() {
        let s = tiny_scenario(2, 4, vec![beam(0, 1)], ConstraintSet::default());
        let mut st = grid_reset(&s, 0);
        st.step(Action::Grid { group: 0, start: 0 }, RewardKind::Each).unwrap();
        assert!(matches!(st.build_state(), Err(EnvError::EpisodeFinished)));
        assert!(matches!(
            st.step(Action::Grid { group: 0, start: 0 }, RewardKind::Each),
            Err(EnvError::EpisodeFinished)
        ));
    }

    #[test]
    fn reset_tetris_full_width_beam_forces_start_zero() {
        let s = tiny_scenario(2, 6, vec![beam(0, 6)], ConstraintSet::default());
        for seed in 0..10 {
            let st = reset(
                s.clone(),
                s.beams.clone(),
                ActionSpaceKind::Tetris,
                StateRepr { lookahead: false },
                EnvConfig::default(),
                seed,
            )
            .unwrap();
            assert_eq!(st.tentative().unwrap().start, 0);
        }
    }

    #[test]
    fn reset_rejects_oversized_beam() {
        let s = tiny_scenario(2, 4, vec![beam(0, 5)], ConstraintSet::default());
        assert!(matches!(
            reset(
                s.clone(),
                s.beams.clone(),
                ActionSpaceKind::Grid,
                StateRepr { lookahead: false },
                EnvConfig::default(),
                0,
            ),
            Err(EnvError::Instance(_))
        ));
    }

    #[test]
    fn tetris_replay_is_deterministic() {
        let cfg = GenConfig {
            n_beams: 12,
            n_sats: 2,
            bw_min: 1,
            bw_max: 3,
            r_inter: 0.3,
            r_intra: 0.4,
            seed: 4,
        };
        let s = Arc::new(generate_scenario(4, 8, &cfg, "t").unwrap());
        let run = |seed| {
            let mut st = reset(
                s.clone(),
                s.beams.clone(),
                ActionSpaceKind::Tetris,
                StateRepr { lookahead: false },
                EnvConfig::default(),
                seed,
            )
            .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut log = Vec::new();
            while !st.is_done() {
                let a = Action::from_index(ActionSpaceKind::Tetris, 4, 8, rng.gen_range(0..5)).unwrap();
                let r = st.step(a, RewardKind::Each).unwrap();
                log.push((st.tentative(), r.reward.to_bits(), r.done));
            }
            log
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8), "different seeds give different tentatives");
    }

    #[test]
    fn grid_episode_length_equals_beam_count() {
        let beams: Vec<Beam> = (0..7).map(|i| beam(i, 2)).collect();
        let s = tiny_scenario(2, 6, beams, ConstraintSet::default());
        let mut st = grid_reset(&s, 0);
        for k in 1..=7 {
            let r = st.step(Action::Grid { group: 0, start: 0 }, RewardKind::Each).unwrap();
            assert_eq!(r.done, k == 7);
        }
        assert_eq!(st.steps(), 7);
    }

    #[test]
    fn grid_clamps_start_to_fit() {
        let s = tiny_scenario(2, 6, vec![beam(0, 4)], ConstraintSet::default());
        let mut st = grid_reset(&s, 0);
        st.step(Action::Grid { group: 1, start: 5 }, RewardKind::Each).unwrap();
        assert_eq!(st.placement_of(0).unwrap(), Placement { group: 1, start: 2 });
    }

    #[test]
    fn tetris_moves_clamp_at_boundaries() {
        let s = tiny_scenario(4, 20, vec![beam(0, 2), beam(1, 2)], ConstraintSet::default());
        let mut st = reset(
            s.clone(),
            s.beams.clone(),
            ActionSpaceKind::Tetris,
            StateRepr { lookahead: false },
            EnvConfig::default(),
            3,
        )
        .unwrap();
        // Walk to the left edge, then push once more: position unchanged.
        for _ in 0..25 {
            st.step(Action::Tetris(TetrisMove::Left), RewardKind::Each).unwrap();
        }
        assert_eq!(st.tentative().unwrap().start, 0);
        let r = st.step(Action::Tetris(TetrisMove::Left), RewardKind::Each).unwrap();
        assert_eq!(st.tentative().unwrap().start, 0);
        assert_eq!(r.reward, -1.0 / 80.0);
        assert!(!r.info.assigned);

        for _ in 0..5 {
            st.step(Action::Tetris(TetrisMove::Up), RewardKind::Each).unwrap();
        }
        assert_eq!(st.tentative().unwrap().group, 0);
        for _ in 0..5 {
            st.step(Action::Tetris(TetrisMove::Down), RewardKind::Each).unwrap();
        }
        assert_eq!(st.tentative().unwrap().group, 3);
        for _ in 0..25 {
            st.step(Action::Tetris(TetrisMove::Right), RewardKind::Each).unwrap();
        }
        assert_eq!(st.tentative().unwrap().start, 18);
    }

    #[test]
    fn tetris_new_finalizes_and_move_cap_forces_new() {
        let s = tiny_scenario(2, 4, vec![beam(0, 2), beam(1, 2)], ConstraintSet::default());
        let mut st = reset(
            s.clone(),
            s.beams.clone(),
            ActionSpaceKind::Tetris,
            StateRepr { lookahead: false },
            EnvConfig { tetris_move_cap: Some(3) },
            5,
        )
        .unwrap();
        for _ in 0..3 {
            let r = st.step(Action::Tetris(TetrisMove::Right), RewardKind::Each).unwrap();
            assert!(!r.info.assigned);
        }
        // Cap reached: the next move is treated as new.
        let r = st.step(Action::Tetris(TetrisMove::Right), RewardKind::Each).unwrap();
        assert!(r.info.assigned);
        assert_eq!(st.current_index(), 1);
        let r = st.step(Action::Tetris(TetrisMove::New), RewardKind::Each).unwrap();
        assert!(r.done);
        assert_eq!(st.plan().len(), 2);
    }

    #[test]
    fn action_space_mismatch_is_an_error() {
        let s = tiny_scenario(2, 4, vec![beam(0, 2)], ConstraintSet::default());
        let mut st = grid_reset(&s, 0);
        assert!(matches!(
            st.step(Action::Tetris(TetrisMove::New), RewardKind::Each),
            Err(EnvError::ActionSpaceMismatch)
        ));
    }

    #[test]
    fn assignment_reward_table() {
        assert_eq!(assignment_reward(RewardKind::Each, 5, 6, false, None).unwrap(), 1.0);
        assert_eq!(assignment_reward(RewardKind::Each, 6, 5, false, None).unwrap(), -1.0);
        assert_eq!(assignment_reward(RewardKind::Final, 3, 7, false, None).unwrap(), 0.0);
        assert_eq!(assignment_reward(RewardKind::Final, 3, 7, true, None).unwrap(), 7.0);
        assert_eq!(assignment_reward(RewardKind::MonteCarlo, 3, 4, true, None).unwrap(), 0.0);
        assert_eq!(
            assignment_reward(RewardKind::MonteCarlo, 3, 4, false, Some(9)).unwrap(),
            5.0
        );
        assert!(assignment_reward(RewardKind::MonteCarlo, 3, 4, false, None).is_err());
    }

    #[test]
    fn mc_rollout_respects_bounds_and_terminal() {
        let mut cs = ConstraintSet::default();
        cs.insert_intra(0, 1);
        let s = tiny_scenario(2, 4, vec![beam(0, 2), beam(1, 2), beam(2, 1)], cs);
        let mut st = grid_reset(&s, 1);
        let b = st.mc_rollout(11);
        assert!(b <= 3);
        while !st.is_done() {
            st.step(Action::Grid { group: 0, start: 0 }, RewardKind::Each).unwrap();
        }
        assert_eq!(st.mc_rollout(11), st.count_successful());
    }

    #[test]
    fn mc_rollout_zero_constraints_succeeds_everywhere() {
        let beams: Vec<Beam> = (0..6).map(|i| beam(i, 2)).collect();
        let s = tiny_scenario(2, 6, beams, ConstraintSet::default());
        let mut st = grid_reset(&s, 1);
        st.step(Action::Grid { group: 0, start: 0 }, RewardKind::Each).unwrap();
        st.step(Action::Grid { group: 1, start: 0 }, RewardKind::Each).unwrap();
        assert_eq!(st.mc_rollout(3), 4 + st.successful());
    }

    #[test]
    fn mc_rollout_leaves_state_untouched() {
        let s = tiny_scenario(2, 4, vec![beam(0, 2), beam(1, 2)], ConstraintSet::default());
        let st = grid_reset(&s, 1);
        let before = format!("{st:?}");
        st.mc_rollout(42);
        assert_eq!(before, format!("{st:?}"));
    }

    #[test]
    fn warm_start_matches_played_prefix() {
        let cfg = GenConfig {
            n_beams: 10,
            n_sats: 2,
            bw_min: 1,
            bw_max: 3,
            r_inter: 0.4,
            r_intra: 0.5,
            seed: 2,
        };
        let s = Arc::new(generate_scenario(4, 8, &cfg, "t").unwrap());
        let mut played = grid_reset(&s, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..4 {
            played
                .step(
                    Action::Grid {
                        group: rng.gen_range(0..4),
                        start: rng.gen_range(0..8),
                    },
                    RewardKind::Each,
                )
                .unwrap();
        }
        let plan: Vec<(BeamId, Placement)> = played.episode_beams()[..4]
            .iter()
            .map(|b| (b.id, played.placement_of(b.id).unwrap()))
            .collect();
        let warm = reset_with_plan(
            s.clone(),
            s.beams.clone(),
            ActionSpaceKind::Grid,
            StateRepr { lookahead: true },
            EnvConfig::default(),
            7,
            &plan,
        )
        .unwrap();
        assert_eq!(warm.current_index(), 4);
        assert_eq!(warm.count_successful(), played.count_successful());
        assert_eq!(warm.conflict_mask().unwrap(), played.conflict_mask().unwrap());
    }

    #[test]
    fn warm_start_rejects_wrong_prefix() {
        let s = tiny_scenario(2, 4, vec![beam(0, 2), beam(1, 2)], ConstraintSet::default());
        let err = reset_with_plan(
            s.clone(),
            s.beams.clone(),
            ActionSpaceKind::Grid,
            StateRepr { lookahead: false },
            EnvConfig::default(),
            0,
            &[(1, Placement { group: 0, start: 0 })],
        );
        assert!(matches!(err, Err(EnvError::Instance(_))));
    }

    #[test]
    fn each_rewards_telescope_to_terminal_count() {
        for seed in 0..30u64 {
            let cfg = GenConfig {
                n_beams: 10,
                n_sats: 2,
                bw_min: 1,
                bw_max: 3,
                r_inter: 0.3,
                r_intra: 0.4,
                seed,
            };
            let s = Arc::new(generate_scenario(4, 8, &cfg, "t").unwrap());
            let mut st = grid_reset(&s, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
            let mut total = 0.0;
            while !st.is_done() {
                let r = st
                    .step(
                        Action::Grid {
                            group: rng.gen_range(0..4),
                            start: rng.gen_range(0..8),
                        },
                        RewardKind::Each,
                    )
                    .unwrap();
                total += r.reward;
            }
            assert_eq!(total, st.count_successful() as f64);
        }
    }

    #[test]
    fn plan_entries_use_symmetric_success() {
        let mut cs = ConstraintSet::default();
        cs.insert_intra(0, 1);
        let s = tiny_scenario(2, 6, vec![beam(0, 3), beam(1, 3), beam(2, 1)], cs);
        let mut st = grid_reset(&s, 0);
        st.step(Action::Grid { group: 0, start: 0 }, RewardKind::Each).unwrap();
        st.step(Action::Grid { group: 0, start: 1 }, RewardKind::Each).unwrap();
        st.step(Action::Grid { group: 1, start: 0 }, RewardKind::Each).unwrap();
        let plan = st.plan();
        let by_id: BTreeMap<BeamId, bool> = plan.iter().map(|e| (e.beam_id, e.successful)).collect();
        assert_eq!(by_id[&0], false);
        assert_eq!(by_id[&1], false);
        assert_eq!(by_id[&2], true);
        let ids: BTreeSet<_> = plan.iter().map(|e| e.beam_id).collect();
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn action_index_round_trip() {
        for idx in 0..80 {
            let a = Action::from_index(ActionSpaceKind::Grid, 4, 20, idx).unwrap();
            assert_eq!(a.index(20), idx);
        }
        for idx in 0..5 {
            let a = Action::from_index(ActionSpaceKind::Tetris, 4, 20, idx).unwrap();
            assert_eq!(a.index(20), idx);
        }
        assert!(Action::from_index(ActionSpaceKind::Grid, 4, 20, 80).is_err());
    }
}
