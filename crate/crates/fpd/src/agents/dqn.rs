//! Deep Q-Network learning: TD targets against a periodically-synced target
//! network, Huber loss, epsilon-greedy exploration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{AdamConfig, AdamState, NetParams, NnError, PolicyConfig, PolicyNet, Tensor};

use super::replay::{ReplayBuffer, Transition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DqnConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Summed environment steps between target-network syncs.
    pub target_sync_interval: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of total training steps over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    /// Summed environment steps between learner updates.
    pub train_freq: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            gamma: 0.1,
            learning_rate: 1e-4,
            batch_size: 32,
            buffer_capacity: 100_000,
            target_sync_interval: 1_000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.2,
            train_freq: 8,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(NnError::Contract(format!("gamma must be in (0,1), got {}", self.gamma)));
        }
        if self.learning_rate < 0.0
            || self.batch_size == 0
            || self.buffer_capacity == 0
            || self.target_sync_interval == 0
            || self.train_freq == 0
        {
            return Err(NnError::Contract("DQN config values must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon_start)
            || !(0.0..=1.0).contains(&self.epsilon_end)
            || self.epsilon_end > self.epsilon_start
            || !(0.0..=1.0).contains(&self.epsilon_decay_fraction)
        {
            return Err(NnError::Contract("bad epsilon schedule".into()));
        }
        Ok(())
    }

    /// Linear decay from start to end over the first `decay_fraction` of
    /// training, flat afterwards. Monotone non-increasing in `step`.
    pub fn epsilon_at(&self, step: usize, total_steps: usize) -> f64 {
        let horizon = (total_steps as f64 * self.epsilon_decay_fraction).max(1.0);
        let frac = (step as f64 / horizon).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Epsilon-greedy over a Q row: argmax with probability `1 - eps` (lowest
/// index wins ties), otherwise uniform.
pub fn epsilon_greedy(q_values: &[f64], eps: f64, rng: &mut ChaCha8Rng) -> Result<usize, NnError> {
    if q_values.is_empty() {
        return Err(NnError::Contract("epsilon-greedy over empty Q row".into()));
    }
    if rng.gen::<f64>() < eps {
        Ok(rng.gen_range(0..q_values.len()))
    } else {
        Ok(argmax(q_values))
    }
}

/// Lowest index among the maxima, so greedy evaluation is deterministic.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// TD(0) targets: `r + gamma * max_a' Q_target(s', a')`, or just `r` at
/// terminal transitions.
pub fn td_targets(
    batch: &[&Transition],
    target: &PolicyNet,
    gamma: f64,
) -> Result<Vec<f64>, NnError> {
    if batch.is_empty() {
        return Err(NnError::Contract("empty batch".into()));
    }
    let cfg = &target.cfg;
    let feat = cfg.in_channels * cfg.n_fg * cfg.n_fs;
    let (next_idx, mut next_data): (Vec<usize>, Vec<f64>) = {
        let mut idx = Vec::new();
        let mut data = Vec::new();
        for (i, t) in batch.iter().enumerate() {
            if let Some(ns) = &t.next_state {
                idx.push(i);
                data.extend(ns.iter().map(|&v| v as f64));
            }
        }
        (idx, data)
    };
    let mut max_next = vec![0.0; batch.len()];
    if !next_idx.is_empty() {
        if next_data.len() != next_idx.len() * feat {
            return Err(NnError::Shape("transition state size mismatch".into()));
        }
        let x = Tensor::from_vec(
            &[next_idx.len(), cfg.in_channels, cfg.n_fg, cfg.n_fs],
            std::mem::take(&mut next_data),
        )?;
        let out = target.forward(&x, None)?;
        for (row, &i) in next_idx.iter().enumerate() {
            let q = &out.outputs.data()[row * cfg.n_outputs..(row + 1) * cfg.n_outputs];
            max_next[i] = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.done || t.next_state.is_none() {
                t.reward
            } else {
                t.reward + gamma * max_next[i]
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearnOutcome {
    /// One optimizer step happened; carries the mean Huber loss.
    Updated { loss: f64 },
    /// Buffer smaller than a batch; nothing to do.
    SkippedInsufficientBuffer,
}

/// Owns the online/target networks, the replay buffer, and the optimizer.
#[derive(Debug)]
pub struct DqnLearner {
    pub online: PolicyNet,
    pub target: PolicyNet,
    pub buffer: ReplayBuffer,
    pub cfg: DqnConfig,
    adam: AdamState,
    grads: NetParams,
    rng: ChaCha8Rng,
}

impl DqnLearner {
    pub fn new(policy_cfg: PolicyConfig, cfg: DqnConfig, seed: u64) -> Result<DqnLearner, NnError> {
        cfg.validate()?;
        if policy_cfg.with_value_head {
            return Err(NnError::Contract("DQN uses no value head".into()));
        }
        let online = PolicyNet::new(policy_cfg, seed)?;
        let target = online.clone();
        let adam = AdamState::new(
            &online.params.tensors(),
            AdamConfig::with_lr(cfg.learning_rate),
        );
        let grads = online.params.zeros_like();
        Ok(DqnLearner {
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            online,
            target,
            adam,
            grads,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15),
        })
    }

    /// Copies the online parameters into the target network.
    pub fn sync_target(&mut self) {
        self.target.params = self.online.params.clone();
    }

    /// One optimizer step on a uniform replay sample, or a reported no-op
    /// when the buffer is still smaller than a batch.
    pub fn learn_step(&mut self) -> Result<LearnOutcome, NnError> {
        if self.buffer.len() < self.cfg.batch_size {
            return Ok(LearnOutcome::SkippedInsufficientBuffer);
        }
        let batch = self.buffer.sample(self.cfg.batch_size, &mut self.rng);
        let pcfg = &self.online.cfg;
        let feat = pcfg.in_channels * pcfg.n_fg * pcfg.n_fs;
        let mut data = Vec::with_capacity(batch.len() * feat);
        for t in &batch {
            if t.state.len() != feat {
                return Err(NnError::Shape("transition state size mismatch".into()));
            }
            data.extend(t.state.iter().map(|&v| v as f64));
        }
        let x = Tensor::from_vec(&[batch.len(), pcfg.in_channels, pcfg.n_fg, pcfg.n_fs], data)?;

        let targets = td_targets(&batch, &self.target, self.cfg.gamma)?;
        let (out, trace) = self.online.forward_traced(&x, None)?;

        // Huber(delta = 1) on the chosen-action Q values only.
        let n_out = pcfg.n_outputs;
        let scale = 1.0 / batch.len() as f64;
        let mut d_out = Tensor::zeros(&[batch.len(), n_out]);
        let mut loss = 0.0;
        for (i, t) in batch.iter().enumerate() {
            let q = out.outputs.data()[i * n_out + t.action];
            let e = q - targets[i];
            loss += if e.abs() <= 1.0 {
                0.5 * e * e
            } else {
                e.abs() - 0.5
            };
            d_out.data_mut()[i * n_out + t.action] = e.clamp(-1.0, 1.0) * scale;
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(NnError::Numeric(format!("non-finite DQN loss {loss}")));
        }

        for g in self.grads.tensors_mut() {
            g.data_mut().fill(0.0);
        }
        self.online.backward(&trace, &d_out, None, None, &mut self.grads)?;
        let grad_refs: Vec<&Tensor> = self.grads.tensors().into_iter().collect();
        self.adam.update(self.online.params.tensors_mut(), &grad_refs)?;
        Ok(LearnOutcome::Updated { loss })
    }
}
