//! Proximal policy optimization for the pixel attacker: actor-critic
//! networks, rollout collection over several environments, generalized
//! advantage estimation and the clipped-surrogate update.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{EpisodeRecord, RunningAaf, RunningLsr};
use crate::classifier::ClassifierModel;
use crate::dataset::SIDE;
use crate::env::{Action, EpisodeSummary, EvasionEnv, ImagePool, ACTION_COUNT, LEVELS};
use crate::error::{Error, Result};
use crate::numnet::checkpoint::{
    read_header, read_layers, read_u32, write_header, write_layers, write_u32,
};
use crate::numnet::{AdamConfig, AdamState, Layer, LayerSpec, Network, Parameterized};
use crate::oracle::{DefenseConfig, Scenario};
use crate::tensor::Tensor;

pub const ACTOR_CRITIC_MAGIC: &[u8; 4] = b"EVAC";

/// Scale applied to the initial policy-head weights so the untrained policy
/// is close to uniform.
pub const POLICY_HEAD_GAIN: f32 = 0.01;

// Stream offsets used with the per-environment seed.
const ACTION_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub learning_rate: f32,
    pub entropy_coef: f32,
    pub clip_epsilon: f32,
    pub gamma: f32,
    pub gae_lambda: f32,
    /// Steps collected per environment between updates.
    pub rollout_length: usize,
    pub minibatch_size: usize,
    pub update_epochs: usize,
    pub value_coef: f32,
    pub num_envs: usize,
    pub env_seeds: Vec<u64>,
    pub total_env_steps: u64,
    /// Seeds network initialization and minibatch shuffling.
    pub seed: u64,
    pub hidden_sizes: Vec<usize>,
    pub policy_head: PolicyHead,
}

/// How the policy head produces its 8192 action logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyHead {
    /// One dense output per action.
    Dense,
    /// Row, column and level scores; an action's logit is their sum.
    Factorized,
}

impl PolicyHead {
    /// Mixed-radix factors of the action index, most significant first.
    pub fn factors(self) -> Vec<usize> {
        match self {
            PolicyHead::Dense => vec![ACTION_COUNT],
            PolicyHead::Factorized => vec![SIDE, SIDE, LEVELS],
        }
    }
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            entropy_coef: 0.01,
            clip_epsilon: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            rollout_length: 2048,
            minibatch_size: 256,
            update_epochs: 10,
            value_coef: 0.5,
            num_envs: 4,
            env_seeds: vec![42, 43, 44, 45],
            total_env_steps: 500_000,
            seed: 42,
            hidden_sizes: vec![512, 256],
            policy_head: PolicyHead::Factorized,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("ppo.{m}")));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad(format!(
                "clip_epsilon must lie in (0, 1), got {}",
                self.clip_epsilon
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad(format!(
                "gae_lambda must lie in (0, 1], got {}",
                self.gae_lambda
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.entropy_coef >= 0.0 && self.value_coef >= 0.0) {
            return bad("entropy_coef and value_coef must be >= 0".into());
        }
        if self.num_envs == 0 || self.num_envs != self.env_seeds.len() {
            return bad(format!(
                "num_envs ({}) must be >= 1 and equal the number of env_seeds ({})",
                self.num_envs,
                self.env_seeds.len()
            ));
        }
        if self.rollout_length == 0 || self.minibatch_size == 0 || self.update_epochs == 0 {
            return bad("rollout_length, minibatch_size and update_epochs must be >= 1".into());
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return bad(format!(
                "hidden_sizes must be non-empty and positive, got {:?}",
                self.hidden_sizes
            ));
        }
        Ok(())
    }

    pub fn steps_per_phase(&self) -> u64 {
        (self.num_envs * self.rollout_length) as u64
    }

    /// Collect/update phases needed to reach `total_env_steps`.
    pub fn phase_count(&self) -> u64 {
        self.total_env_steps.div_ceil(self.steps_per_phase())
    }
}

/// Shared MLP trunk with a categorical policy head and a scalar value head.
///
/// The policy head emits one score block per action factor; the logit of
/// action `i` with mixed-radix digits `(d_0, d_1, ..)` is the sum of
/// `score_k[d_k]`. A single factor equal to the action count is the plain
/// dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    trunk: Network,
    policy: Network,
    value: Network,
    factors: Vec<usize>,
}

impl ActorCritic {
    /// Dense policy head over `action_count` actions.
    pub fn new(obs_len: usize, hidden: &[usize], action_count: usize, seed: u64) -> Result<Self> {
        Self::with_factors(obs_len, hidden, &[action_count], seed)
    }

    pub fn with_factors(
        obs_len: usize,
        hidden: &[usize],
        factors: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::InvalidConfig(
                "actor-critic needs at least one hidden layer".into(),
            ));
        }
        if factors.is_empty() || factors.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "invalid action factors {factors:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs: Vec<LayerSpec> = hidden
            .iter()
            .flat_map(|&h| [LayerSpec::Dense { out_features: h }, LayerSpec::Relu])
            .collect();
        let trunk = Network::new(&[obs_len], &specs, &mut rng)?;
        let width = *hidden.last().expect("non-empty");
        let scores = factors.iter().sum();
        let mut policy = Network::new(
            &[width],
            &[LayerSpec::Dense {
                out_features: scores,
            }],
            &mut rng,
        )?;
        if let Layer::Dense(d) = &mut policy.layers_mut()[0] {
            d.scale_weights(POLICY_HEAD_GAIN);
        }
        let value = Network::new(&[width], &[LayerSpec::Dense { out_features: 1 }], &mut rng)?;
        Ok(Self {
            trunk,
            policy,
            value,
            factors: factors.to_vec(),
        })
    }

    /// Default attacker for a classifier with `class_count` outputs.
    pub fn for_environment(class_count: usize, config: &PpoConfig) -> Result<Self> {
        Self::with_factors(
            crate::env::observation_len(class_count),
            &config.hidden_sizes,
            &config.policy_head.factors(),
            config.seed,
        )
    }

    fn from_parts(
        trunk: Network,
        policy: Network,
        value: Network,
        factors: Vec<usize>,
    ) -> Result<Self> {
        let width = trunk.output_shape();
        if trunk.input_shape().len() != 1
            || width.len() != 1
            || policy.input_shape() != width.as_slice()
            || value.input_shape() != width.as_slice()
            || value.output_shape() != [1]
            || policy.output_shape() != [factors.iter().sum::<usize>()]
            || factors.contains(&0)
        {
            return Err(Error::Checkpoint(
                "actor-critic heads do not fit the trunk".into(),
            ));
        }
        Ok(Self {
            trunk,
            policy,
            value,
            factors,
        })
    }

    pub fn obs_len(&self) -> usize {
        self.trunk.input_shape()[0]
    }

    pub fn action_count(&self) -> usize {
        self.factors.iter().product()
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    pub fn trunk(&self) -> &Network {
        &self.trunk
    }

    /// The dense layer producing the per-factor scores.
    pub fn policy_head(&self) -> &Network {
        &self.policy
    }

    pub fn value_head(&self) -> &Network {
        &self.value
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.policy.param_count() + self.value.param_count()
    }

    /// Sums factor scores `[batch, Σ factors]` into logits `[batch, actions]`.
    fn expand(&self, scores: Tensor) -> Result<Tensor> {
        if self.factors.len() == 1 {
            return Ok(scores);
        }
        let width: usize = self.factors.iter().sum();
        let actions = self.action_count();
        let batch = scores.rows();
        let mut out = vec![0.0f32; batch * actions];
        for (src, dst) in scores
            .data()
            .chunks_exact(width)
            .zip(out.chunks_exact_mut(actions))
        {
            // Grow the block of partial sums one factor at a time, in place:
            // entry j becomes entries j·f .. j·f + f.
            let (mut len, mut offset) = (1, 0);
            for &f in &self.factors {
                let s = &src[offset..offset + f];
                for j in (0..len).rev() {
                    let base = dst[j];
                    for (d, &v) in s.iter().enumerate().rev() {
                        dst[j * f + d] = base + v;
                    }
                }
                len *= f;
                offset += f;
            }
        }
        Tensor::new(vec![batch, actions], out)
    }

    /// Adjoint of [`expand`](Self::expand).
    fn reduce(&self, dlogits: &Tensor) -> Result<Tensor> {
        if self.factors.len() == 1 {
            return Ok(dlogits.clone());
        }
        let width: usize = self.factors.iter().sum();
        let actions = self.action_count();
        let batch = dlogits.rows();
        let mut out = vec![0.0f32; batch * width];
        for (g, dst) in dlogits
            .data()
            .chunks_exact(actions)
            .zip(out.chunks_exact_mut(width))
        {
            let (mut stride, mut offset) = (actions, 0);
            for &f in &self.factors {
                stride /= f;
                let ds = &mut dst[offset..offset + f];
                for (i, &v) in g.iter().enumerate() {
                    ds[(i / stride) % f] += v;
                }
                offset += f;
            }
        }
        Tensor::new(vec![batch, width], out)
    }

    /// Logits `[batch, actions]` and state values, without caching.
    pub fn infer(&self, obs: &Tensor) -> Result<(Tensor, Vec<f32>)> {
        let h = self.trunk.infer(obs)?;
        let logits = self.expand(self.policy.infer(&h)?)?;
        let values = self.value.infer(&h)?.into_data();
        Ok((logits, values))
    }

    /// Like [`infer`](Self::infer) but caches activations for `backward`.
    pub fn forward(&mut self, obs: &Tensor) -> Result<(Tensor, Vec<f32>)> {
        let h = self.trunk.forward(obs)?;
        let scores = self.policy.forward(&h)?;
        let logits = self.expand(scores)?;
        let values = self.value.forward(&h)?.into_data();
        Ok((logits, values))
    }

    /// Overwrites all parameter gradients from the loss gradients with
    /// respect to the logits and the values.
    pub fn backward(&mut self, dlogits: &Tensor, dvalues: &[f32]) -> Result<()> {
        let dv = Tensor::new(vec![dvalues.len(), 1], dvalues.to_vec())?;
        let dscores = self.reduce(dlogits)?;
        let mut dh = self.policy.backward(&dscores)?;
        let dh_value = self.value.backward(&dv)?;
        dh.data_mut()
            .iter_mut()
            .zip(dh_value.data())
            .for_each(|(a, b)| *a += b);
        self.trunk.backward_params(&dh)
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(w, ACTOR_CRITIC_MAGIC)?;
        write_u32(w, self.factors.len() as u32)?;
        for &f in &self.factors {
            write_u32(w, f as u32)?;
        }
        write_layers(w, &self.trunk)?;
        write_layers(w, &self.policy)?;
        write_layers(w, &self.value)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        read_header(r, ACTOR_CRITIC_MAGIC)?;
        let n = read_u32(r)? as usize;
        if n == 0 || n > 16 {
            return Err(Error::Checkpoint(format!(
                "implausible action factor count {n}"
            )));
        }
        let factors = (0..n)
            .map(|_| read_u32(r).map(|f| f as usize))
            .collect::<Result<Vec<_>>>()?;
        let trunk = read_layers(r)?;
        let policy = read_layers(r)?;
        let value = read_layers(r)?;
        Self::from_parts(trunk, policy, value, factors)
    }

    pub fn save_to_path(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.save(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_from_path(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let model = Self::load(&mut r)?;
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(Error::Checkpoint(format!(
                "{}: trailing bytes",
                path.display()
            )));
        }
        Ok(model)
    }
}

impl Parameterized for ActorCritic {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [f32], &[f32])) {
        self.trunk.for_each_param(f);
        self.policy.for_each_param(f);
        self.value.for_each_param(f);
    }

    fn zero_grad(&mut self) {
        self.trunk.zero_grad();
        self.policy.zero_grad();
        self.value.zero_grad();
    }
}

/// Log-softmax with `f64` accumulation.
fn log_probs(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = logits.iter().map(|&z| (z as f64 - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&z| z as f64 - lse).collect()
}

/// Draws from the categorical distribution given by `logits`; returns the
/// action and its log-probability.
pub fn sample_action<R: Rng + ?Sized>(logits: &[f32], rng: &mut R) -> Result<(usize, f32)> {
    // −∞ is a legitimate zero-probability logit; NaN and +∞ are not.
    let broken = |z: &&f32| z.is_nan() || **z == f32::INFINITY;
    if logits.iter().any(|z| broken(&z)) || logits.iter().all(|z| *z == f32::NEG_INFINITY) {
        return Err(Error::Divergence(format!(
            "policy produced invalid logits ({} of {} NaN or infinite)",
            logits.iter().filter(broken).count(),
            logits.len()
        )));
    }
    let log_probs = log_probs(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = None;
    for (i, lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            chosen = Some(i);
        }
        acc += p;
        if u < acc && p > 0.0 {
            break;
        }
    }
    let a = chosen.expect("some action has positive probability");
    Ok((a, log_probs[a] as f32))
}

/// The clipped surrogate `min(r·A, clip(r, 1−ε, 1+ε)·A)`.
pub fn clipped_objective(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

/// Per-sample training targets aligned with a logits block.
#[derive(Debug, Clone, Copy)]
pub struct LossTargets<'a> {
    pub actions: &'a [usize],
    pub old_log_probs: &'a [f32],
    pub advantages: &'a [f32],
    pub returns: &'a [f32],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Policy term + value_coef · value loss − entropy_coef · entropy.
    pub total: f64,
    /// Negated mean clipped objective.
    pub policy_loss: f64,
    /// Mean clipped objective (before negation).
    pub objective: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Fraction of samples whose ratio lies outside `[1−ε, 1+ε]`.
    pub clip_fraction: f64,
}

/// Evaluates the PPO loss on model outputs and, on request, its gradient
/// with respect to the logits and the values.
pub fn loss_from_outputs(
    logits: &Tensor,
    values: &[f32],
    targets: &LossTargets<'_>,
    config: &PpoConfig,
    want_grads: bool,
) -> (LossBreakdown, Option<(Tensor, Vec<f32>)>) {
    let batch = targets.actions.len();
    let actions = logits.len() / batch.max(1);
    let n = batch as f64;
    let eps = config.clip_epsilon as f64;
    let (ec, vc) = (config.entropy_coef as f64, config.value_coef as f64);
    let mut out = LossBreakdown::default();
    let mut dlogits = want_grads.then(|| vec![0.0f32; logits.len()]);
    let mut dvalues = want_grads.then(|| vec![0.0f32; batch]);
    let mut probs = vec![0.0f32; actions];
    for i in 0..batch {
        let row = &logits.data()[i * actions..(i + 1) * actions];
        // Probabilities in f32, normalizer and reductions in f64.
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (p, &z) in probs.iter_mut().zip(row) {
            *p = (z - max).exp();
            sum += *p as f64;
        }
        let log_sum = sum.ln();
        let inv = (1.0 / sum) as f32;
        probs.iter_mut().for_each(|p| *p *= inv);
        let log_prob = |z: f32| (z - max) as f64 - log_sum;
        let entropy = -probs
            .iter()
            .zip(row)
            .filter(|(p, _)| **p > 0.0)
            .map(|(&p, &z)| p as f64 * log_prob(z))
            .sum::<f64>();
        let a = targets.actions[i];
        let adv = targets.advantages[i] as f64;
        let ratio = (log_prob(row[a]) - targets.old_log_probs[i] as f64).exp();
        let obj = clipped_objective(ratio, adv, eps);
        out.objective += obj / n;
        if (ratio - 1.0).abs() > eps {
            out.clip_fraction += 1.0 / n;
        }
        out.entropy += entropy / n;
        let err = values[i] as f64 - targets.returns[i] as f64;
        out.value_loss += err * err / n;
        if let (Some(dl), Some(dv)) = (dlogits.as_mut(), dvalues.as_mut()) {
            // The unclipped branch is active whenever it is the minimum.
            let active = ratio * adv <= ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
            let pg = if active {
                (-adv * ratio / n) as f32
            } else {
                0.0
            };
            let ent = (ec / n) as f32;
            let shift = (entropy - max as f64 - log_sum) as f32;
            let g = &mut dl[i * actions..(i + 1) * actions];
            // d/dz_j: pg·(1[j=a] − p_j) + ent·p_j·(log p_j + H)
            for ((gj, &p), &z) in g.iter_mut().zip(&probs).zip(row) {
                *gj = if p > 0.0 {
                    -pg * p + ent * p * (z + shift)
                } else {
                    0.0
                };
            }
            g[a] += pg;
            dv[i] = (vc * 2.0 * err / n) as f32;
        }
    }
    out.policy_loss = -out.objective;
    out.total = out.policy_loss + vc * out.value_loss - ec * out.entropy;
    let grads = dlogits.zip(dvalues).map(|(dl, dv)| {
        (
            Tensor::new(logits.shape().to_vec(), dl).expect("gradient shape"),
            dv,
        )
    });
    (out, grads)
}

/// PPO loss of `actor_critic` on a batch of observations `[batch, obs_len]`.
pub fn ppo_loss(
    actor_critic: &ActorCritic,
    observations: &Tensor,
    targets: &LossTargets<'_>,
    config: &PpoConfig,
) -> Result<LossBreakdown> {
    let (logits, values) = actor_critic.infer(observations)?;
    Ok(loss_from_outputs(&logits, &values, targets, config, false).0)
}

/// Generalized advantage estimation over one environment's trajectory.
///
/// `dones[t]` marks that the episode ended at step `t`; `last_value` is
/// V(s_T) for the observation following the final step.
pub fn compute_gae(
    rewards: &[f32],
    values: &[f32],
    dones: &[bool],
    last_value: f32,
    gamma: f32,
    lambda: f32,
) -> (Vec<f32>, Vec<f32>) {
    let n = rewards.len();
    let mut advantages = vec![0.0f32; n];
    let mut next_adv = 0.0f32;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        advantages[t] = next_adv;
        next_value = values[t];
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    (advantages, returns)
}

/// Shifts and scales to mean 0, standard deviation 1; left unchanged when
/// the standard deviation is zero.
pub fn normalize_advantages(advantages: &mut [f32]) {
    let n = advantages.len() as f64;
    if n == 0.0 {
        return;
    }
    let mean = advantages.iter().map(|&a| a as f64).sum::<f64>() / n;
    let var = advantages
        .iter()
        .map(|&a| (a as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std > 0.0 {
        advantages
            .iter_mut()
            .for_each(|a| *a = ((*a as f64 - mean) / (std + 1e-8)) as f32);
    }
}

/// Transitions from one collection phase, environment-major: the steps of
/// environment `e` occupy `e * rollout_length .. (e + 1) * rollout_length`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub obs_len: usize,
    pub observations: Vec<f32>,
    pub actions: Vec<usize>,
    pub log_probs_old: Vec<f32>,
    pub rewards: Vec<f32>,
    pub values: Vec<f32>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f32>,
    pub returns: Vec<f32>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn observation(&self, i: usize) -> &[f32] {
        &self.observations[i * self.obs_len..(i + 1) * self.obs_len]
    }

    pub fn gather_observations(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.obs_len);
        for &i in indices {
            data.extend_from_slice(self.observation(i));
        }
        Tensor::new(vec![indices.len(), self.obs_len], data).expect("observation block")
    }
}

struct Worker {
    env: EvasionEnv,
    obs: Vec<f32>,
    rng: ChaCha8Rng,
}

struct StepResult {
    action: usize,
    log_prob: f32,
    reward: f32,
    done: bool,
    finished: Option<EpisodeSummary>,
}

impl Worker {
    fn act(&mut self, logits: &[f32]) -> Result<StepResult> {
        let (action, log_prob) = sample_action(logits, &mut self.rng)?;
        let out = self.env.step(Action::new(action)?)?;
        let finished = if out.done {
            let summary = self.env.episode_summary();
            self.obs = self.env.reset()?;
            summary
        } else {
            self.obs = out.observation;
            None
        };
        Ok(StepResult {
            action,
            log_prob,
            reward: out.reward,
            done: out.done,
            finished,
        })
    }
}

/// Drives a fixed set of environments and keeps their in-progress episodes
/// across collection phases.
pub struct RolloutCollector {
    workers: Vec<Worker>,
    scenario: Scenario,
    env_steps: u64,
    episodes: u64,
}

impl RolloutCollector {
    /// Resets every environment; `seeds[i]` seeds the action sampler of
    /// environment `i`.
    pub fn new(envs: Vec<EvasionEnv>, seeds: &[u64]) -> Result<Self> {
        if envs.is_empty() || envs.len() != seeds.len() {
            return Err(Error::InvalidConfig(format!(
                "{} environments for {} seeds",
                envs.len(),
                seeds.len()
            )));
        }
        let scenario = envs[0].scenario();
        let workers = envs
            .into_iter()
            .zip(seeds)
            .map(|(mut env, &seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(ACTION_STREAM);
                Ok(Worker {
                    obs: env.reset()?,
                    env,
                    rng,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            workers,
            scenario,
            env_steps: 0,
            episodes: 0,
        })
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    fn current_observations(&self) -> Result<Tensor> {
        let obs_len = self.workers[0].obs.len();
        let mut data = Vec::with_capacity(self.workers.len() * obs_len);
        self.workers
            .iter()
            .for_each(|w| data.extend_from_slice(&w.obs));
        Tensor::new(vec![self.workers.len(), obs_len], data)
    }

    /// Runs `rollout_length` steps in every environment under the current
    /// policy, then fills advantages and returns.
    ///
    /// With `parallel`, environments step concurrently; results are merged
    /// in environment order either way.
    pub fn collect(
        &mut self,
        actor_critic: &ActorCritic,
        config: &PpoConfig,
        parallel: bool,
    ) -> Result<(RolloutBatch, Vec<EpisodeRecord>)> {
        let n_envs = self.workers.len();
        let t_len = config.rollout_length;
        let total = n_envs * t_len;
        let obs_len = actor_critic.obs_len();
        if self.workers[0].obs.len() != obs_len {
            return Err(Error::Inconsistent(format!(
                "observation length {} does not match the actor-critic input {obs_len}",
                self.workers[0].obs.len()
            )));
        }
        let mut batch = RolloutBatch {
            obs_len,
            observations: vec![0.0; total * obs_len],
            actions: vec![0; total],
            log_probs_old: vec![0.0; total],
            rewards: vec![0.0; total],
            values: vec![0.0; total],
            dones: vec![false; total],
            advantages: vec![0.0; total],
            returns: vec![0.0; total],
        };
        let mut records = Vec::new();
        for t in 0..t_len {
            let obs = self.current_observations()?;
            let (logits, values) = actor_critic.infer(&obs)?;
            for e in 0..n_envs {
                let i = e * t_len + t;
                batch.observations[i * obs_len..(i + 1) * obs_len]
                    .copy_from_slice(&self.workers[e].obs);
                batch.values[i] = values[e];
            }
            let rows: Vec<&[f32]> = logits.data().chunks(actor_critic.action_count()).collect();
            let results: Vec<Result<StepResult>> = if parallel {
                self.workers
                    .par_iter_mut()
                    .zip(rows.par_iter())
                    .map(|(w, row)| w.act(row))
                    .collect()
            } else {
                self.workers
                    .iter_mut()
                    .zip(&rows)
                    .map(|(w, row)| w.act(row))
                    .collect()
            };
            for (e, res) in results.into_iter().enumerate() {
                let res = res?;
                let i = e * t_len + t;
                batch.actions[i] = res.action;
                batch.log_probs_old[i] = res.log_prob;
                batch.rewards[i] = res.reward;
                batch.dones[i] = res.done;
                self.env_steps += 1;
                if let Some(s) = res.finished {
                    records.push(EpisodeRecord {
                        episode_index: self.episodes,
                        class_label: s.class_label,
                        scenario: self.scenario,
                        fooled: s.fooled,
                        steps_used: s.steps_used,
                        episode_return: s.episode_return,
                        query_count_delta: s.query_count_delta,
                        wall_env_steps: self.env_steps,
                    });
                    self.episodes += 1;
                }
            }
        }
        let (_, last_values) = actor_critic.infer(&self.current_observations()?)?;
        for e in 0..n_envs {
            let span = e * t_len..(e + 1) * t_len;
            let (adv, ret) = compute_gae(
                &batch.rewards[span.clone()],
                &batch.values[span.clone()],
                &batch.dones[span.clone()],
                last_values[e],
                config.gamma,
                config.gae_lambda,
            );
            batch.advantages[span.clone()].copy_from_slice(&adv);
            batch.returns[span].copy_from_slice(&ret);
        }
        Ok((batch, records))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub minibatches: usize,
}

/// `update_epochs` passes of shuffled minibatch Adam steps on one batch.
/// Advantages are normalized once over the whole batch.
pub fn ppo_update<R: Rng + ?Sized>(
    batch: &RolloutBatch,
    actor_critic: &mut ActorCritic,
    optimizer: &mut AdamState,
    config: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    let mut advantages = batch.advantages.clone();
    normalize_advantages(&mut advantages);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut stats = UpdateStats::default();
    let mut mb_actions = Vec::with_capacity(config.minibatch_size);
    let mut mb_old = Vec::with_capacity(config.minibatch_size);
    let mut mb_adv = Vec::with_capacity(config.minibatch_size);
    let mut mb_ret = Vec::with_capacity(config.minibatch_size);
    for _ in 0..config.update_epochs {
        order.shuffle(rng);
        for idx in order.chunks(config.minibatch_size) {
            mb_actions.clear();
            mb_old.clear();
            mb_adv.clear();
            mb_ret.clear();
            for &i in idx {
                mb_actions.push(batch.actions[i]);
                mb_old.push(batch.log_probs_old[i]);
                mb_adv.push(advantages[i]);
                mb_ret.push(batch.returns[i]);
            }
            let targets = LossTargets {
                actions: &mb_actions,
                old_log_probs: &mb_old,
                advantages: &mb_adv,
                returns: &mb_ret,
            };
            let (logits, values) = actor_critic.forward(&batch.gather_observations(idx))?;
            let (loss, grads) = loss_from_outputs(&logits, &values, &targets, config, true);
            if !loss.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "PPO loss became non-finite (policy {}, value {}, entropy {})",
                    loss.policy_loss, loss.value_loss, loss.entropy
                )));
            }
            let (dlogits, dvalues) = grads.expect("gradients requested");
            actor_critic.backward(&dlogits, &dvalues)?;
            optimizer.step(actor_critic);
            stats.policy_loss += loss.policy_loss;
            stats.value_loss += loss.value_loss;
            stats.entropy += loss.entropy;
            stats.clip_fraction += loss.clip_fraction;
            stats.minibatches += 1;
        }
    }
    let m = stats.minibatches.max(1) as f64;
    stats.policy_loss /= m;
    stats.value_loss /= m;
    stats.entropy /= m;
    stats.clip_fraction /= m;
    Ok(stats)
}

/// One progress line, emitted after every update phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub env_steps: u64,
    pub lsr_running: Option<f64>,
    pub aaf_running: Option<f64>,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// What the phase hook sees after each collect/update cycle.
pub struct PhaseReport<'a> {
    pub phase: u64,
    pub records: &'a [EpisodeRecord],
    pub progress: Progress,
    pub update: UpdateStats,
    pub actor_critic: &'a ActorCritic,
}

pub type PhaseHook<'a> = dyn FnMut(&PhaseReport<'_>) -> Result<()> + 'a;

#[derive(Debug, Clone)]
pub struct AttackRun {
    pub actor_critic: ActorCritic,
    pub records: Vec<EpisodeRecord>,
    pub updates: Vec<UpdateStats>,
    pub env_steps: u64,
}

/// Builds one environment per configured seed.
pub fn build_envs(
    pool: &Arc<ImagePool>,
    model: &Arc<ClassifierModel>,
    scenario: Scenario,
    defense: &DefenseConfig,
    seeds: &[u64],
) -> Result<Vec<EvasionEnv>> {
    seeds
        .iter()
        .map(|&s| EvasionEnv::new(Arc::clone(pool), Arc::clone(model), scenario, *defense, s))
        .collect()
}

/// Alternates rollout collection and PPO updates until `total_env_steps`
/// have been taken. `hook` runs after every phase (logging, checkpoints).
pub fn train_attacker(
    model: Arc<ClassifierModel>,
    pool: Arc<ImagePool>,
    scenario: Scenario,
    defense: &DefenseConfig,
    config: &PpoConfig,
    parallel: bool,
    hook: Option<&mut PhaseHook<'_>>,
) -> Result<AttackRun> {
    config.validate()?;
    let envs = build_envs(&pool, &model, scenario, defense, &config.env_seeds)?;
    let mut collector = RolloutCollector::new(envs, &config.env_seeds)?;
    let mut actor_critic = ActorCritic::for_environment(model.class_count(), config)?;
    let mut optimizer =
        AdamState::new(&mut actor_critic, AdamConfig::with_lr(config.learning_rate));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut hook = hook;
    let mut records = Vec::new();
    let mut updates = Vec::new();
    let mut lsr = RunningLsr::default();
    let mut aaf = RunningAaf::default();
    for phase in 0..config.phase_count() {
        let (batch, new_records) = collector.collect(&actor_critic, config, parallel)?;
        let stats = ppo_update(
            &batch,
            &mut actor_critic,
            &mut optimizer,
            config,
            &mut shuffle_rng,
        )?;
        for r in &new_records {
            lsr.push(r.fooled);
            aaf.push(r.fooled, r.steps_used);
        }
        let progress = Progress {
            env_steps: collector.env_steps(),
            lsr_running: lsr.value(),
            aaf_running: aaf.value(),
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
        };
        log::debug!("phase {phase}: {progress:?}");
        if let Some(h) = hook.as_deref_mut() {
            h(&PhaseReport {
                phase,
                records: &new_records,
                progress,
                update: stats,
                actor_critic: &actor_critic,
            })?;
        }
        records.extend(new_records);
        updates.push(stats);
    }
    Ok(AttackRun {
        actor_critic,
        records,
        updates,
        env_steps: collector.env_steps(),
    })
}

/// Plays `episodes` episodes with uniformly random actions, cycling over the
/// environments; the reference point for judging a trained attacker.
pub fn run_random_policy(
    envs: &mut [EvasionEnv],
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeSummary>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ACTION_STREAM);
    let mut out = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let env = &mut envs[k % envs.len()];
        env.reset()?;
        loop {
            let action = Action::new(rng.random_range(0..ACTION_COUNT))?;
            if env.step(action)?.done {
                break;
            }
        }
        out.push(env.episode_summary().expect("episode finished"));
    }
    Ok(out)
}
