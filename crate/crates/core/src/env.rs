//! The pixel-evasion MDP: one episode perturbs a correctly classified image
//! one grayscale pixel at a time until the classifier is fooled or the
//! 32-step budget runs out.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::ClassifierModel;
use crate::dataset::{Image, LabeledImage, CHANNELS, IMAGE_LEN, PLANE, SIDE};
use crate::error::{Error, Result};
use crate::oracle::{DefenseConfig, DisclosureResponse, Oracle, Scenario};

/// Maximum pixel modifications per episode.
pub const BUDGET: usize = 32;
/// Grayscale intensities available per action.
pub const LEVELS: usize = 8;
pub const ACTION_COUNT: usize = SIDE * SIDE * LEVELS;

pub const STEP_REWARD: f32 = -1.0;
/// Net reward of a fooling step (bonus +10 on top of the step cost).
pub const FOOLED_REWARD: f32 = 9.0;
/// Net reward of the final step of a failed episode (penalty −10 plus step cost).
pub const FAILED_REWARD: f32 = -11.0;

/// Consecutive misclassified draws tolerated by `reset`.
pub const MAX_RESET_ATTEMPTS: usize = 1000;

/// Observation length for a classifier with `class_count` outputs.
pub fn observation_len(class_count: usize) -> usize {
    3 * IMAGE_LEN + 1 + 2 * class_count
}

/// A pixel write, indexed as `(row * 32 + col) * 8 + level`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Action(usize);

impl Action {
    pub fn new(index: usize) -> Result<Self> {
        if index >= ACTION_COUNT {
            return Err(Error::InvalidAction(index));
        }
        Ok(Self(index))
    }

    pub fn from_parts(row: usize, col: usize, level: usize) -> Result<Self> {
        if row >= SIDE || col >= SIDE || level >= LEVELS {
            return Err(Error::InvalidAction((row * SIDE + col) * LEVELS + level));
        }
        Ok(Self((row * SIDE + col) * LEVELS + level))
    }

    pub fn index(self) -> usize {
        self.0
    }

    /// `(row, col, level)`.
    pub fn decode(self) -> (usize, usize, usize) {
        (
            self.0 / (SIDE * LEVELS),
            (self.0 / LEVELS) % SIDE,
            self.0 % LEVELS,
        )
    }

    /// Intensity written to all three channels.
    pub fn intensity(self) -> f32 {
        (self.0 % LEVELS) as f32 / (LEVELS - 1) as f32
    }
}

pub fn decode_action(index: usize) -> Result<(usize, usize, usize)> {
    Action::new(index).map(Action::decode)
}

/// Reward for the step that brought the episode to `steps_taken`.
///
/// Takes no confidence information: disclosed scores never shape the reward.
pub fn reward(fooled: bool, steps_taken: usize) -> f32 {
    if fooled {
        FOOLED_REWARD
    } else if steps_taken >= BUDGET {
        FAILED_REWARD
    } else {
        STEP_REWARD
    }
}

pub fn episode_return(rewards: &[f32]) -> f32 {
    rewards.iter().sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvasionState {
    pub original: Image,
    pub modified: Image,
    /// `modified − original`, channel-major.
    pub delta: Vec<f32>,
    pub true_label: usize,
    pub steps_taken: usize,
    pub done: bool,
    pub last_response: DisclosureResponse,
}

impl EvasionState {
    pub fn new(original: Image, true_label: usize, response: DisclosureResponse) -> Self {
        Self {
            modified: original.clone(),
            original,
            delta: vec![0.0; IMAGE_LEN],
            true_label,
            steps_taken: 0,
            done: false,
            last_response: response,
        }
    }

    /// Writes the observation vector into `out`:
    /// original ‖ modified ‖ delta ‖ one-hot label ‖ steps/32 ‖ confidences.
    pub fn write_observation(&self, out: &mut [f32]) {
        let k = self.last_response.confidence_vector.len();
        debug_assert_eq!(out.len(), observation_len(k));
        let (images, rest) = out.split_at_mut(3 * IMAGE_LEN);
        images[..IMAGE_LEN].copy_from_slice(self.original.data());
        images[IMAGE_LEN..2 * IMAGE_LEN].copy_from_slice(self.modified.data());
        images[2 * IMAGE_LEN..].copy_from_slice(&self.delta);
        let (label, rest) = rest.split_at_mut(k);
        label.fill(0.0);
        label[self.true_label] = 1.0;
        rest[0] = self.steps_taken as f32 / BUDGET as f32;
        rest[1..].copy_from_slice(&self.last_response.confidence_vector);
    }

    pub fn observation(&self) -> Vec<f32> {
        let mut out = vec![0.0; observation_len(self.last_response.confidence_vector.len())];
        self.write_observation(&mut out);
        out
    }
}

/// Overwrites all channels of the action's pixel and refreshes `delta` there.
pub fn apply_action(state: &mut EvasionState, action: Action) {
    let (row, col, _) = action.decode();
    let v = action.intensity();
    state.modified.set_pixel(row, col, [v; CHANNELS]);
    for c in 0..CHANNELS {
        let i = c * PLANE + row * SIDE + col;
        state.delta[i] = state.modified.data()[i] - state.original.data()[i];
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepInfo {
    pub fooled: bool,
    pub steps_taken: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f32>,
    pub reward: f32,
    pub done: bool,
    pub info: StepInfo,
}

/// Images grouped by class, the pool `reset` draws from.
#[derive(Debug, Clone)]
pub struct ImagePool {
    by_class: Vec<Vec<Image>>,
}

impl ImagePool {
    pub fn new(samples: &[LabeledImage], class_count: usize) -> Result<Self> {
        let mut by_class = vec![Vec::new(); class_count];
        for s in samples {
            let slot = by_class.get_mut(s.label).ok_or_else(|| {
                Error::Inconsistent(format!(
                    "sample label {} outside {class_count} classes",
                    s.label
                ))
            })?;
            slot.push(s.image.clone());
        }
        if let Some(class) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::EmptyClass {
                class: class.to_string(),
            });
        }
        Ok(Self { by_class })
    }

    pub fn class_count(&self) -> usize {
        self.by_class.len()
    }

    pub fn class(&self, label: usize) -> &[Image] {
        &self.by_class[label]
    }
}

/// Summary of a finished episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub class_label: usize,
    pub fooled: bool,
    pub steps_used: usize,
    pub episode_return: f32,
    pub query_count_delta: u64,
}

/// One environment instance.
///
/// Image sampling and the oracle's randomization use separate streams derived
/// from the same seed, so the disclosure scenario never changes which images
/// are drawn or how the episode unfolds.
#[derive(Debug, Clone)]
pub struct EvasionEnv {
    pool: Arc<ImagePool>,
    oracle: Oracle,
    rng: ChaCha8Rng,
    state: Option<EvasionState>,
    episode_return: f32,
    queries_at_reset: u64,
}

impl EvasionEnv {
    pub fn new(
        pool: Arc<ImagePool>,
        model: Arc<ClassifierModel>,
        scenario: Scenario,
        defense: DefenseConfig,
        seed: u64,
    ) -> Result<Self> {
        if pool.class_count() != model.class_count() {
            return Err(Error::Inconsistent(format!(
                "image pool has {} classes but the classifier has {}",
                pool.class_count(),
                model.class_count()
            )));
        }
        defense.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let mut oracle_rng = ChaCha8Rng::seed_from_u64(seed);
        oracle_rng.set_stream(1);
        Ok(Self {
            pool,
            oracle: Oracle::new(model, scenario, defense, oracle_rng),
            rng,
            state: None,
            episode_return: 0.0,
            queries_at_reset: 0,
        })
    }

    pub fn class_count(&self) -> usize {
        self.pool.class_count()
    }

    pub fn observation_len(&self) -> usize {
        observation_len(self.class_count())
    }

    pub fn scenario(&self) -> Scenario {
        self.oracle.scenario()
    }

    pub fn state(&self) -> Option<&EvasionState> {
        self.state.as_ref()
    }

    pub fn query_count(&self) -> u64 {
        self.oracle.query_count()
    }

    /// Starts an episode on a uniformly drawn class and a random image of it
    /// that the classifier currently labels correctly.
    pub fn reset(&mut self) -> Result<Vec<f32>> {
        let model = Arc::clone(self.oracle.model());
        for _ in 0..MAX_RESET_ATTEMPTS {
            let label = self.rng.random_range(0..self.pool.class_count());
            let images = self.pool.class(label);
            let image = &images[self.rng.random_range(0..images.len())];
            if model.predict_probs(image).label != label {
                continue;
            }
            self.queries_at_reset = self.oracle.query_count();
            let response = self.oracle.disclose(image);
            let state = EvasionState::new(image.clone(), label, response);
            let obs = state.observation();
            self.state = Some(state);
            self.episode_return = 0.0;
            return Ok(obs);
        }
        Err(Error::ClassifierTooWeak {
            attempts: MAX_RESET_ATTEMPTS,
        })
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        let state = self.state.as_mut().ok_or(Error::EpisodeFinished)?;
        if state.done {
            return Err(Error::EpisodeFinished);
        }
        apply_action(state, action);
        state.steps_taken += 1;
        let response = self.oracle.disclose(&state.modified);
        let fooled = response.predicted_label != state.true_label;
        let r = reward(fooled, state.steps_taken);
        state.done = fooled || state.steps_taken >= BUDGET;
        state.last_response = response;
        self.episode_return += r;
        Ok(StepOutcome {
            observation: state.observation(),
            reward: r,
            done: state.done,
            info: StepInfo {
                fooled,
                steps_taken: state.steps_taken,
            },
        })
    }

    /// Outcome of the current episode once it has finished.
    pub fn episode_summary(&self) -> Option<EpisodeSummary> {
        let state = self.state.as_ref().filter(|s| s.done)?;
        Some(EpisodeSummary {
            class_label: state.true_label,
            fooled: state.last_response.predicted_label != state.true_label,
            steps_used: state.steps_taken,
            episode_return: self.episode_return,
            query_count_delta: self.oracle.query_count() - self.queries_at_reset,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::NormalizationSpec;
    use proptest::prelude::*;

    /// A classifier whose prediction depends only on mean brightness: the
    /// output layer is wired so that bright images go to class 1.
    fn brightness_model() -> Arc<ClassifierModel> {
        let mut model = ClassifierModel::new(2, NormalizationSpec::default(), 0).unwrap();
        crate::classifier::test_support::wire_brightness(&mut model);
        Arc::new(model)
    }

    fn pool() -> Arc<ImagePool> {
        let samples = vec![
            LabeledImage {
                image: Image::filled(0.1),
                label: 0,
            },
            LabeledImage {
                image: Image::filled(0.9),
                label: 1,
            },
        ];
        Arc::new(ImagePool::new(&samples, 2).unwrap())
    }

    fn env(scenario: Scenario, seed: u64) -> EvasionEnv {
        EvasionEnv::new(
            pool(),
            brightness_model(),
            scenario,
            DefenseConfig::default(),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_action(0).unwrap(), (0, 0, 0));
        assert_eq!(decode_action(8191).unwrap(), (31, 31, 7));
        assert_eq!(Action::from_parts(1, 0, 3).unwrap().index(), 259);
        assert_eq!(decode_action(259).unwrap(), (1, 0, 3));
        assert!(decode_action(8192).is_err());
        assert!(Action::from_parts(0, 32, 0).is_err());
    }

    #[test]
    fn decode_is_a_bijection() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..ACTION_COUNT {
            let (r, c, l) = decode_action(i).unwrap();
            assert!(r < SIDE && c < SIDE && l < LEVELS);
            assert_eq!(Action::from_parts(r, c, l).unwrap().index(), i);
            assert!(seen.insert((r, c, l)));
        }
    }

    fn fresh_state() -> EvasionState {
        let response = DisclosureResponse {
            predicted_label: 0,
            confidence_vector: vec![1.0, 0.0],
            query_index: 1,
        };
        EvasionState::new(Image::filled(0.5), 0, response)
    }

    #[test]
    fn level_endpoints_and_idempotence() {
        let mut s = fresh_state();
        apply_action(&mut s, Action::from_parts(2, 3, 0).unwrap());
        assert_eq!(s.modified.pixel(2, 3), [0.0; 3]);
        apply_action(&mut s, Action::from_parts(2, 3, 7).unwrap());
        assert_eq!(s.modified.pixel(2, 3), [1.0; 3]);
        let once = s.clone();
        apply_action(&mut s, Action::from_parts(2, 3, 7).unwrap());
        assert_eq!(s, once);
        assert_eq!(s.delta[2 * SIDE + 3], 0.5);
        assert_eq!(s.delta[PLANE + 2 * SIDE + 3], 0.5);
    }

    #[test]
    fn returns_of_canonical_episodes() {
        assert_eq!(episode_return(&[reward(true, 1)]), 9.0);
        let mut failure: Vec<f32> = (1..BUDGET).map(|k| reward(false, k)).collect();
        failure.push(reward(false, BUDGET));
        assert_eq!(episode_return(&failure), -42.0);
        let mut ten: Vec<f32> = (1..10).map(|k| reward(false, k)).collect();
        ten.push(reward(true, 10));
        assert_eq!(episode_return(&ten), 0.0);
    }

    #[test]
    fn initial_observation_layout() {
        let mut e = env(Scenario::TrueDistribution, 3);
        let obs = e.reset().unwrap();
        assert_eq!(obs.len(), observation_len(2));
        assert_eq!(obs.len(), 9221);
        let s = e.state().unwrap();
        assert_eq!(&obs[..IMAGE_LEN], s.original.data());
        assert_eq!(&obs[IMAGE_LEN..2 * IMAGE_LEN], s.original.data());
        assert!(obs[2 * IMAGE_LEN..3 * IMAGE_LEN].iter().all(|v| *v == 0.0));
        let tail = &obs[3 * IMAGE_LEN..];
        assert_eq!(tail[s.true_label], 1.0);
        assert_eq!(tail[1 - s.true_label], 0.0);
        assert_eq!(tail[2], 0.0);
        assert_eq!(&tail[3..], &s.last_response.confidence_vector[..]);
    }

    #[test]
    fn fooling_step_ends_episode_with_bonus() {
        let mut e = env(Scenario::BlackBox, 0);
        e.reset().unwrap();
        let label = e.state().unwrap().true_label;
        // Paint the whole image the opposite brightness; the last write flips it.
        let level = if label == 0 { 7 } else { 0 };
        let mut last = None;
        'outer: for row in 0..SIDE {
            for col in 0..SIDE {
                let out = e
                    .step(Action::from_parts(row, col, level).unwrap())
                    .unwrap();
                if out.done {
                    last = Some(out);
                    break 'outer;
                }
                assert_eq!(out.reward, -1.0);
            }
        }
        let last = last.unwrap();
        if last.info.fooled {
            assert_eq!(last.reward, 9.0);
        } else {
            assert_eq!(last.info.steps_taken, BUDGET);
            assert_eq!(last.reward, -11.0);
        }
        assert!(matches!(
            e.step(Action::new(0).unwrap()),
            Err(Error::EpisodeFinished)
        ));
    }

    #[test]
    fn step_before_reset_rejected() {
        let mut e = env(Scenario::BlackBox, 0);
        assert!(e.step(Action::new(0).unwrap()).is_err());
    }

    #[test]
    fn weak_classifier_aborts_reset() {
        let samples = vec![
            LabeledImage {
                image: Image::filled(0.9),
                label: 0,
            },
            LabeledImage {
                image: Image::filled(0.1),
                label: 1,
            },
        ];
        let pool = Arc::new(ImagePool::new(&samples, 2).unwrap());
        let mut e = EvasionEnv::new(
            pool,
            brightness_model(),
            Scenario::BlackBox,
            DefenseConfig::default(),
            0,
        )
        .unwrap();
        assert!(matches!(
            e.reset(),
            Err(Error::ClassifierTooWeak { attempts: 1000 })
        ));
    }

    #[test]
    fn class_sampling_is_uniform() {
        // Binomial oracle: 10,000 resets, each class within 3 sigma of n/2.
        let mut e = env(Scenario::BlackBox, 11);
        let n = 10_000;
        let ones = (0..n)
            .filter(|_| {
                e.reset().unwrap();
                e.state().unwrap().true_label == 1
            })
            .count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((ones - n as f64 / 2.0).abs() <= 3.0 * sigma, "{ones}");
    }

    #[test]
    fn query_delta_counts_initial_disclosure_and_steps() {
        let mut e = env(Scenario::TrueDistribution, 5);
        e.reset().unwrap();
        let mut steps = 0;
        loop {
            steps += 1;
            if e.step(Action::new(0).unwrap()).unwrap().done {
                break;
            }
        }
        let summary = e.episode_summary().unwrap();
        assert_eq!(summary.query_count_delta, steps as u64 + 1);
        assert_eq!(summary.steps_used, steps);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn delta_and_budget_invariants(seed in 0u64..1000, actions in prop::collection::vec(0usize..ACTION_COUNT, 40)) {
            let mut e = env(Scenario::TrueDistribution, seed);
            e.reset().unwrap();
            let mut rewards = Vec::new();
            for a in actions {
                let out = e.step(Action::new(a).unwrap()).unwrap();
                rewards.push(out.reward);
                let s = e.state().unwrap();
                for i in 0..IMAGE_LEN {
                    prop_assert_eq!(s.delta[i], s.modified.data()[i] - s.original.data()[i]);
                }
                prop_assert!(s.modified.data().iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!(s.steps_taken <= BUDGET);
                prop_assert!([-1.0, 9.0, -11.0].contains(&out.reward));
                if out.done {
                    break;
                }
            }
            let total = episode_return(&rewards);
            prop_assert!((-42.0..=9.0).contains(&total));
            prop_assert_eq!(e.episode_summary().unwrap().episode_return, total);
        }

        #[test]
        fn scenarios_only_change_the_confidence_block(seed in 0u64..1000, actions in prop::collection::vec(0usize..ACTION_COUNT, 32)) {
            let mut a = env(Scenario::BlackBox, seed);
            let mut b = env(Scenario::TrueDistribution, seed);
            let oa = a.reset().unwrap();
            let ob = b.reset().unwrap();
            let conf = observation_len(2) - 2;
            prop_assert_eq!(&oa[..conf], &ob[..conf]);
            for act in actions {
                let x = a.step(Action::new(act).unwrap()).unwrap();
                let y = b.step(Action::new(act).unwrap()).unwrap();
                prop_assert_eq!(x.reward, y.reward);
                prop_assert_eq!(x.done, y.done);
                prop_assert_eq!(&x.observation[..conf], &y.observation[..conf]);
                if x.done {
                    break;
                }
            }
        }
    }
}
