//! Disclosure scenarios wrapped around the classifier, including the
//! Dirichlet confidence-randomization defense.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::dataset::Image;
use crate::error::{Error, Result};

/// How much of the classifier output an attacker sees per query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    /// Predicted label only.
    #[serde(rename = "black-box")]
    BlackBox,
    /// Label plus the full confidence vector.
    #[serde(rename = "true-distribution")]
    TrueDistribution,
    /// Label, its true confidence, and Dirichlet-randomized confidences for
    /// every other class (the noise defense).
    #[serde(rename = "randomized-others")]
    TrueConfidenceOthersRandomized,
    /// Label plus its confidence; every other entry zero.
    #[serde(rename = "correct-only")]
    CorrectConfidenceOnly,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::BlackBox,
        Scenario::TrueDistribution,
        Scenario::TrueConfidenceOthersRandomized,
        Scenario::CorrectConfidenceOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::BlackBox => "black-box",
            Scenario::TrueDistribution => "true-distribution",
            Scenario::TrueConfidenceOthersRandomized => "randomized-others",
            Scenario::CorrectConfidenceOnly => "correct-only",
        }
    }

    /// Position in [`Scenario::ALL`]; used for tie-breaking.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    /// Symmetric Dirichlet concentration for the non-predicted classes.
    pub dirichlet_alpha: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            dirichlet_alpha: 1.0,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "defense.dirichlet_alpha must be positive, got {}",
                self.dirichlet_alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisclosureResponse {
    pub predicted_label: usize,
    pub confidence_vector: Vec<f32>,
    /// 1-based index of this query on its oracle.
    pub query_index: u64,
}

/// Symmetric Dirichlet sample over `k` positions from normalized
/// Gamma(alpha, 1) draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(k: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    assert!(alpha > 0.0, "Dirichlet concentration must be positive");
    match k {
        0 => return Vec::new(),
        1 => return vec![1.0],
        _ => {}
    }
    let gamma = Gamma::new(alpha, 1.0).expect("valid gamma parameters");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        // Every draw underflowed (tiny alpha): the limit is a vertex.
        let mut out = vec![0.0; k];
        out[rng.random_range(0..k)] = 1.0;
        out
    }
}

/// Keeps `probs[predicted]` exactly and spreads the residual mass over the
/// other classes with fresh Dirichlet(alpha) weights.
pub fn randomize_confidences<R: Rng + ?Sized>(
    probs: &[f32],
    predicted: usize,
    alpha: f64,
    rng: &mut R,
) -> Vec<f32> {
    assert!(predicted < probs.len(), "predicted label out of range");
    let kept = probs[predicted];
    let residual = (1.0 - kept).max(0.0);
    let weights = sample_dirichlet(probs.len() - 1, alpha, rng);
    let mut out = Vec::with_capacity(probs.len());
    let mut w = weights.into_iter();
    for i in 0..probs.len() {
        if i == predicted {
            out.push(kept);
        } else {
            out.push((residual as f64 * w.next().expect("one weight per class")) as f32);
        }
    }
    out
}

/// The confidence vector an attacker sees under `scenario`.
pub fn filter_confidences<R: Rng + ?Sized>(
    probs: &[f32],
    predicted: usize,
    scenario: Scenario,
    defense: &DefenseConfig,
    rng: &mut R,
) -> Vec<f32> {
    match scenario {
        Scenario::BlackBox => {
            let mut v = vec![0.0; probs.len()];
            v[predicted] = 1.0;
            v
        }
        Scenario::TrueDistribution => probs.to_vec(),
        Scenario::TrueConfidenceOthersRandomized => {
            randomize_confidences(probs, predicted, defense.dirichlet_alpha, rng)
        }
        Scenario::CorrectConfidenceOnly => {
            let mut v = vec![0.0; probs.len()];
            v[predicted] = probs[predicted];
            v
        }
    }
}

/// Query interface to the classifier under one disclosure scenario.
///
/// Each oracle owns its randomization stream; the model is shared read-only.
#[derive(Debug, Clone)]
pub struct Oracle {
    model: Arc<ClassifierModel>,
    scenario: Scenario,
    defense: DefenseConfig,
    rng: ChaCha8Rng,
    queries: u64,
}

impl Oracle {
    pub fn new(
        model: Arc<ClassifierModel>,
        scenario: Scenario,
        defense: DefenseConfig,
        rng: ChaCha8Rng,
    ) -> Self {
        Self {
            model,
            scenario,
            defense,
            rng,
            queries: 0,
        }
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn model(&self) -> &Arc<ClassifierModel> {
        &self.model
    }

    pub fn class_count(&self) -> usize {
        self.model.class_count()
    }

    /// Runs the classifier once and filters its output per scenario.
    pub fn disclose(&mut self, image: &Image) -> DisclosureResponse {
        let prediction = self.model.predict_probs(image);
        self.queries += 1;
        let confidence_vector = filter_confidences(
            &prediction.probs,
            prediction.label,
            self.scenario,
            &self.defense,
            &mut self.rng,
        );
        DisclosureResponse {
            predicted_label: prediction.label,
            confidence_vector,
            query_index: self.queries,
        }
    }

    pub fn query_count(&self) -> u64 {
        self.queries
    }

    pub fn reset_query_count(&mut self) {
        self.queries = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::NormalizationSpec;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    const PROBS: [f32; 3] = [0.7, 0.2, 0.1];

    #[test]
    fn black_box_is_one_hot() {
        let v = filter_confidences(
            &PROBS,
            0,
            Scenario::BlackBox,
            &DefenseConfig::default(),
            &mut rng(0),
        );
        assert_eq!(v, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn true_distribution_passes_through() {
        let v = filter_confidences(
            &PROBS,
            0,
            Scenario::TrueDistribution,
            &DefenseConfig::default(),
            &mut rng(0),
        );
        assert_eq!(v, PROBS.to_vec());
    }

    #[test]
    fn correct_only_masks_the_rest() {
        let v = filter_confidences(
            &PROBS,
            0,
            Scenario::CorrectConfidenceOnly,
            &DefenseConfig::default(),
            &mut rng(0),
        );
        assert_eq!(v, vec![0.7, 0.0, 0.0]);
    }

    #[test]
    fn two_classes_force_the_residual() {
        let v = randomize_confidences(&[0.7, 0.3], 0, 1.0, &mut rng(1));
        assert_eq!(v, vec![0.7, 0.3]);
    }

    #[test]
    fn full_confidence_stays_one_hot() {
        let v = randomize_confidences(&[0.0, 1.0, 0.0, 0.0], 1, 1.0, &mut rng(2));
        assert_eq!(v, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn fresh_sample_per_call() {
        let mut r = rng(3);
        let probs = [0.5, 0.3, 0.2];
        let mut differing = 0;
        let mut prev = randomize_confidences(&probs, 0, 1.0, &mut r);
        for _ in 0..1000 {
            let next = randomize_confidences(&probs, 0, 1.0, &mut r);
            if next.iter().zip(&prev).any(|(a, b)| (a - b).abs() > 1e-9) {
                differing += 1;
            }
            prev = next;
        }
        assert_eq!(differing, 1000);
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
            assert_eq!(
                serde_json::to_string(&s).unwrap(),
                format!("\"{}\"", s.name())
            );
        }
        let err = "foo".parse::<Scenario>().unwrap_err().to_string();
        for s in Scenario::ALL {
            assert!(err.contains(s.name()));
        }
    }

    #[test]
    fn query_counter_tracks_disclose_only() {
        let model = Arc::new(ClassifierModel::new(3, NormalizationSpec::default(), 0).unwrap());
        let mut oracle = Oracle::new(
            model,
            Scenario::TrueConfidenceOthersRandomized,
            DefenseConfig::default(),
            rng(4),
        );
        assert_eq!(oracle.query_count(), 0);
        let img = Image::filled(0.5);
        for i in 1..=3 {
            assert_eq!(oracle.disclose(&img).query_index, i);
        }
        assert_eq!(oracle.query_count(), 3);
        let _ = randomize_confidences(&PROBS, 0, 1.0, &mut rng(5));
        assert_eq!(oracle.query_count(), 3);
        oracle.reset_query_count();
        assert_eq!(oracle.query_count(), 0);
    }

    #[test]
    fn invalid_alpha_rejected() {
        assert!(DefenseConfig {
            dirichlet_alpha: 0.0
        }
        .validate()
        .is_err());
        assert!(DefenseConfig {
            dirichlet_alpha: f64::NAN
        }
        .validate()
        .is_err());
    }

    fn distribution() -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(0.0f32..10.0, 2..12).prop_map(|mut v| {
            v[0] += 1e-3;
            let s: f32 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        })
    }

    proptest! {
        #[test]
        fn predicted_entry_is_preserved(probs in distribution(), seed in any::<u64>(), alpha in 0.05f64..5.0) {
            let pred = crate::numnet::argmax(&probs);
            let out = randomize_confidences(&probs, pred, alpha, &mut rng(seed));
            prop_assert_eq!(out[pred], probs[pred]);
            let sum: f32 = out.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn argmax_survives_when_confident(probs in distribution(), seed in any::<u64>()) {
            let pred = crate::numnet::argmax(&probs);
            let out = randomize_confidences(&probs, pred, 1.0, &mut rng(seed));
            if probs[pred] > 0.5 {
                prop_assert_eq!(crate::numnet::argmax(&out), pred);
            }
        }

        #[test]
        fn every_scenario_honors_its_invariants(probs in distribution(), seed in any::<u64>()) {
            let pred = crate::numnet::argmax(&probs);
            for scenario in Scenario::ALL {
                let v = filter_confidences(&probs, pred, scenario, &DefenseConfig::default(), &mut rng(seed));
                prop_assert_eq!(v.len(), probs.len());
                prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
                match scenario {
                    Scenario::BlackBox => {
                        for (i, x) in v.iter().enumerate() {
                            prop_assert_eq!(*x, if i == pred { 1.0 } else { 0.0 });
                        }
                    }
                    Scenario::TrueDistribution | Scenario::TrueConfidenceOthersRandomized => {
                        prop_assert!((v.iter().sum::<f32>() - 1.0).abs() < 1e-6);
                    }
                    Scenario::CorrectConfidenceOnly => {
                        for (i, x) in v.iter().enumerate() {
                            prop_assert_eq!(*x, if i == pred { probs[pred] } else { 0.0 });
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn argmax_can_move_when_not_confident() {
        // Predicted 0.4 with residual 0.6 split over two classes: a weight
        // above 2/3 puts another class on top, which Dirichlet(1,1) does
        // with probability 2/3.
        let probs = [0.4, 0.35, 0.25];
        let mut r = rng(6);
        let moved = (0..1000)
            .filter(|_| crate::numnet::argmax(&randomize_confidences(&probs, 0, 1.0, &mut r)) != 0)
            .count();
        assert!(moved > 500 && moved < 800, "moved {moved} times");
    }
}
