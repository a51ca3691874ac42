//! Random view masking: which cameras fail, during training and evaluation.
//!
//! A failed camera loses both timesteps, so a [`MaskPattern`] is a per-view
//! flag that applies to t−1 and t alike.

use candle_core::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureGrid;
use crate::error::{MbevError, Result};
use crate::world::NUM_VIEWS;

/// Largest number of failed views a schedule or evaluation may use.
pub const MAX_MASKED: usize = NUM_VIEWS - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct MaskPattern {
    pub masked: [bool; NUM_VIEWS],
}

impl MaskPattern {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn from_views(views: &[usize]) -> Self {
        let mut masked = [false; NUM_VIEWS];
        for &v in views {
            masked[v] = true;
        }
        Self { masked }
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_masked(&self, v: usize) -> bool {
        self.masked[v]
    }

    pub fn masked_views(&self) -> Vec<usize> {
        (0..NUM_VIEWS).filter(|&v| self.masked[v]).collect()
    }

    pub fn rest_views(&self) -> Vec<usize> {
        (0..NUM_VIEWS).filter(|&v| !self.masked[v]).collect()
    }

    /// Compact label such as `"0+3"`, or `"none"`.
    pub fn label(&self) -> String {
        let v = self.masked_views();
        if v.is_empty() {
            "none".into()
        } else {
            v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerEpoch,
    PerIteration,
}

/// Distribution over the number of failed views `k in 0..=5`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct MaskSchedule {
    k_probs: [f64; MAX_MASKED + 1],
    pub granularity: Granularity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawSchedule {
    k_probs: Vec<f64>,
    granularity: Granularity,
}

impl TryFrom<RawSchedule> for MaskSchedule {
    type Error = MbevError;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        MaskSchedule::new(&raw.k_probs, raw.granularity)
    }
}

impl From<MaskSchedule> for RawSchedule {
    fn from(s: MaskSchedule) -> Self {
        RawSchedule {
            k_probs: s.k_probs.to_vec(),
            granularity: s.granularity,
        }
    }
}

impl MaskSchedule {
    /// `k_probs[k]` is the probability of masking `k` views. Entries past
    /// index 5 must be zero: at least one view has to survive.
    pub fn new(k_probs: &[f64], granularity: Granularity) -> Result<Self> {
        if k_probs.iter().skip(MAX_MASKED + 1).any(|&p| p != 0.0) {
            return Err(MbevError::InvalidSchedule(
                "k = 6 leaves no surviving view to reconstruct from".into(),
            ));
        }
        if k_probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(MbevError::InvalidSchedule("probabilities must be >= 0".into()));
        }
        let sum: f64 = k_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MbevError::InvalidSchedule(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        let mut probs = [0.0; MAX_MASKED + 1];
        for (dst, src) in probs.iter_mut().zip(k_probs) {
            *dst = *src;
        }
        Ok(Self {
            k_probs: probs,
            granularity,
        })
    }

    /// Uniform over `k in 1..=5`, redrawn each epoch.
    pub fn uniform_nonzero() -> Self {
        Self::new(&[0.0, 0.2, 0.2, 0.2, 0.2, 0.2], Granularity::PerEpoch).unwrap()
    }

    /// `P(k = 0) = p_zero`, remaining mass uniform over `1..=5`.
    pub fn with_zero(p_zero: f64, granularity: Granularity) -> Result<Self> {
        let rest = (1.0 - p_zero) / MAX_MASKED as f64;
        Self::new(&[p_zero, rest, rest, rest, rest, rest], granularity)
    }

    pub fn never() -> Self {
        Self::new(&[1.0], Granularity::PerIteration).unwrap()
    }

    pub fn k_probs(&self) -> &[f64; MAX_MASKED + 1] {
        &self.k_probs
    }

    pub fn draw_k<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, &p) in self.k_probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        // Rounding slack: fall back to the largest k with mass.
        self.k_probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// Uniformly random `k`-subset of the views.
pub fn random_pattern<R: Rng>(rng: &mut R, k: usize) -> MaskPattern {
    MaskPattern::from_views(&sample(rng, NUM_VIEWS, k).into_vec())
}

/// Stateful sampler. Per-epoch `k` comes from a generator keyed by
/// `(seed, epoch)`; the subsets come from a running stream, so the sequence
/// of patterns is a pure function of the seed and the epochs visited.
#[derive(Debug, Clone)]
pub struct MaskSampler {
    schedule: MaskSchedule,
    seed: u64,
    rng: ChaCha8Rng,
}

impl MaskSampler {
    pub fn new(schedule: MaskSchedule, seed: u64) -> Self {
        Self {
            schedule,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn schedule(&self) -> &MaskSchedule {
        &self.schedule
    }

    /// The number of masked views used throughout `epoch` (per-epoch mode).
    pub fn epoch_k(&self, epoch: usize) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        self.schedule.draw_k(&mut rng)
    }

    pub fn sample_mask(&mut self, epoch: usize) -> MaskPattern {
        let k = match self.schedule.granularity {
            Granularity::PerEpoch => self.epoch_k(epoch),
            Granularity::PerIteration => self.schedule.draw_k(&mut self.rng),
        };
        random_pattern(&mut self.rng, k)
    }
}

/// All `C(6, k)` patterns with exactly `k` failed views, in lexicographic
/// order of their sorted view indices.
pub fn enumerate_patterns(k: usize) -> Result<Vec<MaskPattern>> {
    if k > MAX_MASKED {
        return Err(MbevError::KOutOfRange(k));
    }
    fn rec(start: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<MaskPattern>) {
        if cur.len() == k {
            out.push(MaskPattern::from_views(cur));
            return;
        }
        for v in start..NUM_VIEWS {
            cur.push(v);
            rec(v + 1, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, k, &mut Vec::new(), &mut out);
    Ok(out)
}

/// Both timesteps of one view, `(T, Hf, Wf, C)`.
#[derive(Debug, Clone)]
pub struct ViewSlice {
    pub view: usize,
    pub tokens: Tensor,
}

/// `F_rest` and `F_mask`: the feature grid partitioned by a pattern.
#[derive(Debug, Clone)]
pub struct MaskSplit {
    pub rest: Vec<ViewSlice>,
    pub masked: Vec<ViewSlice>,
}

pub fn apply_mask(features: &FeatureGrid, pattern: &MaskPattern) -> Result<MaskSplit> {
    let mut rest = Vec::new();
    let mut masked = Vec::new();
    for v in 0..NUM_VIEWS {
        let slice = ViewSlice {
            view: v,
            tokens: features.view(v)?,
        };
        if pattern.is_masked(v) {
            masked.push(slice);
        } else {
            rest.push(slice);
        }
    }
    Ok(MaskSplit { rest, masked })
}
