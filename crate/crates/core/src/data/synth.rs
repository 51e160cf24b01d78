//! Planted-moment synthetic corpus.
//!
//! Each video carries one concept: inside the target span clip features are
//! `scale·e_w + noise`, outside they are pure noise. The query names the
//! concept among a few filler words.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{MrtError, Result};

use super::annotation::Annotation;

pub const CONCEPT_WORDS: [&str; 48] = [
    "jumping", "running", "cooking", "reading", "dancing", "swimming", "singing", "climbing",
    "painting", "typing", "sweeping", "juggling", "knitting", "rowing", "skating", "boxing",
    "drumming", "fishing", "hammering", "ironing", "kicking", "laughing", "mopping", "pouring",
    "rolling", "sawing", "sewing", "shaving", "skiing", "sleeping", "sneezing", "stirring",
    "surfing", "throwing", "waving", "whistling", "writing", "yawning", "baking", "cycling",
    "digging", "folding", "lifting", "pushing", "sipping", "serving", "slicing", "washing",
];

const FILLER_WORDS: [&str; 12] = [
    "the", "a", "person", "someone", "then", "is", "slowly", "quickly", "again", "there", "now", "while",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_samples: usize,
    pub n: usize,
    pub d_v: usize,
    pub d_q: usize,
    pub vocab_size: usize,
    pub min_span_frac: f64,
    pub max_span_frac: f64,
    pub noise_std: f64,
    pub signal_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_samples: 32,
            n: 64,
            d_v: 64,
            d_q: 300,
            vocab_size: 16,
            min_span_frac: 0.1,
            max_span_frac: 0.4,
            noise_std: 0.05,
            signal_scale: 1.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MrtError::Config(m));
        if self.n == 0 || self.d_v == 0 || self.d_q == 0 {
            return fail("n, d_v and d_q must be positive".into());
        }
        if self.vocab_size == 0 || self.vocab_size > self.d_v || self.vocab_size > CONCEPT_WORDS.len() {
            return fail(format!(
                "vocab_size {} must be in 1..={}",
                self.vocab_size,
                self.d_v.min(CONCEPT_WORDS.len())
            ));
        }
        if !(0.0 < self.min_span_frac && self.min_span_frac <= self.max_span_frac && self.max_span_frac <= 1.0) {
            return fail(format!(
                "need 0 < min_span_frac <= max_span_frac <= 1, got {} and {}",
                self.min_span_frac, self.max_span_frac
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std {} must be non-negative", self.noise_std));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub items: Vec<SynthItem>,
    /// Concept words, indexed by feature channel.
    pub vocabulary: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthItem {
    pub annotation: Annotation,
    pub features: Tensor,
    pub concept: usize,
    pub start: usize,
    pub end: usize,
}

/// Deterministic for a given spec; sample `i` draws from stream `i` so items
/// do not depend on each other. Features are rounded to `f32` so a corpus
/// written to disk reads back identically.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| MrtError::Config(e.to_string()))?;
    let items = (0..spec.num_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            generate_one(spec, &noise, i, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(SynthCorpus {
        items,
        vocabulary: CONCEPT_WORDS[..spec.vocab_size].iter().map(|w| w.to_string()).collect(),
    })
}

fn generate_one(spec: &SynthSpec, noise: &Normal<f64>, i: usize, rng: &mut ChaCha8Rng) -> Result<SynthItem> {
    let n = spec.n;
    let concept = rng.random_range(0..spec.vocab_size);
    let frac = rng.random_range(spec.min_span_frac..=spec.max_span_frac);
    let len = ((frac * n as f64).round() as usize).clamp(1, n);
    let start = rng.random_range(0..=n - len);
    let end = start + len - 1;
    let duration: f64 = rng.random_range(15.0..45.0);

    let mut data = Vec::with_capacity(n * spec.d_v);
    for t in 0..n {
        for c in 0..spec.d_v {
            let mut v = noise.sample(rng);
            if (start..=end).contains(&t) && c == concept {
                v += spec.signal_scale;
            }
            data.push(v as f32 as f64);
        }
    }

    let fillers = rng.random_range(1..=4usize);
    let mut query: Vec<String> = (0..fillers)
        .map(|_| FILLER_WORDS.choose(rng).expect("non-empty").to_string())
        .collect();
    let at = rng.random_range(0..=query.len());
    query.insert(at, CONCEPT_WORDS[concept].to_string());

    Ok(SynthItem {
        annotation: Annotation {
            video_id: format!("synth_{i:05}"),
            duration_sec: duration,
            start_sec: start as f64 / n as f64 * duration,
            end_sec: end as f64 / n as f64 * duration,
            query,
        },
        features: Tensor::new(vec![n, spec.d_v], data)?,
        concept,
        start,
        end,
    })
}
