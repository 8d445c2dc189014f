//! Deterministic synthetic embedding generator for ground-truth-labeled
//! fixtures that mimic the domain-adaptation setting.
//!
//! Each speaker gets a random unit mean direction; members are the mean
//! plus isotropic Gaussian noise (std = 1/sqrt(concentration)), normalized.
//! An `outlier_rate` fraction of samples is re-drawn near a different
//! speaker's mean with doubled noise, planting intra-class noise. A
//! `split_rate` fraction of speakers gets a bimodal mean pair, planting
//! the cluster splits that progressive merging must repair.
//!
//! Every speaker samples from its own RNG stream, so output is fully
//! deterministic given the seed and independent of evaluation order.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use crate::embed::{EmbeddingSet, LabeledSubset};
use crate::error::{Error, Result};

/// Cosine between the two mode means of a split speaker. High enough for
/// the merge stage to reach (above typical CMD values), low enough that the
/// modes land in separate clusters.
const SPLIT_MODE_COS: f64 = 0.62;

/// Outliers are drawn around the foreign mean with this noise multiplier,
/// keeping them noticeably looser than genuine members.
const OUTLIER_NOISE_MULT: f64 = 2.0;

/// Generator parameters.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub dim: usize,
    pub concentration: f64,
    pub outlier_rate: f64,
    pub split_rate: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// The desk-scale benchmark fixture used by the acceptance suite: 200
    /// speakers, 20 utterances each, 64 dimensions, 5% outliers, 15% split
    /// speakers. The concentration keeps speakers tight enough that graph
    /// pruning removes planted outliers without shattering genuine classes.
    pub fn desk_benchmark(seed: u64) -> SynthSpec {
        SynthSpec {
            speakers: 200,
            utterances_per_speaker: 20,
            dim: 64,
            concentration: 400.0,
            outlier_rate: 0.05,
            split_rate: 0.15,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.speakers < 2 {
            return Err(Error::Config("synth needs at least 2 speakers".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("synth needs dim >= 2".into()));
        }
        if self.utterances_per_speaker == 0 {
            return Err(Error::Config("utterances_per_speaker must be positive".into()));
        }
        if !self.concentration.is_sign_positive() || self.concentration == 0.0 {
            return Err(Error::Config("concentration must be positive".into()));
        }
        for (name, value) in [
            ("outlier_rate", self.outlier_rate),
            ("split_rate", self.split_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::InvalidRate { name, value });
            }
        }
        Ok(())
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Second mode mean at a fixed cosine from the first.
fn split_mean(rng: &mut ChaCha8Rng, mean: &[f64]) -> Vec<f64> {
    let g = unit_gaussian(rng, mean.len());
    let along: f64 = g.iter().zip(mean).map(|(a, b)| a * b).sum();
    let mut perp: Vec<f64> = g.iter().zip(mean).map(|(a, b)| a - along * b).collect();
    let norm = perp.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut perp {
        *x /= norm;
    }
    let sin = (1.0 - SPLIT_MODE_COS * SPLIT_MODE_COS).sqrt();
    mean.iter()
        .zip(&perp)
        .map(|(m, p)| SPLIT_MODE_COS * m + sin * p)
        .collect()
}

/// Generates the embedding set and its full ground-truth labeling.
/// Utterance ids are `spk<S>-utt<U>`; ground-truth class names are
/// `spk<S>`.
pub fn generate(spec: &SynthSpec) -> Result<(EmbeddingSet, LabeledSubset)> {
    spec.validate()?;
    let noise_std = 1.0 / spec.concentration.sqrt();

    // Pass 1: per-speaker RNG streams, base means and split decisions. The
    // streams carry over to member sampling so outliers can reference any
    // other speaker's base mean without breaking determinism.
    let mut rngs: Vec<ChaCha8Rng> = Vec::with_capacity(spec.speakers);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.speakers);
    let mut second_means: Vec<Option<Vec<f64>>> = Vec::with_capacity(spec.speakers);
    for speaker in 0..spec.speakers {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(speaker as u64 + 1);
        let mean = unit_gaussian(&mut rng, spec.dim);
        let split = rng.random_bool(spec.split_rate);
        second_means.push(split.then(|| split_mean(&mut rng, &mean)));
        means.push(mean);
        rngs.push(rng);
    }

    // Pass 2: members.
    let mut ids = Vec::with_capacity(spec.speakers * spec.utterances_per_speaker);
    let mut rows = Vec::with_capacity(spec.speakers * spec.utterances_per_speaker);
    let mut pairs = Vec::with_capacity(spec.speakers * spec.utterances_per_speaker);
    for speaker in 0..spec.speakers {
        let rng = &mut rngs[speaker];
        for utt in 0..spec.utterances_per_speaker {
            let outlier = rng.random_bool(spec.outlier_rate);
            let (base, mult): (&[f64], f64) = if outlier {
                let offset = rng.random_range(1..spec.speakers);
                let target = (speaker + offset) % spec.speakers;
                (&means[target], OUTLIER_NOISE_MULT)
            } else {
                match (&second_means[speaker], utt % 2) {
                    (Some(second), 1) => (second, 1.0),
                    _ => (&means[speaker], 1.0),
                }
            };
            let row: Vec<f64> = base
                .iter()
                .map(|&m| m + noise_std * mult * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let id = format!("spk{speaker:04}-utt{utt:04}");
            pairs.push((id.clone(), format!("spk{speaker:04}")));
            ids.push(id);
            rows.push(row);
        }
    }
    let mut embeddings = EmbeddingSet::from_rows(ids, rows)?;
    embeddings.normalize()?;
    let truth = LabeledSubset::from_pairs(pairs)?;
    Ok((embeddings, truth))
}

/// Uniform random labeled subset without replacement: `speakers` classes,
/// `per_speaker` utterances each. Deterministic given the seed.
pub fn sample_labeled_subset(
    truth: &LabeledSubset,
    speakers: usize,
    per_speaker: usize,
    seed: u64,
) -> Result<LabeledSubset> {
    if speakers > truth.num_classes() {
        return Err(Error::InsufficientSamples {
            what: "speakers",
            requested: speakers,
            available: truth.num_classes(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX); // distinct from the per-speaker generator streams
    let mut chosen = rand::seq::index::sample(&mut rng, truth.num_classes(), speakers).into_vec();
    chosen.sort_unstable();

    let mut pairs = Vec::with_capacity(speakers * per_speaker);
    for class in chosen {
        let members = truth.class_members(class);
        if members.len() < per_speaker {
            return Err(Error::InsufficientSamples {
                what: "utterances per speaker",
                requested: per_speaker,
                available: members.len(),
            });
        }
        let mut picks = rand::seq::index::sample(&mut rng, members.len(), per_speaker).into_vec();
        picks.sort_unstable();
        for pick in picks {
            pairs.push((members[pick].clone(), truth.class_name(class).to_string()));
        }
    }
    LabeledSubset::from_pairs(pairs)
}
