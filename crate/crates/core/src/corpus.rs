//! Deterministic synthetic speech corpus.
//!
//! Each utterance is a sequence of hidden phone segments. A phone is
//! rendered as a band-limited two-tone texture with its own carrier
//! frequency, amplitude, and anchor phase, plus white noise 20 dB
//! down. Renditions of one phone jitter slightly in phase but stay
//! close in waveform space, so first-pass cluster discovery on
//! randomly initialized conv features is nontrivial but solvable.
//! Ground-truth segments are kept for purity checks; transcripts map
//! phone i to letter ('a' + i).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::rng::{stream_rng, Domain};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticCorpusSpec {
    pub n_utterances: usize,
    /// Seconds, inclusive range sampled uniformly.
    pub duration_range: (f64, f64),
    pub n_latent_phones: usize,
    pub sample_rate: u32,
    pub seed: u64,
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.duration_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(CoreError::Config(format!("bad duration range {:?}", self.duration_range)));
        }
        if self.n_latent_phones == 0 || self.n_latent_phones > 26 {
            return Err(CoreError::Config(format!(
                "latent phone count {} outside 1..=26",
                self.n_latent_phones
            )));
        }
        if self.sample_rate == 0 {
            return Err(CoreError::Config("zero sample rate".into()));
        }
        let top = phone_carrier(self.n_latent_phones - 1);
        if 2.0 * top * 2.0 >= self.sample_rate as f64 {
            return Err(CoreError::Config(format!(
                "phone {} harmonic {} Hz exceeds Nyquist at {} Hz",
                self.n_latent_phones - 1,
                2.0 * top,
                self.sample_rate
            )));
        }
        Ok(())
    }
}

/// One phone segment: starting sample and phone id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Segment {
    pub start: usize,
    pub phone: usize,
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub samples: Vec<f64>,
    pub segments: Vec<Segment>,
    pub transcript: String,
}

impl Utterance {
    pub fn phones(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.phone).collect()
    }

    /// Hidden phone at a sample position.
    pub fn phone_at(&self, sample: usize) -> usize {
        let mut phone = self.segments[0].phone;
        for seg in &self.segments {
            if seg.start > sample {
                break;
            }
            phone = seg.phone;
        }
        phone
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: SyntheticCorpusSpec,
    pub utterances: Vec<Utterance>,
}

fn phone_carrier(phone: usize) -> f64 {
    400.0 * (1.0 + 2.0 * phone as f64)
}

fn phone_amplitude(phone: usize) -> f64 {
    0.3 + 0.15 * (phone % 4) as f64
}

/// Fixed per-phone carrier phase; renditions jitter around it.
fn phone_phase_anchor(phone: usize) -> f64 {
    (0.37 + 1.91 * phone as f64) % std::f64::consts::TAU
}

/// Half-width of the uniform phase jitter per segment, radians. Small
/// enough that a phone's renditions stay clusterable from random conv
/// features, large enough that no two renditions are identical.
const PHASE_JITTER: f64 = 0.25;

pub fn transcript_of(phones: &[usize]) -> String {
    phones.iter().map(|&p| (b'a' + p as u8) as char).collect()
}

const SEG_MIN_S: f64 = 0.08;
const SEG_MAX_S: f64 = 0.25;

fn generate_utterance(spec: &SyntheticCorpusSpec, index: usize) -> Utterance {
    let mut rng = stream_rng(spec.seed, Domain::Corpus, index as u64);
    let rate = spec.sample_rate as f64;
    let (lo, hi) = spec.duration_range;
    let duration = lo + (hi - lo) * rng.gen::<f64>();
    let n_samples = (duration * rate).round().max(1.0) as usize;

    // Phone sequence with no immediate repeats; truncate the last
    // segment to land exactly on n_samples.
    let mut segments = Vec::new();
    let mut cursor = 0usize;
    let mut prev: Option<usize> = None;
    while cursor < n_samples {
        let phone = match prev {
            None => rng.gen_range(0..spec.n_latent_phones),
            Some(p) if spec.n_latent_phones > 1 => {
                let r = rng.gen_range(0..spec.n_latent_phones - 1);
                if r >= p {
                    r + 1
                } else {
                    r
                }
            }
            Some(p) => p,
        };
        segments.push(Segment { start: cursor, phone });
        prev = Some(phone);
        let seg_s = SEG_MIN_S + (SEG_MAX_S - SEG_MIN_S) * rng.gen::<f64>();
        cursor += (seg_s * rate).round().max(1.0) as usize;
    }

    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut samples = Vec::with_capacity(n_samples);
    for (si, seg) in segments.iter().enumerate() {
        let end = segments.get(si + 1).map_or(n_samples, |s| s.start).min(n_samples);
        let f = phone_carrier(seg.phone);
        let a = phone_amplitude(seg.phone);
        let phase: f64 =
            phone_phase_anchor(seg.phone) + PHASE_JITTER * (2.0 * rng.gen::<f64>() - 1.0);
        // Two-tone rms, for noise 20 dB below signal.
        let rms = a * (1.25f64 / 2.0).sqrt();
        let noise_std = rms / 10.0;
        for t in seg.start..end {
            let tt = t as f64 / rate;
            let v = a
                * ((std::f64::consts::TAU * f * tt + phase).sin()
                    + 0.5 * (2.0 * std::f64::consts::TAU * f * tt + 1.7 * phase).sin())
                + noise_std * noise.sample(&mut rng);
            // Carriers are f32 on disk; round now so memory equals disk.
            samples.push(v as f32 as f64);
        }
    }
    debug_assert_eq!(samples.len(), n_samples);

    let transcript = transcript_of(&segments.iter().map(|s| s.phone).collect::<Vec<_>>());
    Utterance {
        id: format!("utt{:05}", index),
        samples,
        segments,
        transcript,
    }
}

pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let utterances: Vec<Utterance> = (0..spec.n_utterances)
        .into_par_iter()
        .map(|i| generate_utterance(spec, i))
        .collect();
    Ok(Corpus {
        spec: spec.clone(),
        utterances,
    })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ManifestEntry {
    id: String,
    n_samples: usize,
    duration_s: f64,
    transcript: String,
    segments: Vec<Segment>,
    file: String,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    spec: SyntheticCorpusSpec,
    utterances: Vec<ManifestEntry>,
}

/// Manifest JSON plus one raw little-endian f32 sample file per
/// utterance.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(corpus.utterances.len());
    for utt in &corpus.utterances {
        let file = format!("{}.f32le", utt.id);
        let mut bytes = Vec::with_capacity(utt.samples.len() * 4);
        for &s in &utt.samples {
            bytes.extend_from_slice(&(s as f32).to_le_bytes());
        }
        std::fs::File::create(dir.join(&file))?.write_all(&bytes)?;
        entries.push(ManifestEntry {
            id: utt.id.clone(),
            n_samples: utt.samples.len(),
            duration_s: utt.samples.len() as f64 / corpus.spec.sample_rate as f64,
            transcript: utt.transcript.clone(),
            segments: utt.segments.clone(),
            file,
        });
    }
    let manifest = Manifest {
        spec: corpus.spec.clone(),
        utterances: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    std::fs::File::create(dir.join("manifest.json"))?.write_all(&json)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.json");
    let mut json = String::new();
    std::fs::File::open(&manifest_path)
        .map_err(|_| CoreError::Missing(format!("corpus manifest {}", manifest_path.display())))?
        .read_to_string(&mut json)?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for entry in manifest.utterances {
        let mut bytes = Vec::new();
        std::fs::File::open(dir.join(&entry.file))?.read_to_end(&mut bytes)?;
        if bytes.len() != entry.n_samples * 4 {
            return Err(CoreError::Checkpoint(format!(
                "{}: {} bytes for {} samples",
                entry.file,
                bytes.len(),
                entry.n_samples
            )));
        }
        let samples: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        utterances.push(Utterance {
            id: entry.id,
            samples,
            segments: entry.segments,
            transcript: entry.transcript,
        });
    }
    Ok(Corpus {
        spec: manifest.spec,
        utterances,
    })
}

/// Character classes for finetuning: blank 0, letter i at i+1.
pub fn char_classes(n_latent_phones: usize) -> usize {
    n_latent_phones + 1
}

pub fn transcript_to_labels(transcript: &str) -> Result<Vec<usize>> {
    transcript
        .chars()
        .map(|c| {
            if c.is_ascii_lowercase() {
                Ok(c as usize - 'a' as usize + 1)
            } else {
                Err(CoreError::Config(format!("transcript character {:?} outside a-z", c)))
            }
        })
        .collect()
}

pub fn labels_to_transcript(labels: &[usize]) -> String {
    labels
        .iter()
        .filter(|&&l| l >= 1 && l <= 26)
        .map(|&l| (b'a' + (l - 1) as u8) as char)
        .collect()
}

/// Split utterance indices into train and held-out sets. The holdout
/// takes the LAST `holdout` utterances so train prefixes are stable as
/// corpora grow.
pub fn train_test_split(n: usize, holdout: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if holdout >= n {
        return Err(CoreError::Config(format!("holdout {} swallows all {} utterances", holdout, n)));
    }
    let train: Vec<usize> = (0..n - holdout).collect();
    let test: Vec<usize> = (n - holdout..n).collect();
    Ok((train, test))
}

/// Per-utterance map id -> index, for report writing.
pub fn index_by_id(corpus: &Corpus) -> BTreeMap<String, usize> {
    corpus
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| (u.id.clone(), i))
        .collect()
}
