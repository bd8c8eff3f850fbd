//! Synthetic multimodal cohort generation, the PLCO2012 clinical transform,
//! text-report templating with a deterministic toy embedder, and dataset I/O.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{Modality, RAW_DIMS};
use crate::models::FeatureProvider;
use crate::rng::{substream, substream_indexed};

/// Published PLCO2012 smoking-intensity centering constant.
const INTENSITY_OFFSET: f64 = 0.4021541613;

/// Raw per-patient features for the three modalities plus the binary label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub label: u8,
    pub f_a: Vec<f64>,
    pub f_b: Vec<f64>,
    pub f_c: Vec<f64>,
}

impl PatientRecord {
    fn validate(&self, line: usize) -> Result<()> {
        for (name, field, want) in [
            ("f_a", &self.f_a, RAW_DIMS[0]),
            ("f_b", &self.f_b, RAW_DIMS[1]),
            ("f_c", &self.f_c, RAW_DIMS[2]),
        ] {
            if field.len() != want {
                return Err(Error::Dataset {
                    line,
                    msg: format!("field {name} has length {}, expected {want}", field.len()),
                });
            }
        }
        if self.label > 1 {
            return Err(Error::Dataset {
                line,
                msg: format!("label {} is not binary", self.label),
            });
        }
        Ok(())
    }
}

impl FeatureProvider for PatientRecord {
    fn raw(&self, m: Modality) -> &[f64] {
        match m {
            Modality::A => &self.f_a,
            Modality::B => &self.f_b,
            Modality::C => &self.f_c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Race {
    Missing,
    White,
    Black,
    Hispanic,
    Asian,
    PacificIslander,
    NativeAmerican,
}

impl Race {
    /// Slot in the 7-way one-hot encoding (White → position 2 of 7,
    /// Asian → position 5 of 7).
    pub fn one_hot_index(self) -> usize {
        match self {
            Race::Missing => 0,
            Race::White => 1,
            Race::Black => 2,
            Race::Hispanic => 3,
            Race::Asian => 4,
            Race::PacificIslander => 5,
            Race::NativeAmerican => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmokingStatus {
    Current,
    Former,
}

/// Raw clinical risk factors before the PLCO2012 normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClinicalRaw {
    pub age: f64,
    pub race: Race,
    pub education: f64,
    pub bmi: f64,
    pub copd: bool,
    pub phist: bool,
    pub fhist: bool,
    pub smoking_status: SmokingStatus,
    pub intensity: f64,
    pub duration: f64,
    pub quit_time: f64,
}

/// PLCO2012 normalization into the ordered 17-dim clinical feature vector:
/// age−62; race one-hot (7); education−4; bmi−27; copd; phist; fhist;
/// status (current 0, former −1); 10/intensity − 0.4021541613; duration−27;
/// quit_time−10.
pub fn plco_transform(raw: &ClinicalRaw) -> Result<Vec<f64>> {
    if raw.age <= 0.0 || raw.bmi <= 0.0 || raw.duration < 0.0 || raw.quit_time < 0.0 {
        return Err(Error::Config("clinical values out of range".into()));
    }
    if raw.intensity <= 0.0 {
        return Err(Error::Config(
            "smoking intensity must be positive (reciprocal transform)".into(),
        ));
    }
    let mut out = Vec::with_capacity(17);
    out.push(raw.age - 62.0);
    let mut race = [0.0; 7];
    race[raw.race.one_hot_index()] = 1.0;
    out.extend_from_slice(&race);
    out.push(raw.education - 4.0);
    out.push(raw.bmi - 27.0);
    out.push(raw.copd as u8 as f64);
    out.push(raw.phist as u8 as f64);
    out.push(raw.fhist as u8 as f64);
    out.push(match raw.smoking_status {
        SmokingStatus::Current => 0.0,
        SmokingStatus::Former => -1.0,
    });
    out.push(10.0 / raw.intensity - INTENSITY_OFFSET);
    out.push(raw.duration - 27.0);
    out.push(raw.quit_time - 10.0);
    debug_assert_eq!(out.len(), 17);
    Ok(out)
}

/// The 13 binary report variables, in documented order: 6 occupational
/// exposures, 5 medical diagnoses, 2 environmental smoke exposures.
pub const REPORT_FLAG_NAMES: [&str; 13] = [
    "asbestos",
    "chemicals",
    "coal dust",
    "agricultural dusts",
    "firefighting smoke",
    "welding fumes",
    "diabetes",
    "heart disease",
    "hypertension",
    "pneumonia",
    "stroke",
    "secondhand smoke at home",
    "secondhand smoke at workplace",
];

fn join_list(items: &[&str]) -> String {
    match items.len() {
        0 => String::new(),
        1 => items[0].to_string(),
        2 => format!("{} and {}", items[0], items[1]),
        _ => {
            let head = items[..items.len() - 1].join(", ");
            format!("{}, and {}", head, items[items.len() - 1])
        }
    }
}

/// Deterministic three-sentence report from the 13 binary variables.
pub fn generate_text_report(flags: &[bool; 13]) -> String {
    let occupational: Vec<&str> = REPORT_FLAG_NAMES[..6]
        .iter()
        .zip(flags[..6].iter())
        .filter(|(_, &f)| f)
        .map(|(n, _)| *n)
        .collect();
    let medical: Vec<&str> = REPORT_FLAG_NAMES[6..11]
        .iter()
        .zip(flags[6..11].iter())
        .filter(|(_, &f)| f)
        .map(|(n, _)| *n)
        .collect();
    let smoke: Vec<&str> = REPORT_FLAG_NAMES[11..]
        .iter()
        .zip(flags[11..].iter())
        .filter(|(_, &f)| f)
        .map(|(n, _)| *n)
        .collect();

    let s1 = if occupational.is_empty() {
        "The patient reports no significant occupational exposures.".to_string()
    } else {
        format!(
            "The patient has occupational exposure to {}.",
            join_list(&occupational)
        )
    };
    let s2 = if medical.is_empty() {
        "No significant chronic medical conditions reported.".to_string()
    } else {
        format!("Medical history is significant for {}.", join_list(&medical))
    };
    let s3 = if smoke.is_empty() {
        "The patient reports no secondhand smoke exposure.".to_string()
    } else {
        format!("The patient is exposed to {}.", join_list(&smoke))
    };
    format!("{s1} {s2} {s3}")
}

/// Deterministic feature-hashed bag-of-words embedding: each token hashes to
/// a bucket in [0, 768) with a ±1 sign hash, accumulated, then L2-normalized.
/// An empty report yields the zero vector.
pub fn embed_text_toy(report: &str) -> Vec<f64> {
    let dim = RAW_DIMS[2];
    let mut out = vec![0.0; dim];
    for token in report
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let token = token.to_ascii_lowercase();
        let mut h: u64 = 0xcbf29ce484222325;
        for b in token.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        let bucket = (h % dim as u64) as usize;
        let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        out[bucket] += sign;
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

/// Controls for the synthetic cohort generator. Signal strength σ = 0 makes
/// a modality pure noise; larger σ makes its linear probe AUC higher.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    pub prevalence: f64,
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub sigma_c: f64,
    pub rho: f64,
    /// Slope of the label link: label ~ Bernoulli(sigmoid(steepness·z + c)).
    /// Larger values make the label more deterministic given the latent risk,
    /// raising the ceiling AUC of informative modalities.
    pub steepness: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_patients: 1000,
            prevalence: 0.064,
            sigma_a: 1.5,
            sigma_b: 0.8,
            sigma_c: 0.0,
            rho: 0.0,
            steepness: 3.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.prevalence) || self.prevalence == 0.0 {
            return Err(Error::Config(format!(
                "prevalence {} outside (0,1)",
                self.prevalence
            )));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0,1)", self.rho)));
        }
        if self.sigma_a < 0.0 || self.sigma_b < 0.0 || self.sigma_c < 0.0 {
            return Err(Error::Config("signal strengths must be >= 0".into()));
        }
        if self.steepness <= 0.0 {
            return Err(Error::Config("label link steepness must be > 0".into()));
        }
        Ok(())
    }
}

/// Side information emitted with each synthetic record: the clinical raw
/// fields behind modality B and the 13 report flags behind modality C.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordMeta {
    pub id: String,
    pub clinical: ClinicalRaw,
    pub flags: [bool; 13],
}

/// Offset c such that E_{z~N(0,1)}[sigmoid(s·z + c)] == prevalence, solved
/// by bisection over quadrature on a fixed grid.
fn calibrate_offset(prevalence: f64, steepness: f64) -> f64 {
    let grid: Vec<(f64, f64)> = (0..4001)
        .map(|i| {
            let z = -8.0 + i as f64 * (16.0 / 4000.0);
            let w = (-0.5 * z * z).exp();
            (z, w)
        })
        .collect();
    let wsum: f64 = grid.iter().map(|(_, w)| w).sum();
    let mean_at = |c: f64| -> f64 {
        grid.iter()
            .map(|(z, w)| w / (1.0 + (-(steepness * z + c)).exp()))
            .sum::<f64>()
            / wsum
    };
    let (mut lo, mut hi) = (-20.0, 20.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < prevalence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_direction(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn synth_clinical(rng: &mut impl Rng, z: f64) -> ClinicalRaw {
    let races = [
        Race::White,
        Race::Black,
        Race::Hispanic,
        Race::Asian,
        Race::PacificIslander,
        Race::NativeAmerican,
    ];
    let former = rng.gen_bool(0.5);
    ClinicalRaw {
        age: (62.0 + 4.0 * z + 5.0 * normal(rng)).clamp(45.0, 90.0),
        race: races[rng.gen_range(0..races.len())],
        education: rng.gen_range(1..=6) as f64,
        bmi: (27.0 + 3.0 * normal(rng)).clamp(16.0, 55.0),
        copd: rng.gen_bool(0.15),
        phist: rng.gen_bool(0.05),
        fhist: rng.gen_bool(0.1),
        smoking_status: if former {
            SmokingStatus::Former
        } else {
            SmokingStatus::Current
        },
        intensity: (20.0 + 6.0 * z + 8.0 * normal(rng)).clamp(1.0, 80.0),
        duration: (27.0 + 6.0 * z + 8.0 * normal(rng)).clamp(0.0, 70.0),
        quit_time: if former {
            (10.0 + 6.0 * normal(rng)).clamp(0.0, 40.0)
        } else {
            0.0
        },
    }
}

/// Generate a synthetic cohort. Each patient draws a latent risk z; the label
/// is Bernoulli(sigmoid(z + c)) with c calibrated to the target prevalence.
/// Each modality embeds z into a fixed random unit direction scaled by its σ,
/// plus unit Gaussian noise with cross-modality correlation ρ. The scale is
/// calibrated so σ² is the modality's effective signal-to-noise after the
/// encoder's random projection, keeping σ comparable across widths.
pub fn generate_cohort(config: &SyntheticConfig) -> Result<(Vec<PatientRecord>, Vec<RecordMeta>)> {
    config.validate()?;
    let offset = calibrate_offset(config.prevalence, config.steepness);
    let mut dir_rng = substream(config.seed, "directions");
    let dirs: [Vec<f64>; 3] = [
        unit_direction(&mut dir_rng, RAW_DIMS[0]),
        unit_direction(&mut dir_rng, RAW_DIMS[1]),
        unit_direction(&mut dir_rng, RAW_DIMS[2]),
    ];
    let sigmas = [config.sigma_a, config.sigma_b, config.sigma_c];
    // A random projection to the encoder width keeps roughly hidden/dim of
    // the signal energy of a wide modality. Compensate so that σ² tracks the
    // effective signal-to-noise of every modality after encoding, regardless
    // of its raw width; the 1.2 factor absorbs the remaining average loss of
    // the encoder stack so σ stays a meaningful informativeness knob.
    let gains: [f64; 3] = RAW_DIMS
        .map(|dim| (1.2 * dim as f64 / (dim.min(crate::models::ENCODER_HIDDEN)) as f64).sqrt());
    let max_dim = *RAW_DIMS.iter().max().unwrap();

    let mut records = Vec::with_capacity(config.n_patients);
    let mut metas = Vec::with_capacity(config.n_patients);
    for i in 0..config.n_patients {
        let mut rng = substream_indexed(config.seed, "record", i as u64);
        let z: f64 = normal(&mut rng);
        let p = 1.0 / (1.0 + (-(config.steepness * z + offset)).exp());
        let label = rng.gen_bool(p) as u8;
        let shared: Vec<f64> = (0..max_dim).map(|_| normal(&mut rng)).collect();
        let mut feats: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (mi, f) in feats.iter_mut().enumerate() {
            let dim = RAW_DIMS[mi];
            *f = (0..dim)
                .map(|j| {
                    let own: f64 = normal(&mut rng);
                    let noise = config.rho.sqrt() * shared[j] + (1.0 - config.rho).sqrt() * own;
                    sigmas[mi] * z * dirs[mi][j] * gains[mi] + noise
                })
                .collect();
        }
        let id = format!("p{i:06}");
        let clinical = synth_clinical(&mut rng, z);
        let mut flags = [false; 13];
        let flag_signal = if config.sigma_c > 0.0 { z } else { 0.0 };
        for f in flags.iter_mut() {
            let pf = 1.0 / (1.0 + (-(flag_signal - 1.5)).exp());
            *f = rng.gen_bool(pf);
        }
        let [f_a, f_b, f_c] = feats;
        records.push(PatientRecord {
            id: id.clone(),
            label,
            f_a,
            f_b,
            f_c,
        });
        metas.push(RecordMeta {
            id,
            clinical,
            flags,
        });
    }
    Ok((records, metas))
}

/// Write the cohort as line-delimited JSON (one object per line, UTF-8).
/// 64-bit values round-trip bit-exactly through the shortest-decimal float
/// encoding.
pub fn write_dataset(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Dataset { line: 0, msg: e.to_string() })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<PatientRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PatientRecord = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: i + 1,
            msg: e.to_string(),
        })?;
        record.validate(i + 1)?;
        records.push(record);
    }
    Ok(records)
}

/// Deterministic train/test split by (seed, ratio): shuffles indices with a
/// named sub-stream and takes the first `ratio` fraction as train.
pub fn split_dataset(
    records: &[PatientRecord],
    ratio: f64,
    seed: u64,
) -> (Vec<PatientRecord>, Vec<PatientRecord>) {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    let mut rng = substream(seed, "split");
    // Fisher-Yates
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_train = (records.len() as f64 * ratio).round() as usize;
    let train = idx[..n_train].iter().map(|&i| records[i].clone()).collect();
    let test = idx[n_train..].iter().map(|&i| records[i].clone()).collect();
    (train, test)
}
