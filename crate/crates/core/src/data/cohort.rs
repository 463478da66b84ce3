//! Synthetic imbalanced cohorts.
//!
//! Every subject contributes one video. MCI videos carry a bright patch whose
//! intensity oscillates with a fixed period (the class signature) in all but
//! a fraction `rho` of their clips; every other pixel is a flat grey level
//! plus noise. Video lengths vary per subject, which gives the intra-class
//! length imbalance; class sizes give the inter-class one.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::clipfile::{read_tensor, write_tensor};
use super::preprocess::segment_video;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "NC")]
    Nc = 0,
    #[serde(rename = "MCI")]
    Mci = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Nc),
            1 => Ok(Label::Mci),
            _ => Err(Error::LabelOutOfRange {
                label: i,
                classes: 2,
            }),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Nc => "NC",
            Label::Mci => "MCI",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NC" | "0" => Ok(Label::Nc),
            "MCI" | "1" => Ok(Label::Mci),
            other => Err(Error::InvalidArgument(format!("unknown label {other:?}"))),
        }
    }
}

/// Fixed-length frame stack `[L, H, W, C]` from one subject's video.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Tensor<f32>,
    pub subject_id: String,
    pub label: Label,
    pub clip_index: usize,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_mci: usize,
    pub n_nc: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub clip_len: usize,
    pub hw: usize,
    pub channels: usize,
    /// Fraction of each MCI subject's clips generated without the signature.
    pub rho: f64,
    pub signature_strength: f64,
    /// Oscillation period of the signature, in frames.
    pub signature_period: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_mci: 20,
            n_nc: 12,
            frames_min: 48,
            frames_max: 96,
            clip_len: 16,
            hw: 64,
            channels: 3,
            rho: 0.0,
            signature_strength: 0.4,
            signature_period: 4.0,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.n_mci == 0 || self.n_nc == 0 {
            return fail("each class needs at least one subject".into());
        }
        if !(0.0..1.0).contains(&self.rho) {
            return fail(format!("rho must be in [0, 1), got {}", self.rho));
        }
        if self.clip_len == 0 || self.frames_min < self.clip_len || self.frames_max < self.frames_min {
            return fail(format!(
                "frame range [{}, {}] must be ordered and hold at least one clip of {}",
                self.frames_min, self.frames_max, self.clip_len
            ));
        }
        if self.hw == 0 || self.channels == 0 {
            return fail("frame size and channels must be positive".into());
        }
        if self.noise < 0.0 || self.signature_strength < 0.0 || self.signature_period <= 0.0 {
            return fail("noise, strength and period must be non-negative (period positive)".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectInfo {
    pub id: String,
    pub label: Label,
    pub n_frames: usize,
    pub n_clips: usize,
    /// Clip indices generated without the class signature.
    pub signature_free: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub subjects: Vec<SubjectInfo>,
    pub clips: Vec<Clip>,
}

impl Cohort {
    pub fn from_clips(clips: Vec<Clip>) -> Self {
        let mut by_id: BTreeMap<String, SubjectInfo> = BTreeMap::new();
        for c in &clips {
            let e = by_id.entry(c.subject_id.clone()).or_insert_with(|| SubjectInfo {
                id: c.subject_id.clone(),
                label: c.label,
                n_frames: 0,
                n_clips: 0,
                signature_free: Vec::new(),
            });
            e.n_clips += 1;
            e.n_frames += c.len();
        }
        Cohort {
            subjects: by_id.into_values().collect(),
            clips,
        }
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let mci = self.subjects.iter().filter(|s| s.label == Label::Mci).count();
        (mci, self.subjects.len() - mci)
    }

    /// Index of each subject id in `subjects`.
    pub fn subject_index(&self) -> BTreeMap<&str, usize> {
        self.subjects
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect()
    }
}

pub fn generate_synthetic_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let labels: Vec<Label> = std::iter::repeat_n(Label::Mci, spec.n_mci)
        .chain(std::iter::repeat_n(Label::Nc, spec.n_nc))
        .collect();
    let per_subject: Vec<(SubjectInfo, Vec<Clip>)> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| generate_subject(spec, i, label))
        .collect::<Result<_>>()?;
    let mut subjects = Vec::with_capacity(per_subject.len());
    let mut clips = Vec::new();
    for (info, c) in per_subject {
        subjects.push(info);
        clips.extend(c);
    }
    Ok(Cohort { subjects, clips })
}

fn generate_subject(spec: &CohortSpec, index: usize, label: Label) -> Result<(SubjectInfo, Vec<Clip>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);

    let (l, hw, ch) = (spec.clip_len, spec.hw, spec.channels);
    let n_frames = rng.random_range(spec.frames_min..=spec.frames_max);
    let n_clips = n_frames / l;
    let mut signature_free = Vec::new();
    if label == Label::Mci {
        let n_free = (spec.rho * n_clips as f64).round() as usize;
        let mut order: Vec<usize> = (0..n_clips).collect();
        order.shuffle(&mut rng);
        signature_free = order[..n_free].to_vec();
        signature_free.sort_unstable();
    }

    let frame_len = hw * hw * ch;
    let mut video = vec![0f32; n_frames * frame_len];
    for px in video.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *px = (BACKGROUND + spec.noise * z) as f32;
    }

    if label == Label::Mci {
        let patch = (hw / 4).max(1);
        for clip in 0..n_clips {
            if signature_free.binary_search(&clip).is_ok() {
                continue;
            }
            let py = rng.random_range(0..=hw - patch);
            let px = rng.random_range(0..=hw - patch);
            let phase = rng.random_range(0.0..TAU);
            for k in 0..l {
                let amp = spec.signature_strength
                    * (0.5 + 0.5 * (TAU * k as f64 / spec.signature_period + phase).sin());
                let frame = &mut video[(clip * l + k) * frame_len..(clip * l + k + 1) * frame_len];
                for y in py..py + patch {
                    for x in px..px + patch {
                        for c in 0..ch {
                            frame[(y * hw + x) * ch + c] += amp as f32;
                        }
                    }
                }
            }
        }
    }
    for v in &mut video {
        *v = v.clamp(0.0, 1.0);
    }

    let video = Tensor::from_vec(&[n_frames, hw, hw, ch], video)?;
    let id = format!("S{index:03}");
    let clips = segment_video(&video, l)?
        .into_iter()
        .enumerate()
        .map(|(clip_index, frames)| Clip {
            frames,
            subject_id: id.clone(),
            label,
            clip_index,
        })
        .collect();
    let info = SubjectInfo {
        id,
        label,
        n_frames,
        n_clips,
        signature_free,
    };
    Ok((info, clips))
}

/// Mean intensity of every signature-free pixel.
pub const BACKGROUND: f64 = 0.5;

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    subject_id: String,
    clip_path: String,
    label: Label,
    clip_index: usize,
}

/// Writes one tensor file per clip under `dir/clips/` plus `dir/manifest.csv`.
pub fn write_cohort(dir: &Path, cohort: &Cohort) -> Result<PathBuf> {
    let clip_dir = dir.join("clips");
    fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    cohort
        .clips
        .par_iter()
        .map(|c| write_tensor(&dir.join(clip_rel_path(c)), &c.frames))
        .collect::<Result<Vec<_>>>()?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&manifest)?;
    for c in &cohort.clips {
        w.serialize(ManifestRow {
            subject_id: c.subject_id.clone(),
            clip_path: clip_rel_path(c),
            label: c.label,
            clip_index: c.clip_index,
        })?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

fn clip_rel_path(c: &Clip) -> String {
    format!("clips/{}_{:04}.mcvv", c.subject_id, c.clip_index)
}

/// Loads every clip listed in a manifest. Relative clip paths resolve
/// against the manifest's directory.
pub fn load_manifest(manifest: &Path) -> Result<Vec<Clip>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut r = csv::Reader::from_path(manifest)?;
    let rows = r
        .deserialize::<ManifestRow>()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    rows.into_par_iter()
        .map(|row| {
            let path = base.join(&row.clip_path);
            let frames = read_tensor(&path)?;
            if frames.rank() != 4 {
                return Err(Error::ClipFormat {
                    path,
                    reason: format!("expected [L, H, W, C], got {:?}", frames.shape()),
                });
            }
            Ok(Clip {
                frames,
                subject_id: row.subject_id,
                label: row.label,
                clip_index: row.clip_index,
            })
        })
        .collect()
}

/// Loads a cohort from a dataset directory or a manifest path.
pub fn load_cohort(path: &Path) -> Result<Cohort> {
    let manifest = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    Ok(Cohort::from_clips(load_manifest(&manifest)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CohortSpec {
        CohortSpec {
            n_mci: 3,
            n_nc: 2,
            frames_min: 16,
            frames_max: 40,
            clip_len: 8,
            hw: 8,
            ..Default::default()
        }
    }

    #[test]
    fn class_counts_follow_spec() {
        let spec = CohortSpec {
            n_mci: 20,
            n_nc: 12,
            hw: 4,
            frames_min: 16,
            frames_max: 32,
            ..Default::default()
        };
        let c = generate_synthetic_cohort(&spec).unwrap();
        assert_eq!(c.class_counts(), (20, 12));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_cohort(&small()).unwrap();
        let b = generate_synthetic_cohort(&small()).unwrap();
        assert_eq!(a.clips, b.clips);
        let other = generate_synthetic_cohort(&CohortSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.clips, other.clips);
    }

    #[test]
    fn pixels_in_unit_interval() {
        let c = generate_synthetic_cohort(&small()).unwrap();
        for clip in &c.clips {
            assert!(clip.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(clip.frames.shape(), &[8, 8, 8, 3]);
        }
    }

    #[test]
    fn clip_counts_match_frame_counts() {
        let c = generate_synthetic_cohort(&small()).unwrap();
        for s in &c.subjects {
            let n = c.clips.iter().filter(|k| k.subject_id == s.id).count();
            assert_eq!(n, s.n_frames / 8);
            assert_eq!(n, s.n_clips);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_synthetic_cohort(&CohortSpec { rho: 1.0, ..small() }).is_err());
        assert!(generate_synthetic_cohort(&CohortSpec { n_nc: 0, ..small() }).is_err());
        assert!(generate_synthetic_cohort(&CohortSpec { frames_min: 4, ..small() }).is_err());
    }

    #[test]
    fn noise_free_classes_separate_by_temporal_power() {
        let spec = CohortSpec {
            noise: 0.0,
            rho: 0.0,
            n_mci: 3,
            n_nc: 3,
            ..small()
        };
        let c = generate_synthetic_cohort(&spec).unwrap();
        // Power at the signature frequency summed over pixels: a linear
        // feature of the (pixel, cos/sin) projections.
        let power = |clip: &Clip| {
            let (l, rest) = (clip.len(), clip.frames.numel() / clip.len());
            let mut total = 0.0;
            for p in 0..rest {
                let (mut re, mut im) = (0.0, 0.0);
                for k in 0..l {
                    let v = clip.frames.data()[k * rest + p] as f64;
                    let a = TAU * k as f64 / spec.signature_period;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                total += re * re + im * im;
            }
            total
        };
        let max_nc = c
            .clips
            .iter()
            .filter(|k| k.label == Label::Nc)
            .map(power)
            .fold(0.0, f64::max);
        let min_mci = c
            .clips
            .iter()
            .filter(|k| k.label == Label::Mci)
            .map(power)
            .fold(f64::INFINITY, f64::min);
        assert!(min_mci > max_nc + 1.0, "{min_mci} vs {max_nc}");
    }
}
