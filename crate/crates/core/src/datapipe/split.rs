use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::Manifest;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideCounts {
    pub patients: usize,
    pub images: usize,
    pub benign: usize,
    pub malignant: usize,
}

impl SideCounts {
    pub fn of(m: &Manifest) -> Self {
        SideCounts {
            patients: m.patients().len(),
            images: m.len(),
            benign: m.benign_count(),
            malignant: m.malignant_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub seed: u64,
    pub val_frac: f64,
    pub train: SideCounts,
    pub val: SideCounts,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Manifest,
    pub val: Manifest,
    pub summary: SplitSummary,
}

impl Split {
    /// Writes `train.csv`, `val.csv` and `split_summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.write_csv(&dir.join("train.csv"))?;
        self.val.write_csv(&dir.join("val.csv"))?;
        let path = dir.join("split_summary.json");
        let json = serde_json::to_string_pretty(&self.summary)? + "\n";
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

struct Patient {
    indices: Vec<usize>,
    malignant: usize,
}

/// Assigns whole patients to train or validation.
///
/// Patients are visited in a seeded random order, those with a malignant
/// image first. A patient goes to validation only if that strictly reduces
/// the distance to the target: the malignant count for the first group,
/// the image count for the rest. Both sides always end up non-empty.
pub fn patient_split(m: &Manifest, val_frac: f64, seed: u64) -> Result<Split> {
    if !(val_frac > 0.0 && val_frac < 1.0) {
        return Err(Error::config("val_frac", format!("{val_frac} is outside (0, 1)")));
    }
    if m.patients().len() < 2 {
        return Err(Error::Data(format!(
            "cannot split {} patient(s) into two disjoint sets",
            m.patients().len()
        )));
    }
    let mut patients: Vec<Patient> = m
        .patients()
        .values()
        .map(|idx| Patient {
            indices: idx.clone(),
            malignant: idx.iter().filter(|&&i| m.records()[i].target == 1).count(),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    patients.sort_by_key(|p| p.malignant == 0);

    let image_target = val_frac * m.len() as f64;
    let malignant_target = val_frac * m.malignant_count() as f64;
    let mut to_val = vec![false; patients.len()];
    let (mut images, mut malignant) = (0usize, 0usize);
    for (i, p) in patients.iter().enumerate() {
        let closer = if p.malignant > 0 {
            ((malignant + p.malignant) as f64 - malignant_target).abs() < (malignant as f64 - malignant_target).abs()
        } else {
            ((images + p.indices.len()) as f64 - image_target).abs() < (images as f64 - image_target).abs()
        };
        if closer {
            to_val[i] = true;
            images += p.indices.len();
            malignant += p.malignant;
        }
    }
    if !to_val.iter().any(|&v| v) {
        let smallest = (0..patients.len()).min_by_key(|&i| patients[i].indices.len()).unwrap_or(0);
        to_val[smallest] = true;
    }
    if to_val.iter().all(|&v| v) {
        let smallest = (0..patients.len()).min_by_key(|&i| patients[i].indices.len()).unwrap_or(0);
        to_val[smallest] = false;
    }

    let collect = |side: bool| {
        let mut idx: Vec<usize> = patients
            .iter()
            .zip(&to_val)
            .filter(|(_, &v)| v == side)
            .flat_map(|(p, _)| p.indices.iter().copied())
            .collect();
        idx.sort_unstable();
        m.subset(&idx)
    };
    let train = collect(false);
    let val = collect(true);
    let summary = SplitSummary {
        seed,
        val_frac,
        train: SideCounts::of(&train),
        val: SideCounts::of(&val),
    };
    Ok(Split { train, val, summary })
}
