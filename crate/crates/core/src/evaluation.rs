//! AUROC with tie handling, the seeded public/private partition, and
//! scoring a network over a manifest.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Network;
use crate::datapipe::{resize_bilinear, ImageSource, Manifest};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

/// Area under the ROC curve by the rank-sum formula, with tied scores
/// sharing their average rank:
/// `(R⁺ − n⁺(n⁺+1)/2) / (n⁺·n⁻)`.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::arg(
            "auroc",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::arg("auroc", format!("score {s} is not comparable")));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(format!(
            "AUROC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Seeded uniform partition of `0..n` into a public part of
/// `round(public_frac · n)` indices and the private rest, both sorted.
pub fn public_private_split(n: usize, public_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(public_frac > 0.0 && public_frac < 1.0) {
        return Err(Error::config("public_frac", format!("{public_frac} is outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = (public_frac * n as f64).round() as usize;
    let mut public = idx[..k].to_vec();
    let mut private = idx[k..].to_vec();
    public.sort_unstable();
    private.sort_unstable();
    Ok((public, private))
}

/// Parallel image names, probabilities and labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredSet {
    pub image_names: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn auroc(&self) -> Result<f64> {
        auroc(&self.scores, &self.labels)
    }

    fn auroc_of(&self, idx: &[usize]) -> Option<f64> {
        let s: Vec<f64> = idx.iter().map(|&i| self.scores[i]).collect();
        let l: Vec<u8> = idx.iter().map(|&i| self.labels[i]).collect();
        auroc(&s, &l).ok()
    }

    /// Scores the full set and its seeded 30/70 public/private halves. A part
    /// holding a single class gets `None`.
    pub fn report(&self, seed: u64) -> Result<EvalReport> {
        let (public, private) = public_private_split(self.len(), PUBLIC_FRACTION, seed)?;
        let n_pos = self.labels.iter().filter(|&&l| l == 1).count();
        Ok(EvalReport {
            auroc_full: self.auroc().ok(),
            auroc_public: self.auroc_of(&public),
            auroc_private: self.auroc_of(&private),
            n_pos,
            n_neg: self.len() - n_pos,
            n_public: public.len(),
            n_private: private.len(),
            seed,
        })
    }

    /// `image_name,score,label`, scores printed in shortest round-trip form.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["image_name", "score", "label"])?;
        for i in 0..self.len() {
            w.write_record([self.image_names[i].clone(), self.scores[i].to_string(), self.labels[i].to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut out = ScoredSet::default();
        for row in csv::Reader::from_path(path)?.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            let bad = |reason: &str| Error::ManifestRow {
                row: line,
                reason: reason.to_string(),
            };
            out.image_names.push(row.get(0).ok_or_else(|| bad("missing image_name"))?.to_string());
            out.scores
                .push(row.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad score"))?);
            out.labels
                .push(row.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad label"))?);
        }
        Ok(out)
    }
}

pub const PUBLIC_FRACTION: f64 = 0.30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc_full: Option<f64>,
    pub auroc_public: Option<f64>,
    pub auroc_private: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_public: usize,
    pub n_private: usize,
    pub seed: u64,
}

/// Loads and resizes a batch of images to `[N, 3, size, size]`.
pub fn load_batch(source: &dyn ImageSource, names: &[&str], size: usize) -> Result<Tensor> {
    let images: Vec<Tensor> = names
        .par_iter()
        .map(|n| {
            let img = source.load(n)?;
            if img.shape()[1..] == [size, size] {
                Ok(img)
            } else {
                resize_bilinear(&img, size, size)
            }
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&images)
}

/// Sigmoid scores of `net` in inference mode for every record, in manifest
/// order. Fails before any compute if an image cannot be found.
pub fn score_manifest(net: &Network, manifest: &Manifest, source: &dyn ImageSource, size: usize, batch: usize) -> Result<ScoredSet> {
    let names: Vec<&str> = manifest.records().iter().map(|r| r.image_name.as_str()).collect();
    let missing = source.missing(&names);
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(20).copied().collect();
        return Err(Error::Data(format!(
            "{} image(s) missing: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > shown.len() { ", ..." } else { "" }
        )));
    }
    let mut scores = Vec::with_capacity(names.len());
    for chunk in names.chunks(batch.max(1)) {
        let x = load_batch(source, chunk, size)?;
        scores.extend(net.predict(&x)?.into_iter().map(sigmoid));
    }
    Ok(ScoredSet {
        image_names: names.iter().map(|s| s.to_string()).collect(),
        scores,
        labels: manifest.labels(),
    })
}

/// Scores a manifest and summarises it with the public/private protocol.
pub fn evaluate(
    net: &Network,
    manifest: &Manifest,
    source: &dyn ImageSource,
    size: usize,
    seed: u64,
) -> Result<(EvalReport, ScoredSet)> {
    let scored = score_manifest(net, manifest, source, size, 16)?;
    let report = scored.report(seed)?;
    Ok((report, scored))
}
