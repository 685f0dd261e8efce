//! Synthetic bright-disk (malignant) versus dark-disk (benign) images.

use std::path::Path;

use rand::Rng;

use super::{save_image, substream, Manifest, MemorySource, SampleRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `n` images of side `size`, half of them malignant, two images per patient.
/// Each image is a gray noisy background with one disk of random centre and
/// radius, bright for the malignant class and dark for the benign one.
pub fn toy_dataset(n: usize, size: usize, seed: u64) -> Result<(Manifest, MemorySource)> {
    if n < 2 || size < 8 {
        return Err(Error::arg("toy_dataset", format!("need n >= 2 and size >= 8, got n={n} size={size}")));
    }
    let mut records = Vec::with_capacity(n);
    let mut source = MemorySource::default();
    for i in 0..n {
        let target = (i % 2) as u8;
        let mut rng = substream(seed, &[i as u64]);
        let s = size as f64;
        let r = rng.random_range(0.15 * s..0.3 * s);
        let cy = rng.random_range(r..s - r);
        let cx = rng.random_range(r..s - r);
        let level = if target == 1 { rng.random_range(0.8..0.95) } else { rng.random_range(0.05..0.2) };
        let tint: [f64; 3] = [rng.random_range(0.9..1.0), rng.random_range(0.85..1.0), rng.random_range(0.85..1.0)];
        let mut data = vec![0.0; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                let inside = d2 <= r * r;
                for c in 0..3 {
                    let base = if inside { level * tint[c] } else { 0.5 };
                    let v: f64 = base + rng.random_range(-0.05..0.05);
                    data[(c * size + y) * size + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        let name = format!("toy_{i:04}");
        source.images.insert(name.clone(), Tensor::new(&[3, size, size], data)?);
        records.push(SampleRecord {
            image_name: name,
            patient_id: format!("toy_patient_{:04}", i / 2),
            sex: None,
            age_approx: None,
            anatom_site: None,
            diagnosis: None,
            benign_malignant: Some(if target == 1 { "malignant" } else { "benign" }.into()),
            target,
        });
    }
    Ok((Manifest::new(records)?, source))
}

/// Writes the toy set as `dir/images/<name>.png` plus `dir/train.csv`.
pub fn write_toy_dataset(dir: &Path, n: usize, size: usize, seed: u64) -> Result<Manifest> {
    let (manifest, source) = toy_dataset(n, size, seed)?;
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for r in manifest.records() {
        save_image(&images.join(format!("{}.png", r.image_name)), &source.images[&r.image_name])?;
    }
    manifest.write_csv(&dir.join("train.csv"))?;
    Ok(manifest)
}
