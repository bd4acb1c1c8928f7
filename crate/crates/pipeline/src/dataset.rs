//! Synthetic dataset packs.
//!
//! A pack is a directory with `manifest.json` and `data.bin`. The manifest
//! records, per sample, the task, its label, the exact recipe and the seed;
//! from those two the sample can be regenerated bit for bit. `data.bin` holds
//! each sample's clean and degraded images as little-endian `f32`, `[3, H, W]`
//! each, clean first.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uwadn_core::degrade::{degrade, synth_clean, DegradationSpec, Image, Task};
use uwadn_core::tensor::Tensor;
use uwadn_core::wab::TrainSample;

use crate::checkpoint::sha256_hex;
use crate::config::TaskEntry;
use crate::error::{IoContext, PipelineError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "data.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn salt(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 0x5eed_e7a1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub task: Task,
    pub label: usize,
    pub spec: DegradationSpec,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub split: Split,
    pub image_size: usize,
    pub count: usize,
    pub per_task: usize,
    pub samples: Vec<SampleRecord>,
    /// Hex SHA-256 of `data.bin`.
    pub sha256: String,
}

/// Pack held in memory; images are `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPack {
    pub manifest: Manifest,
    pub clean: Vec<Tensor<f32>>,
    pub degraded: Vec<Tensor<f32>>,
}

/// Regenerates one sample from its record.
pub fn regenerate(record: &SampleRecord, size: usize) -> Result<(Image, Image)> {
    let clean = synth_clean(record.seed, size, size)?;
    let s = degrade(&clean, &record.spec, record.seed, record.label)?;
    Ok((s.clean.image().clone(), s.degraded))
}

impl DatasetPack {
    /// `per_task` samples of every task, interleaved task by task. Sample
    /// seeds are drawn from a generator seeded by `seed` and the split.
    pub fn synthesize(tasks: &[TaskEntry], per_task: usize, size: usize, seed: u64, split: Split) -> Result<Self> {
        if tasks.is_empty() || per_task == 0 {
            return Err(PipelineError::Dataset("need at least one task and one sample per task".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split.salt());
        let mut samples = Vec::with_capacity(tasks.len() * per_task);
        for _ in 0..per_task {
            for entry in tasks {
                let spec = entry.resolved_spec(size);
                spec.validate()?;
                samples.push(SampleRecord {
                    task: entry.task,
                    label: entry.task.label(),
                    spec,
                    seed: rng.random(),
                });
            }
        }
        let mut clean = Vec::with_capacity(samples.len());
        let mut degraded = Vec::with_capacity(samples.len());
        for record in &samples {
            let (c, d) = regenerate(record, size)?;
            clean.push(c.to_tensor().reshape(&[3, size, size])?);
            degraded.push(d.to_tensor().reshape(&[3, size, size])?);
        }
        let mut pack = Self {
            manifest: Manifest {
                format: 1,
                split,
                image_size: size,
                count: samples.len(),
                per_task,
                samples,
                sha256: String::new(),
            },
            clean,
            degraded,
        };
        pack.manifest.sha256 = sha256_hex(&pack.blob());
        Ok(pack)
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    fn blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (c, d) in self.clean.iter().zip(&self.degraded) {
            for v in c.data().iter().chain(d.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let manifest = dir.join(MANIFEST);
        fs::write(&manifest, serde_json::to_vec_pretty(&self.manifest)?).at(&manifest)?;
        let blob = dir.join(BLOB);
        let mut f = fs::File::create(&blob).at(&blob)?;
        f.write_all(&self.blob()).at(&blob)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path).at(&manifest_path)?)?;
        let blob_path = dir.join(BLOB);
        let blob = fs::read(&blob_path).at(&blob_path)?;
        let actual = sha256_hex(&blob);
        if actual != manifest.sha256 {
            return Err(PipelineError::Checksum {
                expected: manifest.sha256,
                actual,
            });
        }
        let size = manifest.image_size;
        let per_image = 3 * size * size;
        if manifest.samples.len() != manifest.count || blob.len() != manifest.count * 2 * per_image * 4 {
            return Err(PipelineError::Dataset(format!(
                "{} records and {} blob bytes for {} samples of {size}x{size}",
                manifest.samples.len(),
                blob.len(),
                manifest.count
            )));
        }
        let floats: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut clean = Vec::with_capacity(manifest.count);
        let mut degraded = Vec::with_capacity(manifest.count);
        for pair in floats.chunks_exact(2 * per_image) {
            clean.push(Tensor::new(&[3, size, size], pair[..per_image].to_vec())?);
            degraded.push(Tensor::new(&[3, size, size], pair[per_image..].to_vec())?);
        }
        Ok(Self {
            manifest,
            clean,
            degraded,
        })
    }

    /// Training view: images reshaped to `[1, 3, H, W]`.
    pub fn train_samples(&self) -> Result<Vec<TrainSample<f32>>> {
        let s = self.manifest.image_size;
        self.clean
            .iter()
            .zip(&self.degraded)
            .zip(&self.manifest.samples)
            .map(|((c, d), r)| {
                Ok(TrainSample {
                    degraded: d.clone().reshape(&[1, 3, s, s])?,
                    clean: c.clone().reshape(&[1, 3, s, s])?,
                    label: r.label,
                })
            })
            .collect()
    }

    /// Tasks present, in first-appearance order.
    pub fn tasks(&self) -> Vec<Task> {
        let mut out: Vec<Task> = Vec::new();
        for r in &self.manifest.samples {
            if !out.contains(&r.task) {
                out.push(r.task);
            }
        }
        out
    }
}

/// Binary PPM (P6, maxval 255) of a `[3, H, W]` image in `[0, 1]`.
pub fn to_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(PipelineError::Dataset(format!("PPM needs a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[(c * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Writes `{index}_{task}_{clean|degraded}.ppm` for the first `limit`
/// samples; returns the number of files written.
pub fn export_ppm(pack: &DatasetPack, dir: &Path, limit: usize) -> Result<usize> {
    fs::create_dir_all(dir).at(dir)?;
    let mut written = 0;
    for (i, r) in pack.manifest.samples.iter().enumerate().take(limit) {
        for (kind, img) in [("clean", &pack.clean[i]), ("degraded", &pack.degraded[i])] {
            let path = dir.join(format!("{i:05}_{}_{kind}.ppm", r.task.name()));
            fs::write(&path, to_ppm(img)?).at(&path)?;
            written += 1;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_pixels() {
        let img = Tensor::from_fn(&[3, 1, 2], |i| [0.0, 1.0, 0.5, 0.5, 1.0, 0.0][i]);
        let bytes = to_ppm(&img).unwrap();
        let header = b"P6\n2 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        // pixel (0,0) = (0, 0.5, 1), pixel (0,1) = (1, 0.5, 0)
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 255, 128, 0]);
    }

    #[test]
    fn eval_split_uses_other_seeds() {
        let tasks = [TaskEntry {
            task: Task::Rain,
            spec: None,
        }];
        let a = DatasetPack::synthesize(&tasks, 3, 8, 1, Split::Train).unwrap();
        let b = DatasetPack::synthesize(&tasks, 3, 8, 1, Split::Eval).unwrap();
        for (x, y) in a.manifest.samples.iter().zip(&b.manifest.samples) {
            assert_ne!(x.seed, y.seed);
        }
    }
}
