//! Synthetic multimodal datasets with a controllable cross-modal signal,
//! missing-modality injection, and the MMQF container format.
//!
//! The generator places a `cross_modal_weight` fraction of each class's
//! discriminative signal in the correlation between modalities (a shared
//! latent factor with class-dependent sign pattern) and the rest in
//! per-modality class means. At weight 0 every modality alone is
//! statistically sufficient; at weight 1 the per-modality marginals carry
//! no first-order class information and only joint models can separate the
//! sign groups.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ContextVector, ModalitySpec};
use crate::seeds::derive_seed;

/// One labeled multimodal observation. Feature vectors keep their full
/// length even for missing modalities (the garbage exercises the
/// missing-modality-off failure path; the masked path never reads it).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<Vec<f64>>,
    pub ctx: ContextVector,
    pub label: usize,
}

/// A dataset plus the modality shapes and class count it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    pub specs: Vec<ModalitySpec>,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl MultimodalDataset {
    pub fn new(
        specs: Vec<ModalitySpec>,
        num_classes: usize,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        let ds = MultimodalDataset {
            specs,
            num_classes,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks every structural invariant: non-empty, labels in range, one
    /// full-length feature vector and one context bit per modality.
    pub fn validate(&self) -> Result<()> {
        if self.specs.is_empty() {
            return Err(Error::structural("dataset needs at least one modality"));
        }
        for spec in &self.specs {
            spec.validate()?;
        }
        if self.num_classes == 0 {
            return Err(Error::structural("dataset needs at least one class"));
        }
        if self.samples.is_empty() {
            return Err(Error::structural("dataset is empty"));
        }
        let m = self.specs.len();
        for (i, sample) in self.samples.iter().enumerate() {
            if sample.label >= self.num_classes {
                return Err(Error::structural(format!(
                    "sample {i} has label {} but num_classes is {}",
                    sample.label, self.num_classes
                )));
            }
            if sample.ctx.len() != m {
                return Err(Error::structural(format!(
                    "sample {i} has a {}-entry context vector for {m} modalities",
                    sample.ctx.len()
                )));
            }
            if sample.features.len() != m {
                return Err(Error::structural(format!(
                    "sample {i} has {} feature vectors for {m} modalities",
                    sample.features.len()
                )));
            }
            for (j, spec) in self.specs.iter().enumerate() {
                if sample.features[j].len() != spec.input_dim {
                    return Err(Error::structural(format!(
                        "sample {i} modality `{}`: expected {} features, got {}",
                        spec.name,
                        spec.input_dim,
                        sample.features[j].len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Class-dependent sign of the shared latent factor: modality 0 is the
/// reference (+1), modality m flips with bit m-1 of the class index, so the
/// class information sits in the sign product between modalities.
fn latent_sign(modality: usize, class: usize) -> f64 {
    if modality == 0 || (class >> (modality - 1)) & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn random_unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates class-conditional Gaussian clusters with a shared latent
/// correlation channel. Labels are balanced (counts differ by at most one)
/// and every context vector starts all-present.
pub fn gen_synthetic(
    num_samples: usize,
    specs: &[ModalitySpec],
    num_classes: usize,
    class_separation: f64,
    cross_modal_weight: f64,
    seed: u64,
) -> Result<MultimodalDataset> {
    if specs.is_empty() {
        return Err(Error::structural("generator needs at least one modality"));
    }
    for spec in specs {
        spec.validate()?;
    }
    if num_classes == 0 {
        return Err(Error::structural("generator needs at least one class"));
    }
    if num_samples < num_classes {
        return Err(Error::structural(format!(
            "{num_samples} samples cannot cover {num_classes} classes"
        )));
    }
    if !class_separation.is_finite() || class_separation <= 0.0 {
        return Err(Error::structural(format!(
            "class_separation must be positive, got {class_separation}"
        )));
    }
    if !(0.0..=1.0).contains(&cross_modal_weight) {
        return Err(Error::structural(format!(
            "cross_modal_weight must lie in [0, 1], got {cross_modal_weight}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synthetic", 0));
    let means: Vec<Vec<Vec<f64>>> = specs
        .iter()
        .map(|s| {
            (0..num_classes)
                .map(|_| random_unit_vector(&mut rng, s.input_dim))
                .collect()
        })
        .collect();
    let latent_dirs: Vec<Vec<f64>> = specs
        .iter()
        .map(|s| random_unit_vector(&mut rng, s.input_dim))
        .collect();

    let mut labels: Vec<usize> = (0..num_samples).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);

    let w = cross_modal_weight;
    let mut samples = Vec::with_capacity(num_samples);
    for &label in &labels {
        let latent: f64 = rng.sample(StandardNormal);
        let mut features = Vec::with_capacity(specs.len());
        for (m, spec) in specs.iter().enumerate() {
            let sign = latent_sign(m, label);
            let mean = &means[m][label];
            let dir = &latent_dirs[m];
            let mut x = Vec::with_capacity(spec.input_dim);
            for j in 0..spec.input_dim {
                let noise: f64 = rng.sample(StandardNormal);
                x.push(
                    class_separation * ((1.0 - w) * mean[j] + w * sign * latent * dir[j]) + noise,
                );
            }
            features.push(x);
        }
        samples.push(Sample {
            features,
            ctx: ContextVector::all_present(specs.len()),
            label,
        });
    }
    MultimodalDataset::new(specs.to_vec(), num_classes, samples)
}

/// What replaces a removed modality's features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GarbageMode {
    Zeros,
    /// Unit Gaussian noise — the honest adversarial case, since zeros are
    /// accidentally benign under the encoder's zero-vector fallback.
    GaussianNoise,
}

/// Per-modality missing fractions plus how to corrupt removed features.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingSpec {
    pub fractions: Vec<f64>,
    pub garbage: GarbageMode,
    pub seed: u64,
}

impl MissingSpec {
    pub fn none(num_modalities: usize) -> Self {
        MissingSpec {
            fractions: vec![0.0; num_modalities],
            garbage: GarbageMode::GaussianNoise,
            seed: 0,
        }
    }
}

/// What [`inject_missing`] actually did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingReport {
    /// Samples marked missing, per modality.
    pub injected: Vec<usize>,
    /// Markings skipped because the sample would have lost its last
    /// remaining modality.
    pub kept_last: usize,
}

/// Marks a seeded random subset of exactly `round(fraction * n)` samples per
/// modality as missing and replaces their features per the garbage mode. A
/// sample never loses its last present modality: such markings are skipped
/// and counted in the report.
pub fn inject_missing(
    dataset: &MultimodalDataset,
    spec: &MissingSpec,
) -> Result<(MultimodalDataset, MissingReport)> {
    let m = dataset.specs.len();
    if spec.fractions.len() != m {
        return Err(Error::structural(format!(
            "{} missing fractions for {m} modalities",
            spec.fractions.len()
        )));
    }
    for (i, &f) in spec.fractions.iter().enumerate() {
        if !f.is_finite() || !(0.0..=1.0).contains(&f) {
            return Err(Error::structural(format!(
                "missing fraction for modality {i} must lie in [0, 1], got {f}"
            )));
        }
    }
    let mut out = dataset.clone();
    let n = out.samples.len();
    let mut injected = vec![0usize; m];
    let mut kept_last = 0usize;
    for modality in 0..m {
        let target = (spec.fractions[modality] * n as f64).round() as usize;
        if target == 0 {
            continue;
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "missing", modality as u64));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &idx in order.iter().take(target) {
            let sample = &mut out.samples[idx];
            if sample.ctx.num_present() <= 1 && sample.ctx.is_present(modality) {
                kept_last += 1;
                continue;
            }
            if !sample.ctx.is_present(modality) {
                continue;
            }
            sample.ctx.set(modality, false);
            let dim = dataset.specs[modality].input_dim;
            sample.features[modality] = match spec.garbage {
                GarbageMode::Zeros => vec![0.0; dim],
                GarbageMode::GaussianNoise => {
                    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
                }
            };
            injected[modality] += 1;
        }
    }
    Ok((out, MissingReport { injected, kept_last }))
}

const MAGIC: &[u8; 4] = b"MMQF";
const FORMAT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainerMeta {
    modalities: Vec<ModalitySpec>,
    num_classes: usize,
    num_samples: usize,
}

/// Writes the MMQF container: magic "MMQF", version u16 LE, metadata length
/// u32 LE, JSON metadata, then the payload — features as little-endian f64
/// in sample-major modality-major order, context bytes (one per modality per
/// sample), and labels as u32 LE.
pub fn save_features(dataset: &MultimodalDataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let meta = serde_json::to_vec(&ContainerMeta {
        modalities: dataset.specs.clone(),
        num_classes: dataset.num_classes,
        num_samples: dataset.samples.len(),
    })?;
    let meta_len = u32::try_from(meta.len())
        .map_err(|_| Error::structural("metadata block exceeds u32 length"))?;

    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&meta_len.to_le_bytes())?;
    w.write_all(&meta)?;
    for sample in &dataset.samples {
        for features in &sample.features {
            for &x in features {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    for sample in &dataset.samples {
        w.write_all(&sample.ctx.to_bytes())?;
    }
    for sample in &dataset.samples {
        let label = u32::try_from(sample.label)
            .map_err(|_| Error::structural(format!("label {} exceeds u32", sample.label)))?;
        w.write_all(&label.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!("file truncated while reading {what}"),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16_le(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64_le(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

/// Reads an MMQF container back; every failure names the byte offset.
/// Either the whole dataset validates or an error is returned.
pub fn load_features(path: &Path) -> Result<MultimodalDataset> {
    let bytes = std::fs::read(path)?;
    parse_container(&bytes)
}

fn parse_container(bytes: &[u8]) -> Result<MultimodalDataset> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:02x?}, expected \"MMQF\""),
        });
    }
    let version_offset = r.pos as u64;
    let version = r.u16_le("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Parse {
            offset: version_offset,
            message: format!("unknown format version {version}"),
        });
    }
    let meta_len = r.u32_le("metadata length")? as usize;
    let meta_offset = r.pos as u64;
    let meta_bytes = r.take(meta_len, "metadata block")?;
    let meta: ContainerMeta = serde_json::from_slice(meta_bytes).map_err(|e| Error::Parse {
        offset: meta_offset,
        message: format!("metadata is not valid JSON: {e}"),
    })?;
    if meta.num_classes == 0 {
        return Err(Error::Parse {
            offset: meta_offset,
            message: "metadata declares zero classes".into(),
        });
    }
    if meta.modalities.is_empty() {
        return Err(Error::Parse {
            offset: meta_offset,
            message: "metadata declares zero modalities".into(),
        });
    }

    let n = meta.num_samples;
    let m = meta.modalities.len();
    let mut feature_blocks = Vec::with_capacity(n);
    for s in 0..n {
        let mut per_modality = Vec::with_capacity(m);
        for spec in &meta.modalities {
            let mut v = Vec::with_capacity(spec.input_dim);
            for j in 0..spec.input_dim {
                let offset = r.pos as u64;
                let x = r.f64_le("feature payload")?;
                if !x.is_finite() {
                    return Err(Error::Parse {
                        offset,
                        message: format!(
                            "non-finite feature (sample {s}, modality `{}`, index {j})",
                            spec.name
                        ),
                    });
                }
                v.push(x);
            }
            per_modality.push(v);
        }
        feature_blocks.push(per_modality);
    }
    let mut contexts = Vec::with_capacity(n);
    for _ in 0..n {
        let offset = r.pos as u64;
        let raw = r.take(m, "context bytes")?;
        let ctx = ContextVector::from_bytes(raw).map_err(|e| Error::Parse {
            offset,
            message: e.to_string(),
        })?;
        contexts.push(ctx);
    }
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let offset = r.pos as u64;
        let label = r.u32_le("labels")? as usize;
        if label >= meta.num_classes {
            return Err(Error::Parse {
                offset,
                message: format!(
                    "sample {s} has label {label} but num_classes is {}",
                    meta.num_classes
                ),
            });
        }
        labels.push(label);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos as u64,
            message: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        });
    }

    let samples = feature_blocks
        .into_iter()
        .zip(contexts)
        .zip(labels)
        .map(|((features, ctx), label)| Sample {
            features,
            ctx,
            label,
        })
        .collect();
    MultimodalDataset::new(meta.modalities, meta.num_classes, samples).map_err(|e| {
        Error::Parse {
            offset: meta_offset,
            message: format!("container contents fail validation: {e}"),
        }
    })
}

/// Writes labels and context bits to CSV for quick inspection.
pub fn export_labels_csv(dataset: &MultimodalDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header = vec!["sample".to_string(), "label".to_string()];
    for spec in &dataset.specs {
        header.push(format!("present_{}", spec.name));
    }
    w.write_record(&header).map_err(csv_error)?;
    for (i, sample) in dataset.samples.iter().enumerate() {
        let mut row = vec![i.to_string(), sample.label.to_string()];
        for &bit in sample.ctx.bits() {
            row.push((bit as u8).to_string());
        }
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::structural(format!("csv write failed: {e}"))
}
