//! End-to-end experiment pipeline: resolve a config into data, model, and
//! federation schedule, run it, and leave machine-readable artifacts in the
//! output directory — a per-round CSV, a JSON summary, per-round and final
//! checkpoints, and the exact train/test splits as feature containers.
//! Also hosts the parameter sweep and the checkpoint evaluation entry
//! points behind the CLI verbs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::circuits::NoiseSpec;
use crate::config::{DatasetSource, ExperimentConfig, MissingConfig, SCHEMA_VERSION};
use crate::data::{
    gen_synthetic, load_features, save_features, GarbageMode, MissingReport, MissingSpec,
    MultimodalDataset,
};
use crate::error::{Error, Result};
use crate::federation::{partition, run_federation, FederationOptions, RoundReport};
use crate::model::{ContextVector, MultimodalModel};
use crate::seeds::derive_seed;

/// Final numbers and provenance for one run, mirrored to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub experiment_id: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub mma: bool,
    pub num_train_samples: usize,
    pub num_test_samples: usize,
    /// Samples marked missing per modality during injection.
    pub missing_injected: Vec<usize>,
    /// Markings skipped to keep each sample's last modality.
    pub missing_kept_last: usize,
    pub rounds: usize,
    pub final_test_accuracy: f64,
    pub final_modality_accuracy: Vec<f64>,
    pub final_client_losses: Vec<f64>,
    pub wall_time_secs: f64,
}

/// Everything a completed run leaves behind, with paths to the artifacts.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub reports: Vec<RoundReport>,
    pub rounds_csv: PathBuf,
    pub summary_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
}

/// Label-stratified split into (train, test). Each label's samples are
/// shuffled with the seed and `test_fraction` of them (at least one, never
/// all) go to the test side; singleton labels stay in train.
pub fn stratified_split(
    dataset: &MultimodalDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(MultimodalDataset, MultimodalDataset)> {
    if !test_fraction.is_finite() || !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(
            "test_fraction",
            format!("must lie in (0, 1), got {test_fraction}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", 0));
    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    for group in label_groups(dataset) {
        let mut group = group;
        group.shuffle(&mut rng);
        let take = if group.len() < 2 {
            0
        } else {
            ((group.len() as f64 * test_fraction).round() as usize).clamp(1, group.len() - 1)
        };
        test_indices.extend_from_slice(&group[..take]);
        train_indices.extend_from_slice(&group[take..]);
    }
    if test_indices.is_empty() {
        return Err(Error::config(
            "test_fraction",
            "dataset is too small to hold out a test split",
        ));
    }
    Ok((
        select(dataset, train_indices),
        select(dataset, test_indices),
    ))
}

/// Label-stratified subsample: keeps `fraction` of each label's samples
/// (at least one), chosen by a seeded shuffle.
pub fn subsample_fraction(
    dataset: &MultimodalDataset,
    fraction: f64,
    seed: u64,
) -> Result<MultimodalDataset> {
    if !fraction.is_finite() || !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(
            "data_fraction",
            format!("must lie in (0, 1], got {fraction}"),
        ));
    }
    if fraction == 1.0 {
        return Ok(dataset.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "fraction", 0));
    let mut kept = Vec::new();
    for group in label_groups(dataset) {
        let mut group = group;
        group.shuffle(&mut rng);
        let take = ((group.len() as f64 * fraction).round() as usize).clamp(1, group.len());
        kept.extend_from_slice(&group[..take]);
    }
    Ok(select(dataset, kept))
}

fn label_groups(dataset: &MultimodalDataset) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, sample) in dataset.samples.iter().enumerate() {
        groups[sample.label].push(i);
    }
    groups
}

/// Builds a sub-dataset from indices, restored to dataset order.
fn select(dataset: &MultimodalDataset, mut indices: Vec<usize>) -> MultimodalDataset {
    indices.sort_unstable();
    MultimodalDataset {
        specs: dataset.specs.clone(),
        num_classes: dataset.num_classes,
        samples: indices
            .into_iter()
            .map(|i| dataset.samples[i].clone())
            .collect(),
    }
}

/// Marks every modality of every sample present, so garbage features from
/// missing-modality injection flow into the circuits untreated.
fn force_all_present(mut dataset: MultimodalDataset) -> MultimodalDataset {
    let m = dataset.specs.len();
    for sample in &mut dataset.samples {
        sample.ctx = ContextVector::all_present(m);
    }
    dataset
}

fn check_dataset_matches(dataset: &MultimodalDataset, config: &ExperimentConfig) -> Result<()> {
    if dataset.specs.len() != config.modalities.len() {
        return Err(Error::config(
            "dataset",
            format!(
                "file has {} modalities, config declares {}",
                dataset.specs.len(),
                config.modalities.len()
            ),
        ));
    }
    for (from_file, declared) in dataset.specs.iter().zip(&config.modalities) {
        if from_file.name != declared.name || from_file.input_dim != declared.input_dim {
            return Err(Error::config(
                "dataset",
                format!(
                    "file modality {}({}d) does not match declared {}({}d)",
                    from_file.name, from_file.input_dim, declared.name, declared.input_dim
                ),
            ));
        }
    }
    if dataset.num_classes != config.num_classes {
        return Err(Error::config(
            "dataset",
            format!(
                "file has {} classes, config declares {}",
                dataset.num_classes, config.num_classes
            ),
        ));
    }
    Ok(())
}

fn csv_failure(e: csv::Error) -> Error {
    Error::structural(format!("csv write failed: {e}"))
}

/// Runs one experiment end to end and writes all artifacts under the
/// config's output directory. Deterministic in (config, master seed) apart
/// from recorded wall times.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let start = Instant::now();
    let master = config.master_seed;

    let dataset = match &config.dataset {
        DatasetSource::Synthetic {
            num_samples,
            class_separation,
            cross_modal_weight,
        } => gen_synthetic(
            *num_samples,
            &config.modalities,
            config.num_classes,
            *class_separation,
            *cross_modal_weight,
            derive_seed(master, "dataset", 0),
        )?,
        DatasetSource::File { path } => {
            let loaded = load_features(path)?;
            check_dataset_matches(&loaded, config)?;
            loaded
        }
    };

    let (dataset, missing_report) = match &config.missing {
        Some(missing) => inject_from_config(&dataset, missing, master)?,
        None => (
            dataset,
            MissingReport {
                injected: vec![0; config.modalities.len()],
                kept_last: 0,
            },
        ),
    };
    let dataset = if config.mma {
        dataset
    } else {
        force_all_present(dataset)
    };

    let (train, test) = stratified_split(&dataset, config.test_fraction, master)?;
    let train = subsample_fraction(&train, config.data_fraction, master)?;

    let mut model = MultimodalModel::new(
        config.modalities.clone(),
        config.fusion_layers,
        config.num_classes,
        derive_seed(master, "projection", 0),
    )?;
    model.randomize_params(derive_seed(master, "init", 0));

    let shards = partition(
        &train,
        config.num_clients,
        config.partition,
        derive_seed(master, "partition", 0),
    )?;
    let noise = match &config.noise {
        Some(nc) => NoiseSpec::new(nc.mode, nc.p, derive_seed(master, "noise", 0), nc.allow_extreme_p)?,
        None => NoiseSpec::off(),
    };
    let options = FederationOptions {
        rounds: config.rounds,
        local_epochs: config.local_epochs,
        optimizer: config.optimizer,
        noise,
    };

    fs::create_dir_all(&config.output_dir)?;
    let checkpoint_dir = config.output_dir.join("checkpoints");
    fs::create_dir_all(&checkpoint_dir)?;
    let config_path = config.output_dir.join("config.json");
    write_json(&config_path, config)?;
    let train_path = config.output_dir.join("train.mmqf");
    let test_path = config.output_dir.join("test.mmqf");
    save_features(&train, &train_path)?;
    save_features(&test, &test_path)?;

    let rounds_csv = config.output_dir.join("rounds.csv");
    let mut writer = csv::Writer::from_path(&rounds_csv).map_err(csv_failure)?;
    let mut header = vec!["round".to_string()];
    for k in 0..config.num_clients {
        header.push(format!("client_{k}_loss"));
    }
    header.push("test_accuracy".to_string());
    for spec in &config.modalities {
        header.push(format!("acc_{}", spec.name));
    }
    writer.write_record(&header).map_err(csv_failure)?;

    let (_global, reports) = run_federation(&mut model, shards, &test, &options, |report, snapshot| {
        let mut row = vec![report.round.to_string()];
        for loss in &report.client_losses {
            row.push(loss.to_string());
        }
        row.push(report.test_accuracy.to_string());
        for acc in &report.modality_accuracy {
            row.push(acc.to_string());
        }
        writer.write_record(&row).map_err(csv_failure)?;
        snapshot.save_checkpoint(&checkpoint_dir.join(format!("round_{:04}.json", report.round)))
    })?;
    writer.flush()?;
    drop(writer);

    let checkpoint_path = config.output_dir.join("model.json");
    model.save_checkpoint(&checkpoint_path)?;

    let hash = config.canonical_hash();
    let last = reports.last().expect("at least one round ran");
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        experiment_id: hash[..16].to_string(),
        config_hash: hash,
        master_seed: master,
        mma: config.mma,
        num_train_samples: train.samples.len(),
        num_test_samples: test.samples.len(),
        missing_injected: missing_report.injected,
        missing_kept_last: missing_report.kept_last,
        rounds: config.rounds,
        final_test_accuracy: last.test_accuracy,
        final_modality_accuracy: last.modality_accuracy.clone(),
        final_client_losses: last.client_losses.clone(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    let summary_path = config.output_dir.join("summary.json");
    write_json(&summary_path, &summary)?;

    Ok(RunOutcome {
        summary,
        reports,
        rounds_csv,
        summary_path,
        checkpoint_path,
        train_path,
        test_path,
    })
}

fn inject_from_config(
    dataset: &MultimodalDataset,
    missing: &MissingConfig,
    master: u64,
) -> Result<(MultimodalDataset, MissingReport)> {
    let spec = MissingSpec {
        fractions: missing.fractions.clone(),
        garbage: missing.garbage,
        seed: derive_seed(master, "missing", 0),
    };
    crate::data::inject_missing(dataset, &spec)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut writer = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, value)?;
    use std::io::Write;
    writeln!(&mut writer)?;
    Ok(())
}

/// Experiment dimensions a sweep can vary, one value per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Qubits per modality (applied to every modality).
    Qubits,
    /// Circuit layers per modality (applied to every modality).
    Layers,
    /// Number of federated clients.
    Clients,
    /// Fraction of the training split used.
    DataFraction,
    /// Missing fraction injected into the first modality.
    MissingFraction,
    /// Missing-modality-agnostic handling on vs off.
    MmaOnOff,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::Qubits,
        SweepAxis::Layers,
        SweepAxis::Clients,
        SweepAxis::DataFraction,
        SweepAxis::MissingFraction,
        SweepAxis::MmaOnOff,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        for axis in Self::ALL {
            if axis.name() == name {
                return Ok(axis);
            }
        }
        Err(Error::config(
            "axis",
            format!(
                "unknown axis {name:?}; expected one of {}",
                Self::ALL.map(|a| a.name()).join(", ")
            ),
        ))
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Qubits => "qubits",
            SweepAxis::Layers => "layers",
            SweepAxis::Clients => "clients",
            SweepAxis::DataFraction => "data_fraction",
            SweepAxis::MissingFraction => "missing_fraction",
            SweepAxis::MmaOnOff => "mma_on_off",
        }
    }
}

/// One sweep cell's outcome: the varied value plus either final accuracies
/// or the error that stopped the cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub axis: String,
    pub value: String,
    pub config_hash: String,
    pub ok: bool,
    pub error: Option<String>,
    pub test_accuracy: Option<f64>,
    pub modality_accuracy: Vec<f64>,
    pub output_dir: PathBuf,
}

/// All cells of a sweep plus the combined table on disk.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
}

impl SweepReport {
    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(|c| !c.ok)
    }
}

/// Runs one experiment per value of the axis, each with a derived sub-seed
/// and its own output directory. Cell failures are recorded and the sweep
/// continues; the combined CSV gets one row per cell either way.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<SweepReport> {
    base.validate()?;
    let values: Vec<String> = if values.is_empty() {
        match axis {
            SweepAxis::MmaOnOff => vec!["on".into(), "off".into()],
            _ => {
                return Err(Error::config(
                    "values",
                    format!("axis {} needs at least one value", axis.name()),
                ))
            }
        }
    } else {
        values.to_vec()
    };
    // Reject malformed values before any cell runs.
    let mut cell_configs = Vec::with_capacity(values.len());
    for value in &values {
        cell_configs.push(apply_axis(base, axis, value)?);
    }

    fs::create_dir_all(&base.output_dir)?;
    let mut cells = Vec::with_capacity(cell_configs.len());
    for (index, (value, mut config)) in values.iter().zip(cell_configs).enumerate() {
        config.master_seed = derive_seed(base.master_seed, "sweep-cell", index as u64);
        config.output_dir = base
            .output_dir
            .join(format!("cell_{index:02}_{}_{}", axis.name(), sanitize(value)));
        let hash = config.canonical_hash();
        let cell = match config.validate().and_then(|()| run_experiment(&config)) {
            Ok(outcome) => SweepCell {
                index,
                axis: axis.name().to_string(),
                value: value.clone(),
                config_hash: hash,
                ok: true,
                error: None,
                test_accuracy: Some(outcome.summary.final_test_accuracy),
                modality_accuracy: outcome.summary.final_modality_accuracy.clone(),
                output_dir: config.output_dir.clone(),
            },
            Err(e) => SweepCell {
                index,
                axis: axis.name().to_string(),
                value: value.clone(),
                config_hash: hash,
                ok: false,
                error: Some(e.to_string()),
                test_accuracy: None,
                modality_accuracy: Vec::new(),
                output_dir: config.output_dir.clone(),
            },
        };
        cells.push(cell);
    }

    let csv_path = base.output_dir.join("sweep.csv");
    let mut writer = csv::Writer::from_path(&csv_path).map_err(csv_failure)?;
    let mut header = vec![
        "index".to_string(),
        "axis".to_string(),
        "value".to_string(),
        "status".to_string(),
        "test_accuracy".to_string(),
    ];
    for spec in &base.modalities {
        header.push(format!("acc_{}", spec.name));
    }
    header.push("config_hash".to_string());
    header.push("error".to_string());
    writer.write_record(&header).map_err(csv_failure)?;
    for cell in &cells {
        let mut row = vec![
            cell.index.to_string(),
            cell.axis.clone(),
            cell.value.clone(),
            if cell.ok { "ok".into() } else { "failed".into() },
            cell.test_accuracy.map(|a| a.to_string()).unwrap_or_default(),
        ];
        for m in 0..base.modalities.len() {
            row.push(
                cell.modality_accuracy
                    .get(m)
                    .map(|a| a.to_string())
                    .unwrap_or_default(),
            );
        }
        row.push(cell.config_hash.clone());
        row.push(cell.error.clone().unwrap_or_default());
        writer.write_record(&row).map_err(csv_failure)?;
    }
    writer.flush()?;
    drop(writer);

    let summary_path = base.output_dir.join("sweep_summary.json");
    write_json(&summary_path, &cells)?;

    Ok(SweepReport {
        cells,
        csv_path,
        summary_path,
    })
}

fn apply_axis(base: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut config = base.clone();
    match axis {
        SweepAxis::Qubits => {
            let qubits = parse_count(value)?;
            for spec in &mut config.modalities {
                spec.num_qubits = qubits;
            }
        }
        SweepAxis::Layers => {
            let layers = parse_count(value)?;
            for spec in &mut config.modalities {
                spec.num_layers = layers;
            }
        }
        SweepAxis::Clients => config.num_clients = parse_count(value)?,
        SweepAxis::DataFraction => config.data_fraction = parse_fraction(value)?,
        SweepAxis::MissingFraction => {
            let fraction = parse_fraction(value)?;
            let mut fractions = vec![0.0; config.modalities.len()];
            fractions[0] = fraction;
            let garbage = config
                .missing
                .as_ref()
                .map(|m| m.garbage)
                .unwrap_or(GarbageMode::GaussianNoise);
            config.missing = Some(MissingConfig { fractions, garbage });
        }
        SweepAxis::MmaOnOff => {
            config.mma = match value {
                "on" | "true" | "1" => true,
                "off" | "false" | "0" => false,
                other => {
                    return Err(Error::config(
                        "values",
                        format!("expected on/off for the MMA axis, got {other:?}"),
                    ))
                }
            };
        }
    }
    Ok(config)
}

fn parse_count(value: &str) -> Result<usize> {
    value
        .parse::<usize>()
        .map_err(|_| Error::config("values", format!("expected a positive integer, got {value:?}")))
}

fn parse_fraction(value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::config("values", format!("expected a number, got {value:?}")))
}

fn sanitize(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect()
}

/// Accuracy of one modality evaluated alone; `None` when no sample carries
/// that modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityAccuracy {
    pub name: String,
    pub accuracy: Option<f64>,
}

/// Overall and per-modality-ablation accuracies of a checkpoint on a
/// dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub num_samples: usize,
    pub overall_accuracy: f64,
    pub modality_accuracy: Vec<ModalityAccuracy>,
}

/// Loads a checkpoint and a feature container, checks they are shape
/// compatible, and scores the model overall plus once per modality with all
/// other modalities masked.
pub fn evaluate_checkpoint(checkpoint: &Path, dataset_path: &Path) -> Result<EvaluationReport> {
    let model = MultimodalModel::load_checkpoint(checkpoint)?;
    let dataset = load_features(dataset_path)?;
    if dataset.specs.len() != model.num_modalities() {
        return Err(Error::config(
            "dataset",
            format!(
                "dataset has {} modalities, checkpoint expects {}",
                dataset.specs.len(),
                model.num_modalities()
            ),
        ));
    }
    for (from_file, from_model) in dataset.specs.iter().zip(model.specs()) {
        if from_file.name != from_model.name || from_file.input_dim != from_model.input_dim {
            return Err(Error::config(
                "dataset",
                format!(
                    "dataset modality {}({}d) does not match checkpoint {}({}d)",
                    from_file.name, from_file.input_dim, from_model.name, from_model.input_dim
                ),
            ));
        }
    }
    if dataset.num_classes != model.num_classes() {
        return Err(Error::config(
            "dataset",
            format!(
                "dataset has {} classes, checkpoint expects {}",
                dataset.num_classes,
                model.num_classes()
            ),
        ));
    }
    let overall_accuracy = model.accuracy(&dataset.samples)?;
    let modality_accuracy = model
        .specs()
        .iter()
        .enumerate()
        .map(|(m, spec)| {
            Ok(ModalityAccuracy {
                name: spec.name.clone(),
                accuracy: model.accuracy_single_modality(&dataset.samples, m)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport {
        num_samples: dataset.samples.len(),
        overall_accuracy,
        modality_accuracy,
    })
}
