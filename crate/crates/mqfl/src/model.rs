//! The multimodal quantum classifier: per-modality encode + ansatz, an
//! entangling fusion stage across all registers, Pauli-Z measurement, and a
//! linear readout — with the missing-modality isolation mechanism threaded
//! through every stage.
//!
//! Parameter layout (one flat vector, in this order):
//! 1. modality angle blocks in declaration order, each `3 * n_m * L_m` long
//! 2. fusion angles, length `2 * n_q * F` (absent for a single modality)
//! 3. readout weights, row-major `[qubit][class]`, length `n_q * C`
//! 4. readout biases, length `C`
//!
//! Registers in the fused state are laid out in a canonical order — specs
//! sorted by name, lowest qubits first — rather than declaration order, and
//! the fusion ring walks that canonical order. Two models declaring the
//! same modalities in different orders therefore compute identical fused
//! circuits, so reordering specs (and their angle blocks) is exactly
//! output-preserving.
//!
//! Missing modalities (context bit 0) follow the no-op path end to end:
//! their register stays |0...0> (features never read), fusion gates whose
//! targets touch the register are skipped, their expectations are masked to
//! 0, and their angle slots receive exactly-zero gradient.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use crate::autodiff::{
    cross_entropy, softmax_minus_onehot, OptimizerState, ShiftObjective,
};
use crate::circuits::{
    amplitude_encode, build_fusion_circuit, build_modality_pqc, damp_expectations, FusionCircuit,
    NoiseMode, NoiseSpec, ParamCircuit,
};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::qstate::{tensor_all, StateVector};
use crate::seeds::derive_seed;

/// Shape of one modality's input and quantum register.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub input_dim: usize,
    pub num_qubits: usize,
    pub num_layers: usize,
}

impl ModalitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::structural("modality name must be non-empty"));
        }
        if self.input_dim == 0 || self.num_qubits == 0 || self.num_layers == 0 {
            return Err(Error::structural(format!(
                "modality `{}` needs input_dim, num_qubits, num_layers all >= 1",
                self.name
            )));
        }
        Ok(())
    }

    /// Length of the projected feature vector fed to the encoder.
    pub fn projected_dim(&self) -> usize {
        self.input_dim.min(1 << self.num_qubits)
    }
}

/// Per-sample presence flags: bit m is true when modality m's features are
/// real, false when the modality is missing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextVector {
    bits: Vec<bool>,
}

impl ContextVector {
    pub fn all_present(num_modalities: usize) -> Self {
        ContextVector {
            bits: vec![true; num_modalities],
        }
    }

    pub fn new(bits: Vec<bool>) -> Self {
        ContextVector { bits }
    }

    /// Decodes one byte per modality; anything other than 0 or 1 is refused.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut bits = Vec::with_capacity(bytes.len());
        for &b in bytes {
            match b {
                0 => bits.push(false),
                1 => bits.push(true),
                other => {
                    return Err(Error::structural(format!(
                        "context byte must be 0 or 1, got {other}"
                    )))
                }
            }
        }
        Ok(ContextVector { bits })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b as u8).collect()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_present(&self, modality: usize) -> bool {
        self.bits[modality]
    }

    pub fn set(&mut self, modality: usize, present: bool) {
        self.bits[modality] = present;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn num_present(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any_present(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    /// Bitmask with bit m set for each missing modality.
    pub fn missing_mask(&self) -> u64 {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| !b)
            .fold(0u64, |acc, (m, _)| acc | (1u64 << m))
    }
}

/// A sample's registers after projection and amplitude encoding, cached so
/// parameter-shift evaluations skip the parameter-independent front end.
/// Missing modalities hold an untouched |0...0> register.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    registers: Vec<StateVector>,
    present: Vec<bool>,
}

impl PreparedSample {
    pub fn present(&self) -> &[bool] {
        &self.present
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    modalities: Vec<ModalitySpec>,
    fusion_layers: usize,
    num_classes: usize,
    projection_seed: u64,
    params: Vec<f64>,
}

/// The assembled classifier. Construction derives every circuit and the
/// fixed input projections from the specs; only `params` is trainable.
#[derive(Debug, Clone)]
pub struct MultimodalModel {
    specs: Vec<ModalitySpec>,
    fusion_layers: usize,
    num_classes: usize,
    projection_seed: u64,
    modality_circuits: Vec<ParamCircuit>,
    fusion: Option<FusionCircuit>,
    /// Row-major `projected_dim x input_dim` matrices, one per modality.
    projections: Vec<Vec<f64>>,
    /// Declared modality indices in canonical (name-sorted) order; the
    /// fused register stacks them in this order, lowest qubits first.
    canonical_order: Vec<usize>,
    /// Inverse of `canonical_order`: canonical position of each modality.
    canonical_pos: Vec<usize>,
    qubit_offsets: Vec<usize>,
    total_qubits: usize,
    angle_offsets: Vec<usize>,
    fusion_offset: usize,
    num_angles: usize,
    num_params: usize,
    params: Vec<f64>,
}

impl MultimodalModel {
    /// Builds the model with all parameters at zero. The input projections
    /// are seeded from `projection_seed` and each modality's name, so a
    /// modality keeps its projection when the ordering changes.
    pub fn new(
        specs: Vec<ModalitySpec>,
        fusion_layers: usize,
        num_classes: usize,
        projection_seed: u64,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::structural("model needs at least one modality"));
        }
        if num_classes == 0 {
            return Err(Error::structural("model needs at least one class"));
        }
        if fusion_layers == 0 {
            return Err(Error::structural("fusion_layers must be >= 1"));
        }
        for spec in &specs {
            spec.validate()?;
        }
        for (i, spec) in specs.iter().enumerate() {
            if specs[..i].iter().any(|s| s.name == spec.name) {
                return Err(Error::structural(format!(
                    "duplicate modality name `{}`",
                    spec.name
                )));
            }
        }

        let modality_circuits: Vec<ParamCircuit> = specs
            .iter()
            .map(|s| build_modality_pqc(s.num_qubits, s.num_layers))
            .collect::<Result<_>>()?;

        let mut canonical_order: Vec<usize> = (0..specs.len()).collect();
        canonical_order.sort_by(|&a, &b| specs[a].name.cmp(&specs[b].name));
        let mut canonical_pos = vec![0usize; specs.len()];
        for (pos, &m) in canonical_order.iter().enumerate() {
            canonical_pos[m] = pos;
        }

        let canonical_counts: Vec<usize> = canonical_order
            .iter()
            .map(|&m| specs[m].num_qubits)
            .collect();
        let fusion = if specs.len() >= 2 {
            Some(build_fusion_circuit(&canonical_counts, fusion_layers)?)
        } else {
            None
        };

        let mut qubit_offsets = vec![0usize; specs.len()];
        let mut total_qubits = 0;
        for &m in &canonical_order {
            qubit_offsets[m] = total_qubits;
            total_qubits += specs[m].num_qubits;
        }

        let mut angle_offsets = Vec::with_capacity(specs.len());
        let mut offset = 0;
        for circuit in &modality_circuits {
            angle_offsets.push(offset);
            offset += circuit.num_params();
        }
        let fusion_offset = offset;
        let num_angles = offset + fusion.as_ref().map_or(0, |f| f.circuit.num_params());
        let num_params = num_angles + total_qubits * num_classes + num_classes;

        let projections = specs
            .iter()
            .map(|s| seeded_projection(s, projection_seed))
            .collect();

        Ok(MultimodalModel {
            specs,
            fusion_layers,
            num_classes,
            projection_seed,
            modality_circuits,
            fusion,
            projections,
            canonical_order,
            canonical_pos,
            qubit_offsets,
            total_qubits,
            angle_offsets,
            fusion_offset,
            num_angles,
            num_params,
            params: vec![0.0; num_params],
        })
    }

    pub fn specs(&self) -> &[ModalitySpec] {
        &self.specs
    }

    pub fn num_modalities(&self) -> usize {
        self.specs.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn fusion_layers(&self) -> usize {
        self.fusion_layers
    }

    pub fn projection_seed(&self) -> u64 {
        self.projection_seed
    }

    pub fn total_qubits(&self) -> usize {
        self.total_qubits
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn num_angles(&self) -> usize {
        self.num_angles
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params {
            return Err(Error::structural(format!(
                "model has {} parameters, got {}",
                self.num_params,
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::numeric(format!("parameter {i} is not finite")));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Angle slots owned by one modality's ansatz.
    pub fn modality_slot_range(&self, modality: usize) -> std::ops::Range<usize> {
        let start = self.angle_offsets[modality];
        start..start + self.modality_circuits[modality].num_params()
    }

    /// Angle slots owned by the fusion stage (empty for one modality).
    pub fn fusion_slot_range(&self) -> std::ops::Range<usize> {
        self.fusion_offset..self.num_angles
    }

    pub fn input_projection(&self, modality: usize) -> &[f64] {
        &self.projections[modality]
    }

    /// Seeded initialization: angles uniform in (-pi, pi), readout uniform
    /// in (-0.1, 0.1).
    pub fn randomize_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params[..self.num_angles].iter_mut() {
            *p = rng.random_range(-PI..PI);
        }
        for p in self.params[self.num_angles..].iter_mut() {
            *p = rng.random_range(-0.1..0.1);
        }
    }

    /// Applies the fixed projection of one modality to a raw feature vector.
    pub fn project(&self, modality: usize, features: &[f64]) -> Result<Vec<f64>> {
        let spec = &self.specs[modality];
        if features.len() != spec.input_dim {
            return Err(Error::structural(format!(
                "modality `{}` expects {} features, got {}",
                spec.name,
                spec.input_dim,
                features.len()
            )));
        }
        let rows = spec.projected_dim();
        let cols = spec.input_dim;
        let w = &self.projections[modality];
        let mut out = vec![0.0; rows];
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (c, &x) in features.iter().enumerate() {
                acc += w[r * cols + c] * x;
            }
            *o = acc;
        }
        Ok(out)
    }

    /// Projects and amplitude-encodes every present modality; missing ones
    /// get an untouched |0...0> register and their features are never read.
    pub fn prepare(&self, features: &[Vec<f64>], ctx: &ContextVector) -> Result<PreparedSample> {
        let m = self.specs.len();
        if ctx.len() != m {
            return Err(Error::structural(format!(
                "context vector has {} entries for {m} modalities",
                ctx.len()
            )));
        }
        if features.len() != m {
            return Err(Error::structural(format!(
                "sample has {} feature vectors for {m} modalities",
                features.len()
            )));
        }
        if !ctx.any_present() {
            return Err(Error::structural(
                "all modalities missing; at least one context bit must be set",
            ));
        }
        let mut registers = Vec::with_capacity(m);
        for (i, spec) in self.specs.iter().enumerate() {
            if ctx.is_present(i) {
                let projected = self.project(i, &features[i])?;
                let (state, _fallback) = amplitude_encode(&projected, spec.num_qubits)?;
                registers.push(state);
            } else {
                registers.push(StateVector::zero(spec.num_qubits));
            }
        }
        Ok(PreparedSample {
            registers,
            present: ctx.bits().to_vec(),
        })
    }

    /// Missing-modality mask in canonical bit positions, matching the
    /// fusion circuit's per-gate modality masks.
    fn canonical_missing_mask(&self, present: &[bool]) -> u64 {
        let mut mask = 0u64;
        for (m, &p) in present.iter().enumerate() {
            if !p {
                mask |= 1u64 << self.canonical_pos[m];
            }
        }
        mask
    }

    /// Runs the quantum pipeline at the given angles: present modalities'
    /// ansatz circuits, the tensor of all registers, the fusion stage with
    /// gates touching missing registers skipped, Z-measurement, masking of
    /// missing-modality expectations to 0, and the analytic damping channel.
    pub fn expectations_at(
        &self,
        prepared: &PreparedSample,
        angles: &[f64],
        noise: &NoiseSpec,
    ) -> Result<Vec<f64>> {
        if angles.len() != self.num_angles {
            return Err(Error::structural(format!(
                "model has {} angles, got {}",
                self.num_angles,
                angles.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        let stochastic = noise.mode == NoiseMode::PerGatePauli;
        // Registers in canonical order: position p holds canonical_order[p].
        let mut registers: Vec<StateVector> = self
            .canonical_order
            .iter()
            .map(|&m| prepared.registers[m].clone())
            .collect();
        let mut executed = 0usize;

        for (p, &m) in self.canonical_order.iter().enumerate() {
            if !prepared.present[m] {
                continue;
            }
            let circuit = &self.modality_circuits[m];
            let block = &angles[self.modality_slot_range(m)];
            if stochastic {
                executed += crate::circuits::apply_gates_noisy(
                    &mut registers[p],
                    circuit.gates(),
                    block,
                    noise.p,
                    &mut rng,
                )?;
            } else {
                circuit.apply_to(&mut registers[p], block)?;
                executed += circuit.gates().len();
            }
        }

        let mut fused = tensor_all(&registers)?;
        if let Some(fusion) = &self.fusion {
            let missing = self.canonical_missing_mask(&prepared.present);
            let block = &angles[self.fusion_slot_range()];
            for (gate, &mask) in fusion.circuit.gates().iter().zip(&fusion.gate_modalities) {
                if mask & missing != 0 {
                    continue;
                }
                fused.apply_gate(gate, block)?;
                executed += 1;
                if stochastic {
                    for &q in gate.targets() {
                        if rng.random::<f64>() < noise.p {
                            match rng.random_range(0..3u8) {
                                0 => fused.apply_pauli_x(q)?,
                                1 => fused.apply_pauli_y(q)?,
                                _ => fused.apply_pauli_z(q)?,
                            }
                        }
                    }
                }
            }
        }

        let mut expectations = Vec::with_capacity(self.total_qubits);
        for q in 0..self.total_qubits {
            expectations.push(fused.expect_pauli_z(q)?);
        }
        for (m, spec) in self.specs.iter().enumerate() {
            if !prepared.present[m] {
                let start = self.qubit_offsets[m];
                for e in expectations[start..start + spec.num_qubits].iter_mut() {
                    *e = 0.0;
                }
            }
        }
        damp_expectations(&mut expectations, noise, executed);
        Ok(expectations)
    }

    /// Linear readout over the expectation vector using the readout block of
    /// `params` (weights then biases; see the module-level layout).
    pub fn readout_logits(&self, expectations: &[f64], params: &[f64]) -> Vec<f64> {
        let c = self.num_classes;
        let weights = &params[self.num_angles..self.num_angles + self.total_qubits * c];
        let biases = &params[self.num_angles + self.total_qubits * c..];
        let mut logits = biases.to_vec();
        for (q, &e) in expectations.iter().enumerate() {
            for (cl, logit) in logits.iter_mut().enumerate() {
                *logit += weights[q * c + cl] * e;
            }
        }
        logits
    }

    /// Full pipeline for one sample: returns (logits, expectations).
    pub fn forward(
        &self,
        features: &[Vec<f64>],
        ctx: &ContextVector,
        noise: &NoiseSpec,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let prepared = self.prepare(features, ctx)?;
        let expectations =
            self.expectations_at(&prepared, &self.params[..self.num_angles], noise)?;
        let logits = self.readout_logits(&expectations, &self.params);
        Ok((logits, expectations))
    }

    /// Angle slots that can influence a sample with the given presence
    /// pattern: the blocks of present modalities plus fusion rotations whose
    /// gate survives the missing-modality mask.
    pub fn active_angle_slots(&self, present: &[bool]) -> Vec<usize> {
        let mut slots = Vec::new();
        for m in 0..self.specs.len() {
            if present[m] {
                slots.extend(self.modality_slot_range(m));
            }
        }
        if let Some(fusion) = &self.fusion {
            let missing = self.canonical_missing_mask(present);
            for (gate, &mask) in fusion.circuit.gates().iter().zip(&fusion.gate_modalities) {
                if let Some(slot) = gate.param_slot() {
                    if mask & missing == 0 {
                        slots.push(self.fusion_offset + slot);
                    }
                }
            }
        }
        slots
    }

    /// Mean softmax cross-entropy over a shard, noiseless.
    pub fn local_loss(&self, shard: &[Sample]) -> Result<f64> {
        self.shard_loss(shard, &NoiseSpec::off())
    }

    /// Mean softmax cross-entropy with an explicit noise channel.
    pub fn shard_loss(&self, shard: &[Sample], noise: &NoiseSpec) -> Result<f64> {
        if shard.is_empty() {
            return Err(Error::structural("loss over an empty shard"));
        }
        let mut total = 0.0;
        for (i, sample) in shard.iter().enumerate() {
            let noise_i = per_sample_noise(noise, i);
            let (logits, _) = self
                .forward(&sample.features, &sample.ctx, &noise_i)
                .map_err(|e| e.with_sample(i))?;
            total += cross_entropy(&logits, sample.label).map_err(|e| e.with_sample(i))?;
        }
        Ok(total / shard.len() as f64)
    }

    /// Fraction of samples whose argmax logit matches the label, evaluated
    /// noiselessly with each sample's own context vector.
    pub fn accuracy(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::structural("accuracy over an empty sample set"));
        }
        let noise = NoiseSpec::off();
        let mut hits = 0usize;
        for sample in samples {
            let (logits, _) = self.forward(&sample.features, &sample.ctx, &noise)?;
            if predict(&logits) == sample.label {
                hits += 1;
            }
        }
        Ok(hits as f64 / samples.len() as f64)
    }

    /// Accuracy with only one modality unmasked, over the samples that have
    /// it present. `None` when no sample qualifies.
    pub fn accuracy_single_modality(
        &self,
        samples: &[Sample],
        modality: usize,
    ) -> Result<Option<f64>> {
        if modality >= self.specs.len() {
            return Err(Error::structural(format!(
                "modality {modality} out of range for {} modalities",
                self.specs.len()
            )));
        }
        let noise = NoiseSpec::off();
        let mut solo = ContextVector::new(vec![false; self.specs.len()]);
        solo.set(modality, true);
        let mut hits = 0usize;
        let mut eligible = 0usize;
        for sample in samples {
            if !sample.ctx.is_present(modality) {
                continue;
            }
            eligible += 1;
            let (logits, _) = self.forward(&sample.features, &solo, &noise)?;
            if predict(&logits) == sample.label {
                hits += 1;
            }
        }
        if eligible == 0 {
            return Ok(None);
        }
        Ok(Some(hits as f64 / eligible as f64))
    }

    /// Full-batch gradient descent over the shard for `epochs` passes.
    /// Returns the loss trace: entry 0 is the starting loss, entry e the
    /// loss after e steps (epochs + 1 entries). Modalities missing from a
    /// sample contribute exactly zero gradient to their angle blocks; a
    /// modality missing from every sample is bitwise untouched.
    pub fn local_train(
        &mut self,
        shard: &[Sample],
        epochs: usize,
        opt: &mut OptimizerState,
        noise: &NoiseSpec,
    ) -> Result<Vec<f64>> {
        if epochs == 0 {
            return Err(Error::structural("local_train needs epochs >= 1"));
        }
        let mut trace = Vec::with_capacity(epochs + 1);
        for epoch in 0..epochs {
            let epoch_noise = per_epoch_noise(noise, epoch);
            let (grad, loss) = {
                let objective = ShardObjective::new(self, shard, epoch_noise)?;
                crate::autodiff::full_gradient(&objective, &self.params)
                    .map_err(|e| e.with_context(&format!("epoch {epoch}")))?
            };
            trace.push(loss);
            opt.step(&mut self.params, &grad)?;
        }
        trace.push(self.shard_loss(shard, &per_epoch_noise(noise, epochs))?);
        Ok(trace)
    }

    /// Writes the checkpoint: a JSON header (specs, fusion depth, classes,
    /// projection seed) plus the flat parameter vector.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            modalities: self.specs.clone(),
            fusion_layers: self.fusion_layers,
            num_classes: self.num_classes,
            projection_seed: self.projection_seed,
            params: self.params.clone(),
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &ckpt)?;
        Ok(())
    }

    /// Rebuilds a model from [`save_checkpoint`] output.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        let mut model = MultimodalModel::new(
            ckpt.modalities,
            ckpt.fusion_layers,
            ckpt.num_classes,
            ckpt.projection_seed,
        )?;
        model.set_params(&ckpt.params)?;
        Ok(model)
    }
}

/// Argmax with ties broken toward the lowest class index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate().skip(1) {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

fn per_sample_noise(noise: &NoiseSpec, sample: usize) -> NoiseSpec {
    if noise.mode == NoiseMode::PerGatePauli {
        NoiseSpec {
            seed: derive_seed(noise.seed, "trajectory", sample as u64),
            ..*noise
        }
    } else {
        *noise
    }
}

fn per_epoch_noise(noise: &NoiseSpec, epoch: usize) -> NoiseSpec {
    if noise.mode == NoiseMode::PerGatePauli {
        NoiseSpec {
            seed: derive_seed(noise.seed, "epoch", epoch as u64),
            ..*noise
        }
    } else {
        *noise
    }
}

/// Gaussian projection matrix scaled by `1/sqrt(input_dim)`, derived from
/// the seed and the modality's name (not its position).
fn seeded_projection(spec: &ModalitySpec, projection_seed: u64) -> Vec<f64> {
    let tag = format!("projection:{}", spec.name);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(projection_seed, &tag, 0));
    let rows = spec.projected_dim();
    let cols = spec.input_dim;
    let scale = 1.0 / (cols as f64).sqrt();
    let normal = rand_distr::StandardNormal;
    (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(normal);
            z * scale
        })
        .collect()
}

/// A shard bound to a model for gradient evaluation, with every sample's
/// encoded registers cached up front.
pub struct ShardObjective<'a> {
    model: &'a MultimodalModel,
    prepared: Vec<PreparedSample>,
    labels: Vec<usize>,
    noise: NoiseSpec,
}

impl<'a> ShardObjective<'a> {
    pub fn new(model: &'a MultimodalModel, shard: &[Sample], noise: NoiseSpec) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::structural("objective over an empty shard"));
        }
        let mut prepared = Vec::with_capacity(shard.len());
        let mut labels = Vec::with_capacity(shard.len());
        for (i, sample) in shard.iter().enumerate() {
            if sample.label >= model.num_classes {
                return Err(Error::structural(format!(
                    "sample {i} has label {} but the model has {} classes",
                    sample.label, model.num_classes
                )));
            }
            prepared.push(
                model
                    .prepare(&sample.features, &sample.ctx)
                    .map_err(|e| e.with_sample(i))?,
            );
            labels.push(sample.label);
        }
        Ok(ShardObjective {
            model,
            prepared,
            labels,
            noise,
        })
    }
}

impl ShiftObjective for ShardObjective<'_> {
    fn num_angles(&self) -> usize {
        self.model.num_angles
    }

    fn num_params(&self) -> usize {
        self.model.num_params
    }

    fn num_samples(&self) -> usize {
        self.prepared.len()
    }

    fn expectations(&self, sample: usize, angles: &[f64]) -> Result<Vec<f64>> {
        let noise = per_sample_noise(&self.noise, sample);
        self.model
            .expectations_at(&self.prepared[sample], angles, &noise)
    }

    fn active_angle_slots(&self, sample: usize) -> Vec<usize> {
        self.model
            .active_angle_slots(&self.prepared[sample].present)
    }

    fn tail_backward(
        &self,
        sample: usize,
        expectations: &[f64],
        params: &[f64],
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let logits = self.model.readout_logits(expectations, params);
        let label = self.labels[sample];
        let loss = cross_entropy(&logits, label)?;
        let dlogits = softmax_minus_onehot(&logits, label);
        let c = self.model.num_classes;
        let nq = self.model.total_qubits;
        let weights = &params[self.model.num_angles..self.model.num_angles + nq * c];

        let mut expect_grad = vec![0.0; nq];
        for (q, g) in expect_grad.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (cl, &d) in dlogits.iter().enumerate() {
                acc += weights[q * c + cl] * d;
            }
            *g = acc;
        }

        let mut tail = vec![0.0; nq * c + c];
        for (q, &e) in expectations.iter().enumerate() {
            for (cl, &d) in dlogits.iter().enumerate() {
                tail[q * c + cl] = d * e;
            }
        }
        tail[nq * c..].copy_from_slice(&dlogits);
        Ok((loss, expect_grad, tail))
    }
}
