//! Run directories: JSON manifests next to little-endian `f64` blocks.
//!
//! A dataset directory holds `manifest.json` and `data.bin`; a checkpoint
//! directory holds `checkpoint.json` and `params.bin`. Every block is
//! protected by a SHA-256 checksum recorded in its JSON file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::darcy::{sample_dataset, DarcyProblem, ExpansionSpec};
use crate::error::{Error, Result};
use crate::field::{Field, GridGeometry, InnerProductSpec};
use crate::nn::Mlp;
use crate::ns_relu::{build_step_net, unroll, BlockInfo, Multiplier, UnrolledNet};
use crate::pca::PcaBasis;
use crate::pcanet::{assemble, Partition, PcaNetModel, Provenance};
use crate::rng;
use crate::spectral_ns::{run, NsRunConfig, SpectralField};
use rand::RngCore;
use rayon::prelude::*;

pub const SCHEMA_VERSION: u32 = 1;
pub const CODE_VERSION: &str = concat!("pcanet ", env!("CARGO_PKG_VERSION"));

const DATA_FILE: &str = "data.bin";
const MANIFEST_FILE: &str = "manifest.json";
const PARAMS_FILE: &str = "params.bin";
const CHECKPOINT_FILE: &str = "checkpoint.json";

pub fn encode_f64(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::invalid(format!("block length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write a block and return its checksum.
pub fn write_block(path: &Path, values: &[f64]) -> Result<String> {
    let bytes = encode_f64(values);
    write_file(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Read a block, refusing it unless the checksum matches.
pub fn read_block(path: &Path, checksum: &str) -> Result<Vec<f64>> {
    let bytes = read_file(path)?;
    let found = sha256_hex(&bytes);
    if found != checksum {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: checksum.to_string(),
            found,
        });
    }
    decode_f64(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Generator {
    Darcy {
        expansion: ExpansionSpec,
        /// Constant right-hand side.
        rhs: f64,
    },
    Ns {
        config: NsRunConfig,
        /// Grid points per axis of the stored velocity fields.
        grid: usize,
        decay: f64,
        /// `l2` norm of every initial condition.
        norm: f64,
    },
    Synthetic {
        description: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub input_geometry: GridGeometry,
    pub input_channels: usize,
    pub output_geometry: GridGeometry,
    pub output_channels: usize,
    pub sample_count: usize,
    pub generator: Generator,
    pub seed: u64,
    pub partition: Partition,
    /// SHA-256 of `data.bin`; filled in by [`write_dataset`].
    pub checksum: String,
    pub code_version: String,
}

impl DatasetManifest {
    pub fn new(inputs: &[Field], outputs: &[Field], generator: Generator, seed: u64, partition: Partition) -> Result<Self> {
        let (first_in, first_out) = match (inputs.first(), outputs.first()) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::invalid("dataset needs at least one sample")),
        };
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            input_geometry: *first_in.geometry(),
            input_channels: first_in.channels(),
            output_geometry: *first_out.geometry(),
            output_channels: first_out.channels(),
            sample_count: inputs.len(),
            generator,
            seed,
            partition,
            checksum: String::new(),
            code_version: CODE_VERSION.to_string(),
        })
    }

    fn input_len(&self) -> usize {
        self.input_geometry.total_points() * self.input_channels
    }

    fn output_len(&self) -> usize {
        self.output_geometry.total_points() * self.output_channels
    }
}

/// Samples are stored in order, each as its input values then its output
/// values. Returns the manifest with the checksum filled in.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, inputs: &[Field], outputs: &[Field]) -> Result<DatasetManifest> {
    if inputs.len() != manifest.sample_count || outputs.len() != manifest.sample_count {
        return Err(Error::DimensionMismatch {
            expected: manifest.sample_count,
            found: inputs.len().min(outputs.len()),
        });
    }
    manifest.partition.validate(manifest.sample_count)?;
    let mut values = Vec::with_capacity(manifest.sample_count * (manifest.input_len() + manifest.output_len()));
    for (u, w) in inputs.iter().zip(outputs) {
        if *u.geometry() != manifest.input_geometry
            || u.channels() != manifest.input_channels
            || *w.geometry() != manifest.output_geometry
            || w.channels() != manifest.output_channels
        {
            return Err(Error::GeometryMismatch("sample shape differs from the manifest".into()));
        }
        values.extend_from_slice(u.values());
        values.extend_from_slice(w.values());
    }
    ensure_dir(dir)?;
    let mut out = manifest.clone();
    out.checksum = write_block(&dir.join(DATA_FILE), &values)?;
    write_json(&dir.join(MANIFEST_FILE), &out)?;
    Ok(out)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let m: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(m.schema_version));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Field>, Vec<Field>)> {
    let m = read_manifest(dir)?;
    let values = read_block(&dir.join(DATA_FILE), &m.checksum)?;
    let (a, b) = (m.input_len(), m.output_len());
    if values.len() != m.sample_count * (a + b) {
        return Err(Error::DimensionMismatch {
            expected: m.sample_count * (a + b),
            found: values.len(),
        });
    }
    let mut inputs = Vec::with_capacity(m.sample_count);
    let mut outputs = Vec::with_capacity(m.sample_count);
    for chunk in values.chunks_exact(a + b) {
        inputs.push(Field::new(m.input_geometry, m.input_channels, chunk[..a].to_vec())?);
        outputs.push(Field::new(m.output_geometry, m.output_channels, chunk[a..].to_vec())?);
    }
    Ok((m, inputs, outputs))
}

/// Darcy pairs `(a, w)` on an `points x points` interior grid with unit load.
pub fn generate_darcy(expansion: &ExpansionSpec, points: usize, n: usize, seed: u64) -> Result<(Vec<Field>, Vec<Field>)> {
    let problem = DarcyProblem::new(GridGeometry::unit_box(2, points)?, expansion.clone())?;
    let d = sample_dataset(&problem, n, seed)?;
    Ok((d.inputs, d.outputs))
}

/// Velocity on a `grid x grid` torus grid, two channels.
pub fn velocity_field(u: &SpectralField, grid: usize) -> Result<Field> {
    let [a, b] = u.to_grid(grid)?;
    let mut values = a;
    values.extend(b);
    Field::new(GridGeometry::torus(2, grid)?, 2, values)
}

/// Pairs `(u_0, u(T))` from random divergence-free initial data.
pub fn generate_ns(config: &NsRunConfig, grid: usize, decay: f64, norm: f64, n: usize, seed: u64) -> Result<(Vec<Field>, Vec<Field>)> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    let pairs: Vec<(Field, Field)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let s = rng::substream(seed, k as u64).next_u64();
            let u0 = SpectralField::random_divergence_free(config.k_max, decay, norm, s);
            let (u1, _) = run(&u0, config)?;
            Ok((velocity_field(&u0, grid)?, velocity_field(&u1, grid)?))
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Rebuild a dataset from its manifest alone.
pub fn regenerate(manifest: &DatasetManifest) -> Result<(Vec<Field>, Vec<Field>)> {
    match &manifest.generator {
        Generator::Darcy { expansion, .. } => generate_darcy(
            expansion,
            manifest.input_geometry.points_per_dim(),
            manifest.sample_count,
            manifest.seed,
        ),
        Generator::Ns { config, grid, decay, norm } => {
            generate_ns(config, *grid, *decay, *norm, manifest.sample_count, manifest.seed)
        }
        Generator::Synthetic { description } => {
            Err(Error::invalid(format!("synthetic dataset `{description}` cannot be regenerated")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    PcaBasis,
    Mlp,
    PcaNetModel,
    UnrolledNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub kind: CheckpointKind,
    pub header: Value,
    pub checksum: String,
    /// Manifests and configs this artifact was derived from, oldest first.
    pub provenance: Vec<Value>,
    pub code_version: String,
}

fn write_checkpoint(dir: &Path, kind: CheckpointKind, header: Value, params: &[f64], provenance: Vec<Value>) -> Result<Checkpoint> {
    ensure_dir(dir)?;
    let checksum = write_block(&dir.join(PARAMS_FILE), params)?;
    let ck = Checkpoint {
        schema_version: SCHEMA_VERSION,
        kind,
        header,
        checksum,
        provenance,
        code_version: CODE_VERSION.to_string(),
    };
    write_json(&dir.join(CHECKPOINT_FILE), &ck)?;
    Ok(ck)
}

pub fn read_checkpoint(dir: &Path) -> Result<(Checkpoint, Vec<f64>)> {
    let ck: Checkpoint = read_json(&dir.join(CHECKPOINT_FILE))?;
    if ck.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(ck.schema_version));
    }
    let params = read_block(&dir.join(PARAMS_FILE), &ck.checksum)?;
    Ok((ck, params))
}

fn expect_kind(ck: &Checkpoint, kind: CheckpointKind) -> Result<()> {
    if ck.kind != kind {
        return Err(Error::invalid(format!("checkpoint holds {:?}, expected {kind:?}", ck.kind)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BasisHeader {
    spec: InnerProductSpec,
    geometry: GridGeometry,
    channels: usize,
    dim: usize,
    eigenvalues: Vec<f64>,
    sample_count: usize,
    centered: bool,
}

fn basis_parts(basis: &PcaBasis) -> (BasisHeader, Vec<f64>) {
    let mut values: Vec<f64> = basis.basis().iter().flat_map(|f| f.values().iter().copied()).collect();
    if let Some(m) = basis.mean() {
        values.extend_from_slice(m.values());
    }
    (
        BasisHeader {
            spec: *basis.spec(),
            geometry: *basis.geometry(),
            channels: basis.channels(),
            dim: basis.dim(),
            eigenvalues: basis.eigenvalues().to_vec(),
            sample_count: basis.sample_count(),
            centered: basis.mean().is_some(),
        },
        values,
    )
}

fn basis_len(h: &BasisHeader) -> usize {
    (h.dim + usize::from(h.centered)) * h.geometry.total_points() * h.channels
}

fn basis_from_parts(h: &BasisHeader, values: &[f64]) -> Result<PcaBasis> {
    if values.len() != basis_len(h) {
        return Err(Error::DimensionMismatch {
            expected: basis_len(h),
            found: values.len(),
        });
    }
    let per = h.geometry.total_points() * h.channels;
    let fields: Vec<Field> = values
        .chunks_exact(per)
        .map(|c| Field::new(h.geometry, h.channels, c.to_vec()))
        .collect::<Result<_>>()?;
    let mean = if h.centered { fields.last().cloned() } else { None };
    PcaBasis::from_parts(h.spec, h.eigenvalues.clone(), fields[..h.dim].to_vec(), h.sample_count)?.with_mean(mean)
}

pub fn save_basis(dir: &Path, basis: &PcaBasis, provenance: Vec<Value>) -> Result<Checkpoint> {
    let (h, values) = basis_parts(basis);
    write_checkpoint(dir, CheckpointKind::PcaBasis, serde_json::to_value(h)?, &values, provenance)
}

pub fn load_basis(dir: &Path) -> Result<PcaBasis> {
    let (ck, params) = read_checkpoint(dir)?;
    expect_kind(&ck, CheckpointKind::PcaBasis)?;
    basis_from_parts(&serde_json::from_value(ck.header)?, &params)
}

pub fn save_mlp(dir: &Path, net: &Mlp, provenance: Vec<Value>) -> Result<Checkpoint> {
    write_checkpoint(dir, CheckpointKind::Mlp, json!({ "widths": net.widths() }), &net.parameters(), provenance)
}

fn widths_of(header: &Value) -> Result<Vec<usize>> {
    Ok(serde_json::from_value(header["widths"].clone())?)
}

pub fn load_mlp(dir: &Path) -> Result<Mlp> {
    let (ck, params) = read_checkpoint(dir)?;
    expect_kind(&ck, CheckpointKind::Mlp)?;
    Mlp::from_parameters(&widths_of(&ck.header)?, &params)
}

pub fn save_model(dir: &Path, model: &PcaNetModel, provenance: Vec<Value>) -> Result<Checkpoint> {
    let (hx, mut values) = basis_parts(model.input_basis());
    let (hy, vy) = basis_parts(model.output_basis());
    values.extend(vy);
    values.extend(model.net().parameters());
    let header = json!({
        "input": hx,
        "output": hy,
        "widths": model.net().widths(),
        "provenance": model.provenance,
    });
    write_checkpoint(dir, CheckpointKind::PcaNetModel, header, &values, provenance)
}

pub fn load_model(dir: &Path) -> Result<PcaNetModel> {
    let (ck, params) = read_checkpoint(dir)?;
    expect_kind(&ck, CheckpointKind::PcaNetModel)?;
    let hx: BasisHeader = serde_json::from_value(ck.header["input"].clone())?;
    let hy: BasisHeader = serde_json::from_value(ck.header["output"].clone())?;
    let (nx, ny) = (basis_len(&hx), basis_len(&hy));
    if params.len() < nx + ny {
        return Err(Error::DimensionMismatch {
            expected: nx + ny,
            found: params.len(),
        });
    }
    let bx = basis_from_parts(&hx, &params[..nx])?;
    let by = basis_from_parts(&hy, &params[nx..nx + ny])?;
    let net = Mlp::from_parameters(&widths_of(&ck.header)?, &params[nx + ny..])?;
    let mut model = assemble(bx, by, net)?;
    model.provenance = serde_json::from_value::<Provenance>(ck.header["provenance"].clone())?;
    Ok(model)
}

/// Stores the run config, the block list and the product network; the dense
/// linear blocks are rebuilt on load and the block list is checked.
pub fn save_unrolled(dir: &Path, net: &UnrolledNet, config: &NsRunConfig, provenance: Vec<Value>) -> Result<Checkpoint> {
    let step = net.step();
    let product = step.nonlinearity().product();
    let header = json!({
        "config": config,
        "multiplier": step.nonlinearity().multiplier(),
        "steps": net.steps(),
        "iterations": step.schedule().iterations,
        "blocks": step.block_list(),
        "product_widths": product.mlp().widths(),
        "size": net.size(),
        "depth": net.depth(),
    });
    write_checkpoint(dir, CheckpointKind::UnrolledNet, header, &product.mlp().parameters(), provenance)
}

pub fn load_unrolled(dir: &Path) -> Result<(UnrolledNet, NsRunConfig)> {
    let (ck, params) = read_checkpoint(dir)?;
    expect_kind(&ck, CheckpointKind::UnrolledNet)?;
    let config: NsRunConfig = serde_json::from_value(ck.header["config"].clone())?;
    let multiplier: Multiplier = serde_json::from_value(ck.header["multiplier"].clone())?;
    let steps: usize = serde_json::from_value(ck.header["steps"].clone())?;
    let blocks: Vec<BlockInfo> = serde_json::from_value(ck.header["blocks"].clone())?;
    let step = build_step_net(&config, multiplier)?;
    if step.block_list() != blocks || step.nonlinearity().product().mlp().parameters() != params {
        return Err(Error::invalid("rebuilt network does not match the stored structure"));
    }
    Ok((unroll(step, steps), config))
}

/// `dir/name`, for run directories.
pub fn run_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::WeightInit;
    use crate::pca::{empirical_pca, empirical_pca_with, PcaOptions};
    use crate::pcanet::identity_net;

    fn darcy_data(n: usize) -> (Generator, Vec<Field>, Vec<Field>) {
        let spec = ExpansionSpec::new(1.0, 4, 1.0, 1.0).unwrap();
        let (a, w) = generate_darcy(&spec, 7, n, 3).unwrap();
        (Generator::Darcy { expansion: spec, rhs: 1.0 }, a, w)
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (g, inputs, outputs) = darcy_data(3);
        let m = DatasetManifest::new(&inputs, &outputs, g, 3, Partition::contiguous(1, 1, 1)).unwrap();
        let written = write_dataset(dir.path(), &m, &inputs, &outputs).unwrap();
        let (back, a, b) = read_dataset(dir.path()).unwrap();
        assert_eq!(back, written);
        for (x, y) in a.iter().zip(&inputs).chain(b.iter().zip(&outputs)) {
            let same = x.values().iter().zip(y.values()).all(|(p, q)| p.to_bits() == q.to_bits());
            assert!(same);
        }
    }

    #[test]
    fn regeneration_from_the_manifest_matches() {
        let dir = tempfile::tempdir().unwrap();
        let (g, inputs, outputs) = darcy_data(3);
        let m = DatasetManifest::new(&inputs, &outputs, g, 3, Partition::contiguous(1, 1, 1)).unwrap();
        write_dataset(dir.path(), &m, &inputs, &outputs).unwrap();
        let (m, a, b) = read_dataset(dir.path()).unwrap();
        let (ra, rb) = regenerate(&m).unwrap();
        for (x, y) in a.iter().zip(&ra).chain(b.iter().zip(&rb)) {
            assert!(x.max_abs_diff(y).unwrap() <= 1e-15);
        }

        let cfg = NsRunConfig {
            k_max: 2,
            t_final: 0.02,
            ..NsRunConfig::default()
        };
        let (u, w) = generate_ns(&cfg, 8, 1.0, 0.5, 2, 9).unwrap();
        let gen = Generator::Ns {
            config: cfg,
            grid: 8,
            decay: 1.0,
            norm: 0.5,
        };
        let m = DatasetManifest::new(&u, &w, gen, 9, Partition::contiguous(1, 1, 0)).unwrap();
        let (ru, rw) = regenerate(&m).unwrap();
        assert_eq!((ru, rw), (u, w));
    }

    #[test]
    fn truncated_data_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let (g, inputs, outputs) = darcy_data(3);
        let m = DatasetManifest::new(&inputs, &outputs, g, 3, Partition::contiguous(1, 1, 1)).unwrap();
        write_dataset(dir.path(), &m, &inputs, &outputs).unwrap();
        let path = dir.path().join(DATA_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn unknown_schema_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (g, inputs, outputs) = darcy_data(3);
        let mut m = DatasetManifest::new(&inputs, &outputs, g, 3, Partition::contiguous(1, 1, 1)).unwrap();
        m.schema_version = 99;
        write_dataset(dir.path(), &m, &inputs, &outputs).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Schema(99))));
    }

    #[test]
    fn checkpoints_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, inputs, outputs) = darcy_data(12);
        let bx = empirical_pca_with(&inputs, InnerProductSpec::L2, 3, PcaOptions { center: true }).unwrap();
        let by = empirical_pca(&outputs, InnerProductSpec::H10, 3).unwrap();
        save_basis(&dir.path().join("bx"), &bx, vec![]).unwrap();
        let back = load_basis(&dir.path().join("bx")).unwrap();
        assert_eq!(back.encode(&inputs[0]).unwrap(), bx.encode(&inputs[0]).unwrap());

        let net = Mlp::init(&[3, 5, 3], WeightInit::He, 2).unwrap();
        save_mlp(&dir.path().join("net"), &net, vec![json!({"note": "test"})]).unwrap();
        assert_eq!(load_mlp(&dir.path().join("net")).unwrap(), net);

        let model = assemble(bx, by, identity_net(3).unwrap()).unwrap();
        save_model(&dir.path().join("model"), &model, vec![]).unwrap();
        let back = load_model(&dir.path().join("model")).unwrap();
        let a = model.predict(&inputs[1]).unwrap();
        let b = back.predict(&inputs[1]).unwrap();
        assert_eq!(a, b);
        assert!(load_mlp(&dir.path().join("model")).is_err());
    }

    #[test]
    fn unrolled_network_checkpoint_rebuilds() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NsRunConfig {
            k_max: 2,
            t_final: 0.02,
            ..NsRunConfig::default()
        };
        let net = unroll(build_step_net(&cfg, Multiplier::Network).unwrap(), 2);
        save_unrolled(dir.path(), &net, &cfg, vec![]).unwrap();
        let (back, c) = load_unrolled(dir.path()).unwrap();
        assert_eq!(c, cfg);
        assert_eq!(back.size(), net.size());
    }

    #[test]
    fn f64_blocks_are_little_endian() {
        assert_eq!(encode_f64(&[1.0]), 1.0f64.to_le_bytes().to_vec());
        assert!(decode_f64(&[0u8; 7]).is_err());
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
