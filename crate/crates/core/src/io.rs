//! On-disk formats: dataset JSON Lines, manifest JSON, binary checkpoints with
//! a JSON header, metrics and aggregate CSV, run metadata JSON.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::AggregateRow;
use crate::model::{ModelBundle, ModelConfig, ParamStore, Trajectory, CHECKPOINT_FORMAT_VERSION};
use crate::objectives::CompositionSpec;
use crate::synthdata::{Dataset, DatasetManifest, PointMassConfig, SubskillSpec, DEFAULT_DEMOS_PER_SKILL};
use crate::tensor::Tensor;
use crate::training::MetricsRow;

pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_META_FILE: &str = "run_meta.json";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SKVAECKP";

#[derive(Serialize, Deserialize)]
struct TrajectoryLine {
    skill: String,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
}

fn to_line(t: &Trajectory) -> TrajectoryLine {
    TrajectoryLine {
        skill: t.skill_id.clone(),
        states: t.states.to_rows(),
        actions: t.actions.to_rows(),
    }
}

fn rows_to_tensor(rows: &[Vec<f64>], what: &str, line: usize) -> Result<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(Error::Format(format!("line {line}: {what} must be a non-empty rectangular array")));
    }
    Ok(Tensor::from_rows(rows))
}

pub fn write_trajectories<W: Write>(mut w: W, trajectories: &[Trajectory]) -> Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut w, &to_line(t))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories<R: BufRead>(r: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: TrajectoryLine = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        let states = rows_to_tensor(&l.states, "states", i + 1)?;
        let actions = rows_to_tensor(&l.actions, "actions", i + 1)?;
        let t = Trajectory::new(states, actions, l.skill)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(t);
    }
    Ok(out)
}

pub fn write_dataset_jsonl(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    write_trajectories(BufWriter::new(File::create(path)?), trajectories)
}

pub fn read_dataset_jsonl(path: &Path) -> Result<Vec<Trajectory>> {
    read_trajectories(BufReader::new(File::open(path)?))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    format_version: u32,
    subskills: Vec<SubskillSpec>,
    compositions: BTreeMap<String, Vec<String>>,
    seed: u64,
    #[serde(default = "default_demos")]
    demos_per_skill: usize,
    #[serde(default)]
    point_mass: PointMassConfig,
}

fn default_demos() -> usize {
    DEFAULT_DEMOS_PER_SKILL
}

/// Manifest plus the simulator settings it was generated with.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestDoc {
    pub manifest: DatasetManifest,
    pub point_mass: PointMassConfig,
}

fn check_version(found: u32, what: &str) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{what} format_version {found} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

pub fn manifest_to_json(doc: &ManifestDoc) -> Result<String> {
    let f = ManifestFile {
        format_version: FORMAT_VERSION,
        subskills: doc.manifest.subskills.clone(),
        compositions: doc
            .manifest
            .compositions
            .iter()
            .map(|c| (c.composite_id.clone(), c.subskill_ids.clone()))
            .collect(),
        seed: doc.manifest.seed,
        demos_per_skill: doc.manifest.demos_per_skill,
        point_mass: doc.point_mass.clone(),
    };
    Ok(serde_json::to_string_pretty(&f)? + "\n")
}

pub fn manifest_from_json(text: &str) -> Result<ManifestDoc> {
    let f: ManifestFile = serde_json::from_str(text).map_err(|e| Error::Validation(format!("manifest: {e}")))?;
    check_version(f.format_version, "manifest")?;
    let compositions = f
        .compositions
        .into_iter()
        .map(|(id, subs)| CompositionSpec::new(id, subs))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        subskills: f.subskills,
        compositions,
        demos_per_skill: f.demos_per_skill,
        seed: f.seed,
    };
    manifest.validate()?;
    f.point_mass.validate()?;
    Ok(ManifestDoc {
        manifest,
        point_mass: f.point_mass,
    })
}

pub fn read_manifest(path: &Path) -> Result<ManifestDoc> {
    manifest_from_json(&std::fs::read_to_string(path)?)
}

pub fn write_manifest(path: &Path, doc: &ManifestDoc) -> Result<()> {
    std::fs::write(path, manifest_to_json(doc)?)?;
    Ok(())
}

/// Writes `dataset.jsonl` and `manifest.json` into `dir`.
pub fn write_dataset_dir(dir: &Path, doc: &ManifestDoc, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_dataset_jsonl(&dir.join(DATASET_FILE), &dataset.trajectories)?;
    write_manifest(&dir.join(MANIFEST_FILE), doc)
}

/// Reads a dataset directory; compositions come from its manifest.
pub fn read_dataset_dir(dir: &Path) -> Result<(ManifestDoc, Dataset)> {
    let doc = read_manifest(&dir.join(MANIFEST_FILE))?;
    let trajectories = read_dataset_jsonl(&dir.join(DATASET_FILE))?;
    let dataset = Dataset {
        trajectories,
        compositions: doc.manifest.compositions.clone(),
    };
    dataset.validate()?;
    Ok((doc, dataset))
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    model_config: ModelConfig,
    seed: u64,
    params: Vec<ParamHeader>,
}

/// A saved model with the seed it was initialized from.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub seed: u64,
}

/// Layout: 8-byte magic, u32 LE header length, header JSON, then each
/// parameter's values as f64 LE in header order.
pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    let header = CheckpointHeader {
        format_version: ckpt.bundle.format_version,
        model_config: ckpt.bundle.config.clone(),
        seed: ckpt.seed,
        params: ckpt
            .bundle
            .params
            .iter()
            .map(|p| ParamHeader {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for p in ckpt.bundle.params.iter() {
        for x in p.value.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint is truncated".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|_| Error::Format("checkpoint is truncated".into()))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)
        .map_err(|_| Error::Format("checkpoint header is truncated".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format_version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
            header.format_version
        )));
    }
    let mut params = ParamStore::default();
    let mut buf = [0u8; 8];
    for p in &header.params {
        let mut data = Vec::with_capacity(p.rows * p.cols);
        for _ in 0..p.rows * p.cols {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("checkpoint data for '{}' is truncated", p.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        if params.index_of(&p.name).is_some() {
            return Err(Error::Format(format!("duplicate parameter '{}'", p.name)));
        }
        params.push(p.name.clone(), Tensor::from_vec(p.rows, p.cols, data));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint data", rest.len())));
    }
    let bundle = ModelBundle {
        config: header.model_config,
        params,
        format_version: header.format_version,
    };
    bundle
        .validate()
        .map_err(|e| Error::Validation(format!("checkpoint does not match its model config: {e}")))?;
    Ok(Checkpoint {
        bundle,
        seed: header.seed,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

/// Exact header of a metrics CSV.
pub const METRICS_HEADER: [&str; 12] = [
    "run_id",
    "objective",
    "seed",
    "epoch",
    "train_loss",
    "action_nll",
    "state_nll",
    "kl",
    "mi_term",
    "eval_mse_sum_embedding",
    "eval_mse_encoded",
    "additivity_error",
];

pub const AGGREGATE_HEADER: [&str; 6] = ["objective", "epoch", "metric", "mean", "std", "n_seeds"];

pub fn write_metrics<W: Write>(w: W, rows: &[MetricsRow]) -> Result<()> {
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    csv.write_record(METRICS_HEADER)?;
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_metrics<R: Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut csv = csv::Reader::from_reader(r);
    let header: Vec<String> = csv.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::Validation(format!(
            "metrics columns {header:?} do not match the expected schema {METRICS_HEADER:?}"
        )));
    }
    let mut rows = Vec::new();
    for rec in csv.deserialize() {
        let row: MetricsRow = rec.map_err(|e| Error::Validation(format!("metrics row: {e}")))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_metrics(BufWriter::new(File::create(path)?), rows)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    read_metrics(BufReader::new(File::open(path)?)).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_aggregate<W: Write>(w: W, rows: &[AggregateRow]) -> Result<()> {
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    csv.write_record(AGGREGATE_HEADER)?;
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_aggregate<R: Read>(r: R) -> Result<Vec<AggregateRow>> {
    let mut csv = csv::Reader::from_reader(r);
    let header: Vec<String> = csv.headers()?.iter().map(str::to_string).collect();
    if header != AGGREGATE_HEADER {
        return Err(Error::Validation(format!("aggregate columns {header:?} are not {AGGREGATE_HEADER:?}")));
    }
    csv.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    write_aggregate(BufWriter::new(File::create(path)?), rows)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Provenance written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub command: String,
    pub format_version: u32,
    pub seed: Option<u64>,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
}
