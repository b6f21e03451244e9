//! Checkpoints, datasets and CSV/JSON artifacts.
//!
//! Checkpoint layout: an 8-byte little-endian header length, a JSON header
//! (`schema_version`, `kind`, `byte_order`, `meta`, and the name and shape of
//! every tensor), then the tensors' `f64` values in little-endian order, row
//! major, in header order.
//!
//! Every CSV begins with a `# schema_version=1` comment line, optionally
//! followed by further `key=value` pairs.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attn_stats::{AttentionBlockStats, EntropyProfile};
use crate::baselines::{EvalReport, SweepRow};
use crate::error::{Error, Result};
use crate::gate::{GateConfig, GateWeights, LayerGate};
use crate::model::{Model, ModelConfig, Weights};
use crate::synth::{DataSpec, Dataset, SynthTask};
use crate::tensor::Matrix;
use crate::training::{TrainLogEntry, WeakLabel};
use crate::SCHEMA_VERSION;

const MAX_HEADER: u64 = 1 << 26;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub schema_version: u32,
    pub kind: String,
    pub byte_order: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_container(path: &Path, kind: &str, meta: serde_json::Value, tensors: &[(String, &Matrix)]) -> Result<()> {
    let header = ContainerHeader {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        byte_order: "little".into(),
        meta,
        tensors: tensors
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                shape: [m.rows(), m.cols()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(8 + json.len() + tensors.iter().map(|(_, m)| 8 * m.data().len()).sum::<usize>());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, m) in tensors {
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::schema("header", "file ends inside the container header")
    } else {
        e.into()
    }
}

pub fn read_container(path: &Path, kind: &str) -> Result<(ContainerHeader, Vec<(String, Matrix)>)> {
    let mut file = BufReader::new(fs::File::open(path)?);
    let mut len = [0u8; 8];
    file.read_exact(&mut len).map_err(truncated)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(Error::schema("header_length", format!("{len} bytes is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    file.read_exact(&mut json).map_err(truncated)?;
    let header: ContainerHeader = serde_json::from_slice(&json)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::schema(
            "schema_version",
            format!("expected {SCHEMA_VERSION}, found {}", header.schema_version),
        ));
    }
    if header.kind != kind {
        return Err(Error::schema("kind", format!("expected '{kind}', found '{}'", header.kind)));
    }
    if header.byte_order != "little" {
        return Err(Error::schema("byte_order", format!("unsupported '{}'", header.byte_order)));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    let expected: usize = header.tensors.iter().map(|t| 8 * t.shape[0] * t.shape[1]).sum();
    if payload.len() != expected {
        return Err(Error::schema(
            "tensors",
            format!("payload holds {} bytes, header describes {expected}", payload.len()),
        ));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut at = 0;
    for t in &header.tensors {
        let n = t.shape[0] * t.shape[1];
        let data = payload[at..at + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        at += 8 * n;
        let m = Matrix::from_vec(t.shape[0], t.shape[1], data)
            .map_err(|e| Error::schema(t.name.clone(), e.to_string()))?;
        tensors.push((t.name.clone(), m));
    }
    Ok((header, tensors))
}

fn take(tensors: &mut Vec<(String, Matrix)>, name: &str) -> Result<Matrix> {
    let i = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::schema(name, "tensor missing"))?;
    Ok(tensors.swap_remove(i).1)
}

fn put(name: &str, dst: &mut Matrix, src: Matrix) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::schema(
            name,
            format!("expected shape {:?}, found {:?}", dst.shape(), src.shape()),
        ));
    }
    *dst = src;
    Ok(())
}

/// A trained model with the symbol table and data description it was trained
/// on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub codebook: Option<Matrix>,
    pub data_spec: Option<DataSpec>,
    pub notes: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    data_spec: Option<DataSpec>,
    #[serde(default)]
    notes: serde_json::Value,
}

impl ModelCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(ModelMeta {
            config: self.model.config,
            data_spec: self.data_spec.clone(),
            notes: self.notes.clone(),
        })?;
        let mut tensors = self.model.weights.tensors();
        if let Some(cb) = &self.codebook {
            tensors.push(("codebook".into(), cb));
        }
        write_container(path, "model", meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, mut tensors) = read_container(path, "model")?;
        let meta: ModelMeta = serde_json::from_value(header.meta)?;
        meta.config.validate()?;
        let mut weights = Weights::zeros(&meta.config);
        for (name, dst) in weights.tensors_mut() {
            let src = take(&mut tensors, &name)?;
            put(&name, dst, src)?;
        }
        let codebook = match tensors.iter().position(|(n, _)| n == "codebook") {
            Some(_) => Some(take(&mut tensors, "codebook")?),
            None => None,
        };
        if let Some((name, _)) = tensors.first() {
            return Err(Error::schema(name.clone(), "unexpected tensor"));
        }
        Ok(Self {
            model: Model::new(meta.config, weights)?,
            codebook,
            data_spec: meta.data_spec,
            notes: meta.notes,
        })
    }
}

/// SHA-256 of the weights in checkpoint order and byte layout.
pub fn weights_digest(model: &Model) -> String {
    let mut h = Sha256::new();
    for (name, m) in model.weights.tensors() {
        h.update(name.as_bytes());
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct GateMeta {
    config: GateConfig,
    input_dim: usize,
}

pub fn save_gates(path: &Path, gates: &GateWeights) -> Result<()> {
    let meta = serde_json::to_value(GateMeta {
        config: gates.config.clone(),
        input_dim: gates.input_dim,
    })?;
    let mut tensors: Vec<(String, &Matrix)> = Vec::new();
    for g in &gates.gates {
        tensors.push((format!("gates.{}.w1", g.layer), &g.w1));
        tensors.push((format!("gates.{}.w2", g.layer), &g.w2));
        if let Some(b) = &g.b1 {
            tensors.push((format!("gates.{}.b1", g.layer), b));
        }
        if let Some(b) = &g.b2 {
            tensors.push((format!("gates.{}.b2", g.layer), b));
        }
    }
    write_container(path, "gates", meta, &tensors)
}

pub fn load_gates(path: &Path) -> Result<GateWeights> {
    let (header, mut tensors) = read_container(path, "gates")?;
    let meta: GateMeta = serde_json::from_value(header.meta)?;
    let mut gates = Vec::new();
    for layer in meta.config.layers() {
        let w1 = take(&mut tensors, &format!("gates.{layer}.w1"))?;
        let w2 = take(&mut tensors, &format!("gates.{layer}.w2"))?;
        let (b1, b2) = if meta.config.bias {
            (
                Some(take(&mut tensors, &format!("gates.{layer}.b1"))?),
                Some(take(&mut tensors, &format!("gates.{layer}.b2"))?),
            )
        } else {
            (None, None)
        };
        gates.push(LayerGate { layer, w1, w2, b1, b2 });
    }
    if let Some((name, _)) = tensors.first() {
        return Err(Error::schema(name.clone(), "unexpected tensor"));
    }
    Ok(GateWeights {
        config: meta.config,
        input_dim: meta.input_dim,
        gates,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    schema_version: u32,
    seed: u64,
    spec: DataSpec,
}

fn check_version(found: u32, what: &str) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::schema(
            "schema_version",
            format!("{what}: expected {SCHEMA_VERSION}, found {found}"),
        ));
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| {
            Error::schema(format!("{}:{}", path.display(), i + 1), e.to_string())
        })?);
    }
    Ok(rows)
}

/// Writes `spec.json` and one JSON-lines file per split into `dir`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        seed: data.seed,
        spec: data.spec.clone(),
    };
    fs::write(dir.join("spec.json"), serde_json::to_vec_pretty(&manifest)?)?;
    write_jsonl(&dir.join("train.jsonl"), &data.train)?;
    write_jsonl(&dir.join("val.jsonl"), &data.val)?;
    write_jsonl(&dir.join("test.jsonl"), &data.test)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("spec.json"))?)?;
    check_version(manifest.schema_version, "spec.json")?;
    manifest.spec.validate()?;
    let split = |name: &str| -> Result<Vec<SynthTask>> {
        let rows: Vec<SynthTask> = read_jsonl(&dir.join(name))?;
        for r in &rows {
            r.validate(&manifest.spec)?;
        }
        Ok(rows)
    };
    Ok(Dataset {
        train: split("train.jsonl")?,
        val: split("val.jsonl")?,
        test: split("test.jsonl")?,
        spec: manifest.spec,
        seed: manifest.seed,
    })
}

/// JSON file loaded with a field-level diagnostic on failure.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::schema(path.display().to_string(), e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn csv_bytes(extra: &[(&str, String)], header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write!(out, "# schema_version={SCHEMA_VERSION}")?;
    for (k, v) in extra {
        write!(out, ",{k}={v}")?;
    }
    out.push(b'\n');
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_csv(path: &Path, extra: &[(&str, String)], header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    fs::write(path, csv_bytes(extra, header, rows)?)?;
    Ok(())
}

/// Parses the `key=value` pairs of a CSV's leading comment line.
pub fn csv_metadata(path: &Path) -> Result<Vec<(String, String)>> {
    let mut first = String::new();
    BufReader::new(fs::File::open(path)?).read_line(&mut first)?;
    let body = first
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| Error::schema("schema_version", format!("{} lacks the schema comment", path.display())))?;
    let pairs: Vec<(String, String)> = body
        .split(',')
        .filter_map(|kv| kv.trim().split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let version = pairs
        .iter()
        .find(|(k, _)| k == "schema_version")
        .and_then(|(_, v)| v.parse::<u32>().ok())
        .ok_or_else(|| Error::schema("schema_version", format!("{} lacks schema_version", path.display())))?;
    check_version(version, &path.display().to_string())?;
    Ok(pairs)
}

fn read_csv_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    csv_metadata(path)?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::schema("header", format!("expected {header:?}, found {found:?}")));
    }
    r.records().map(|x| x.map_err(Error::from)).collect()
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    rec.get(i)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::schema(name, format!("unparseable value {:?}", rec.get(i))))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_stats_csv(path: &Path, stats: &[AttentionBlockStats]) -> Result<()> {
    let mut rows = Vec::new();
    for s in stats {
        for (block, m) in [("vis_self", s.vis_self), ("cross", s.cross), ("text_self", s.text_self)] {
            rows.push(vec![
                s.layer.to_string(),
                block.to_string(),
                opt(m.map(|m| m.mean)),
                opt(m.map(|m| m.var)),
            ]);
        }
    }
    write_csv(path, &[], &["layer", "block", "mean", "var"], &rows)
}

/// `exited` marks layers that ran after the visual tokens were removed.
pub fn write_entropy_csv(path: &Path, profiles: &[(EntropyProfile, bool)]) -> Result<()> {
    let mut rows = Vec::new();
    for (p, exited) in profiles {
        rows.push(vec![p.layer.to_string(), "cross".into(), opt(p.cross_entropy_bits), exited.to_string()]);
        rows.push(vec![
            p.layer.to_string(),
            "text_self".into(),
            p.text_self_entropy_bits.to_string(),
            exited.to_string(),
        ]);
    }
    write_csv(path, &[], &["layer", "metric", "value", "exited"], &rows)
}

pub fn write_sweep_csv(path: &Path, mode: &str, rows: &[SweepRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.layer_or_ratio.to_string(),
                r.accuracy.to_string(),
                r.flops.to_string(),
                r.reduction_pct.to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        &[("mode", mode.to_string())],
        &["layer_or_ratio", "accuracy", "flops", "reduction_pct"],
        &rows,
    )
}

pub const LABEL_HEADER: [&str; 5] = ["sample_id", "layer", "y", "rho_base", "rho_exit"];

pub fn write_labels_csv(path: &Path, alpha: f64, labels: &[WeakLabel]) -> Result<()> {
    let rows: Vec<Vec<String>> = labels
        .iter()
        .map(|l| {
            vec![
                l.sample_id.to_string(),
                l.layer.to_string(),
                u8::from(l.y).to_string(),
                l.rho_base.to_string(),
                l.rho_exit.to_string(),
            ]
        })
        .collect();
    write_csv(path, &[("alpha", alpha.to_string())], &LABEL_HEADER, &rows)
}

/// Labels and the `alpha` they were generated with.
pub fn read_labels_csv(path: &Path) -> Result<(f64, Vec<WeakLabel>)> {
    let alpha: f64 = csv_metadata(path)?
        .into_iter()
        .find(|(k, _)| k == "alpha")
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| Error::schema("alpha", "label file does not record alpha"))?;
    let mut labels = Vec::new();
    for rec in read_csv_rows(path, &LABEL_HEADER)? {
        let y: u8 = field(&rec, 2, "y")?;
        if y > 1 {
            return Err(Error::schema("y", format!("expected 0 or 1, found {y}")));
        }
        let rho_base: f64 = field(&rec, 3, "rho_base")?;
        let rho_exit: f64 = field(&rec, 4, "rho_exit")?;
        let tau = alpha * rho_base;
        labels.push(WeakLabel {
            sample_id: field(&rec, 0, "sample_id")?,
            layer: field(&rec, 1, "layer")?,
            y: y == 1,
            rho_base,
            rho_exit,
            tau,
            answers_equal: y == 1 || rho_exit < tau,
        });
    }
    Ok((alpha, labels))
}

pub fn write_train_log(path: &Path, log: &[TrainLogEntry]) -> Result<()> {
    write_jsonl(path, log)
}

pub fn read_train_log(path: &Path) -> Result<Vec<TrainLogEntry>> {
    read_jsonl(path)
}

/// One row per method: accuracy, mean prefill operations, reduction and mean
/// exit layer.
pub fn write_compare_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.accuracy.to_string(),
                r.flops.mean_with_exit.to_string(),
                r.flops.reduction_pct.to_string(),
                opt(r.mean_exit_layer),
            ]
        })
        .collect();
    write_csv(
        path,
        &[],
        &["method", "accuracy", "flops", "reduction_pct", "mean_exit_layer"],
        &rows,
    )
}
