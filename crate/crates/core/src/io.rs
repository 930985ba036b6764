//! On-disk formats: checkpoints, dataset manifests and payloads, and
//! byte-stable JSON.

use std::fs;
use std::io::{self, BufRead, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::fewshot::{Dataset, Sample, TaskType};
use crate::params::ParamStore;
use crate::peft::{Model, PeftMethod};
use crate::tensor::Tensor;
use crate::vit::BackboneConfig;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Pretty JSON with floats in `{:.16e}` form: 17 significant digits, so every
/// value round-trips and the text never depends on shortest-repr heuristics.
struct StableFormatter {
    pretty: PrettyFormatter<'static>,
}

impl Formatter for StableFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(value))
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_object_value(w)
    }
}

/// Sorted keys, fixed float format, trailing newline.
pub fn to_stable_json<T: Serialize>(value: &T) -> Result<String> {
    // Going through Value sorts object keys (its map is ordered).
    let v = serde_json::to_value(value)?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(
        &mut out,
        StableFormatter {
            pretty: PrettyFormatter::new(),
        },
    );
    v.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

pub fn write_stable_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_stable_json(value)?.as_bytes())
}

const CHECKPOINT_FORMAT: &str = "eptlab-checkpoint/1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section that follows the header line.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    backbone: BackboneConfig,
    method: PeftMethod,
    tensors: Vec<TensorEntry>,
}

/// One compact JSON header line, then every tensor as little-endian f64 in
/// header order.
pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel() * 8;
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        backbone: model.backbone.clone(),
        method: model.method.clone(),
        tensors,
    };
    let mut out = serde_json::to_vec(&serde_json::to_value(&header)?)?;
    out.push(b'\n');
    for (_, t) in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(model)?)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Model> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Load("checkpoint has no header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Load(format!("checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Load(format!("unknown checkpoint format `{}`", header.format)));
    }
    header
        .backbone
        .validate()
        .map_err(|e| Error::Load(format!("checkpoint backbone: {e}")))?;
    let data = &bytes[split + 1..];
    let mut params = ParamStore::new();
    let mut expected_end = 0;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 8;
        if e.offset != expected_end || end > data.len() {
            return Err(Error::Load(format!("tensor `{}` lies outside the data section", e.name)));
        }
        expected_end = end;
        let values = data[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?);
    }
    if expected_end != data.len() {
        return Err(Error::Load(format!(
            "{} trailing bytes after the last tensor",
            data.len() - expected_end
        )));
    }
    Model::from_params(&header.backbone, &header.method, params)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    parse_checkpoint(&bytes)
}

/// Shape line such as `1 16 16`, then the values as little-endian f64.
pub fn payload_bytes(t: &Tensor) -> Vec<u8> {
    let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    let mut out = format!("{}\n", shape.join(" ")).into_bytes();
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_payload(bytes: &[u8]) -> Result<Tensor> {
    let mut reader = io::BufReader::new(bytes);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(Error::Ingestion("payload has no shape line".into()));
    }
    let shape = line
        .split_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Ingestion(format!("payload shape `{}`: {e}", line.trim_end())))?;
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    let n: usize = shape.iter().product();
    if rest.len() != n * 8 {
        return Err(Error::Ingestion(format!(
            "payload shape {shape:?} needs {} bytes, found {}",
            n * 8,
            rest.len()
        )));
    }
    let values = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, values)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    sample_id: usize,
    label_vector: String,
    path: String,
}

/// Writes `manifest.csv` plus one payload per sample under `dir`.
pub fn write_dataset(dir: &Path, d: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("samples"))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &d.samples {
        let rel = format!("samples/{}.bin", s.id);
        write_atomic(&dir.join(&rel), &payload_bytes(&s.image))?;
        let labels: Vec<String> = s.labels.iter().map(u8::to_string).collect();
        w.serialize(ManifestRow {
            sample_id: s.id,
            label_vector: labels.join(";"),
            path: rel,
        })
        .map_err(|e| Error::Ingestion(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Ingestion(e.to_string()))?;
    let manifest = dir.join("manifest.csv");
    write_atomic(&manifest, &bytes)?;
    Ok(manifest)
}

/// Reads a manifest; payload paths are relative to the manifest's directory.
/// Rows with exactly one positive make a single-label set unless `task` says
/// otherwise. The first positive is each sample's stratification class.
pub fn read_dataset(manifest: &Path, task: Option<TaskType>) -> Result<Dataset> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut r = csv::Reader::from_path(manifest).map_err(|e| Error::Ingestion(format!("{}: {e}", manifest.display())))?;
    let mut samples = Vec::new();
    let mut num_classes = None;
    for (line, row) in r.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::Ingestion(format!("manifest row {}: {e}", line + 1)))?;
        let labels = row
            .label_vector
            .split(';')
            .map(|s| match s.trim() {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(Error::Ingestion(format!("sample {}: label `{other}` is not 0 or 1", row.sample_id))),
            })
            .collect::<Result<Vec<u8>>>()?;
        match num_classes {
            None => num_classes = Some(labels.len()),
            Some(c) if c != labels.len() => {
                return Err(Error::Ingestion(format!(
                    "sample {} has {} labels, earlier rows have {c}",
                    row.sample_id,
                    labels.len()
                )))
            }
            Some(_) => {}
        }
        let primary = labels
            .iter()
            .position(|&l| l == 1)
            .ok_or_else(|| Error::Ingestion(format!("sample {} has no positive label", row.sample_id)))?;
        let bytes = fs::read(base.join(&row.path)).map_err(|e| Error::Ingestion(format!("{}: {e}", row.path)))?;
        samples.push(Sample {
            id: row.sample_id,
            image: parse_payload(&bytes)?,
            labels,
            primary,
        });
    }
    let num_classes = num_classes.ok_or_else(|| Error::Ingestion("manifest has no samples".into()))?;
    let task = task.unwrap_or_else(|| {
        if samples.iter().all(|s| s.labels.iter().filter(|&&l| l == 1).count() == 1) {
            TaskType::SingleLabel
        } else {
            TaskType::MultiLabel
        }
    });
    Dataset::new(samples, task, num_classes)
}
