//! Artifact serialization. Every binary artifact is a single file with a
//! one-line JSON header followed by a row-major little-endian `f64` payload;
//! multi-section containers (model files) extend the header with a section
//! table. Writers are atomic (temp file + rename) and loaders verify
//! dimensions and, where the header carries one, a SHA-256 payload digest.
//!
//! Headers are open maps: writers may embed extra provenance (config hash,
//! seeds) via `meta`, and loaders ignore unknown keys.

use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::radon::{PointSet, Sinogram};
use crate::sensing::SensingMatrix;

/// Current on-disk format version for all artifact kinds.
pub const FORMAT_VERSION: u64 = 1;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Write `bytes` to `path` atomically: a unique temp file in the same
/// directory is flushed and then renamed over the target, so readers never
/// observe a partial artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))
        .map_err(|e| Error::io(path_str(path), e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path_str(path), e))?;
    tmp.flush().map_err(|e| Error::io(path_str(path), e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(path_str(path), e.error))?;
    Ok(())
}

/// Hex SHA-256 digest of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance line prepended to CSV artifacts: `# {json}`. Empty maps yield
/// an empty string so bare CSVs stay bare. Readers skip `#` lines.
pub fn provenance_comment(meta: &Map<String, Value>) -> String {
    if meta.is_empty() {
        String::new()
    } else {
        format!("# {}\n", Value::Object(meta.clone()))
    }
}

fn floats_to_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_floats(path: &Path, bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::parse(
            path_str(path),
            format!("payload length {} is not a multiple of 8", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn write_header_payload(path: &Path, header: &Value, payload: &[f64]) -> Result<()> {
    let mut bytes = serde_json::to_vec(header).expect("header serializes");
    bytes.push(b'\n');
    bytes.extend_from_slice(&floats_to_bytes(payload));
    atomic_write(path, &bytes)
}

fn read_header_payload(path: &Path) -> Result<(Value, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path_str(path), e))?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(path_str(path), "missing header line".to_string()))?;
    let header: Value = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::parse(path_str(path), format!("bad JSON header: {e}")))?;
    let payload = bytes_to_floats(path, &bytes[split + 1..])?;
    Ok((header, payload))
}

fn header_base(format: &str, meta: &Map<String, Value>) -> Map<String, Value> {
    let mut header = meta.clone();
    header.insert("format".into(), json!(format));
    header.insert("version".into(), json!(FORMAT_VERSION));
    header
}

fn check_format(path: &Path, header: &Value, expect: &str) -> Result<()> {
    let found = header.get("format").and_then(Value::as_str).unwrap_or("<missing>");
    if found != expect {
        return Err(Error::parse(
            path_str(path),
            format!("expected format {expect:?}, found {found:?}"),
        ));
    }
    let version = header.get("version").and_then(Value::as_u64).unwrap_or(0);
    if version != FORMAT_VERSION {
        return Err(Error::parse(
            path_str(path),
            format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
        ));
    }
    Ok(())
}

fn get_usize(path: &Path, header: &Value, key: &str) -> Result<usize> {
    header
        .get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| Error::parse(path_str(path), format!("missing integer field {key:?}")))
}

/// Write a 2-D array (image or density map).
pub fn write_array2(path: &Path, arr: &Array2<f64>, meta: &Map<String, Value>) -> Result<()> {
    let mut header = header_base("csoe-array", meta);
    header.insert("rows".into(), json!(arr.nrows()));
    header.insert("cols".into(), json!(arr.ncols()));
    let flat: Vec<f64> = arr.iter().copied().collect();
    write_header_payload(path, &Value::Object(header), &flat)
}

/// Read a 2-D array written by [`write_array2`]; returns the array and the
/// full header for provenance inspection.
pub fn read_array2(path: &Path) -> Result<(Array2<f64>, Value)> {
    let (header, payload) = read_header_payload(path)?;
    check_format(path, &header, "csoe-array")?;
    let rows = get_usize(path, &header, "rows")?;
    let cols = get_usize(path, &header, "cols")?;
    if payload.len() != rows * cols {
        return Err(Error::parse(
            path_str(path),
            format!("payload holds {} values, header says {rows}×{cols}", payload.len()),
        ));
    }
    let arr = Array2::from_shape_vec((rows, cols), payload).expect("length checked");
    Ok((arr, header))
}

/// Write a sinogram with its angle list and source frame.
pub fn write_sinogram(path: &Path, sino: &Sinogram, meta: &Map<String, Value>) -> Result<()> {
    let mut header = header_base("csoe-sinogram", meta);
    header.insert("rows".into(), json!(sino.n()));
    header.insert("cols".into(), json!(sino.r()));
    header.insert("angles".into(), json!(sino.angles));
    header.insert("frame".into(), json!([sino.frame.0, sino.frame.1]));
    let flat: Vec<f64> = sino.values.iter().copied().collect();
    write_header_payload(path, &Value::Object(header), &flat)
}

/// Read a sinogram written by [`write_sinogram`].
pub fn read_sinogram(path: &Path) -> Result<(Sinogram, Value)> {
    let (header, payload) = read_header_payload(path)?;
    check_format(path, &header, "csoe-sinogram")?;
    let rows = get_usize(path, &header, "rows")?;
    let cols = get_usize(path, &header, "cols")?;
    let angles: Vec<f64> = header
        .get("angles")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| Error::parse(path_str(path), "missing angle list".to_string()))?;
    let frame: (usize, usize) = header
        .get("frame")
        .and_then(|v| serde_json::from_value::<[usize; 2]>(v.clone()).ok())
        .map(|[h, w]| (h, w))
        .ok_or_else(|| Error::parse(path_str(path), "missing frame".to_string()))?;
    if angles.len() != cols {
        return Err(Error::parse(
            path_str(path),
            format!("{} angles for {cols} columns", angles.len()),
        ));
    }
    if payload.len() != rows * cols {
        return Err(Error::parse(
            path_str(path),
            format!("payload holds {} values, header says {rows}×{cols}", payload.len()),
        ));
    }
    let values = Array2::from_shape_vec((rows, cols), payload).expect("length checked");
    Ok((Sinogram { values, angles, frame }, header))
}

/// Write a sensing matrix; the header records its generator seed and a
/// SHA-256 digest of the payload so loads detect corruption.
pub fn write_sensing(path: &Path, sensing: &SensingMatrix, meta: &Map<String, Value>) -> Result<()> {
    let flat: Vec<f64> = sensing.d.iter().copied().collect();
    let mut header = header_base("csoe-sensing", meta);
    header.insert("m".into(), json!(sensing.m()));
    header.insert("n".into(), json!(sensing.n()));
    header.insert("seed".into(), json!(sensing.seed));
    header.insert("sha256".into(), json!(sha256_hex(&floats_to_bytes(&flat))));
    write_header_payload(path, &Value::Object(header), &flat)
}

/// Read a sensing matrix, verifying dimensions and the payload digest.
pub fn read_sensing(path: &Path) -> Result<(SensingMatrix, Value)> {
    let (header, payload) = read_header_payload(path)?;
    check_format(path, &header, "csoe-sensing")?;
    let m = get_usize(path, &header, "m")?;
    let n = get_usize(path, &header, "n")?;
    let seed = header
        .get("seed")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::parse(path_str(path), "missing seed".to_string()))?;
    if payload.len() != m * n {
        return Err(Error::parse(
            path_str(path),
            format!("payload holds {} values, header says {m}×{n}", payload.len()),
        ));
    }
    let expected = header
        .get("sha256")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::parse(path_str(path), "missing payload digest".to_string()))?;
    let actual = sha256_hex(&floats_to_bytes(&payload));
    if expected != actual {
        return Err(Error::parse(
            path_str(path),
            format!("payload digest mismatch: header {expected}, computed {actual}"),
        ));
    }
    let d = Array2::from_shape_vec((m, n), payload).expect("length checked");
    Ok((SensingMatrix { d, seed }, header))
}

/// One named parameter block inside a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedSection {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedSection {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        NamedSection { name: name.into(), shape, values }
    }
}

/// Write a multi-section container: JSON manifest (custom `manifest` value,
/// section table with shapes and offsets, payload digest) + concatenated
/// section payloads.
pub fn write_container(
    path: &Path,
    kind: &str,
    manifest: &Value,
    sections: &[NamedSection],
) -> Result<()> {
    let mut table = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    for s in sections {
        let expect: usize = s.shape.iter().product();
        if expect != s.values.len() {
            return Err(Error::Config(format!(
                "section {:?} declares shape {:?} ({} values) but holds {}",
                s.name,
                s.shape,
                expect,
                s.values.len()
            )));
        }
        table.push(json!({"name": s.name, "shape": s.shape, "offset": payload.len()}));
        payload.extend_from_slice(&s.values);
    }
    let header = json!({
        "format": kind,
        "version": FORMAT_VERSION,
        "manifest": manifest,
        "sections": table,
        "sha256": sha256_hex(&floats_to_bytes(&payload)),
    });
    write_header_payload(path, &header, &payload)
}

/// Read a container written by [`write_container`], verifying the digest and
/// the section table against the payload.
pub fn read_container(path: &Path, kind: &str) -> Result<(Value, Vec<NamedSection>)> {
    let (header, payload) = read_header_payload(path)?;
    check_format(path, &header, kind)?;
    let expected = header
        .get("sha256")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::parse(path_str(path), "missing payload digest".to_string()))?;
    let actual = sha256_hex(&floats_to_bytes(&payload));
    if expected != actual {
        return Err(Error::parse(
            path_str(path),
            format!("payload digest mismatch: header {expected}, computed {actual}"),
        ));
    }
    let table = header
        .get("sections")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::parse(path_str(path), "missing section table".to_string()))?;
    let mut sections = Vec::with_capacity(table.len());
    let mut cursor = 0usize;
    for entry in table {
        let name = entry
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::parse(path_str(path), "section missing name".to_string()))?;
        let shape: Vec<usize> = entry
            .get("shape")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| {
                Error::parse(path_str(path), format!("section {name:?} missing shape"))
            })?;
        let offset = entry.get("offset").and_then(Value::as_u64).map(|v| v as usize);
        if offset != Some(cursor) {
            return Err(Error::parse(
                path_str(path),
                format!("section {name:?} offset {offset:?} does not match cursor {cursor}"),
            ));
        }
        let len: usize = shape.iter().product();
        if cursor + len > payload.len() {
            return Err(Error::parse(
                path_str(path),
                format!("section {name:?} overruns payload"),
            ));
        }
        sections.push(NamedSection::new(name, shape, payload[cursor..cursor + len].to_vec()));
        cursor += len;
    }
    if cursor != payload.len() {
        return Err(Error::parse(
            path_str(path),
            format!("payload holds {} values beyond the section table", payload.len() - cursor),
        ));
    }
    let manifest = header.get("manifest").cloned().unwrap_or(Value::Null);
    Ok((manifest, sections))
}

/// Write head annotations: one `x,y` pair per line, `x` = column, `y` = row,
/// both in pixels.
pub fn write_annotations(path: &Path, points: &PointSet) -> Result<()> {
    let mut text = String::new();
    for &(row, col) in &points.points {
        text.push_str(&format!("{col},{row}\n"));
    }
    atomic_write(path, text.as_bytes())
}

/// Read annotations written by [`write_annotations`]; `frame` supplies the
/// bounds the points must lie in. Errors name the offending line.
pub fn read_annotations(path: &Path, frame: (usize, usize)) -> Result<PointSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |detail: String| Error::parse(path_str(path), format!("line {}: {detail}", idx + 1));
        let (x, y) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("expected `x,y`, got {line:?}")))?;
        let col: f64 = x.trim().parse().map_err(|e| bad(format!("bad x {x:?}: {e}")))?;
        let row: f64 = y.trim().parse().map_err(|e| bad(format!("bad y {y:?}: {e}")))?;
        points.push((row, col));
    }
    PointSet::new(points, frame)
}

/// Serialize any `serde` value as pretty JSON, atomically.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::parse(path_str(path), format!("serialize: {e}")))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// Deserialize a JSON file into any `serde` type.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path_str(path), e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(path_str(path), e.to_string()))
}
