//! Matrix files, flat key-value configs, JSON-lines streams and model
//! checkpoints.
//!
//! Binary matrices are `STCTMAT1`, then rows and cols as little-endian
//! u64, then row-major little-endian f64. A `.csv` extension selects a
//! text form whose first line is `rows,cols`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::HardLabelVector;
use crate::error::{Result, StctError};
use crate::srl::{Layer, SrlModel};

pub const MAGIC: &[u8; 8] = b"STCTMAT1";
const HEADER: u64 = 24;

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> StctError {
    StctError::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn save_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if is_csv(path) {
        writeln!(w, "{},{}", m.nrows(), m.ncols())?;
        for row in m.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
    } else {
        w.write_all(MAGIC)?;
        w.write_all(&(m.nrows() as u64).to_le_bytes())?;
        w.write_all(&(m.ncols() as u64).to_le_bytes())?;
        for v in m.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<Array2<f64>> {
    if is_csv(path) {
        return load_csv(path);
    }
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(format_err(path, 0, "bad magic, expected STCTMAT1"));
    }
    if bytes.len() < HEADER as usize {
        return Err(format_err(path, 8, "truncated header"));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let (rows, cols) = (u64_at(8), u64_at(16));
    let count = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| format_err(path, 8, "dimensions overflow"))?;
    let have = bytes.len() as u64 - HEADER;
    if have < count {
        return Err(format_err(
            path,
            HEADER + have - have % 8,
            format!("truncated payload: {rows}x{cols} needs {count} bytes, found {have}"),
        ));
    }
    if have > count {
        return Err(format_err(path, HEADER + count, "trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity((rows * cols) as usize);
    for k in 0..(rows * cols) as usize {
        let o = HEADER as usize + 8 * k;
        let v = f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(format_err(path, o as u64, format!("non-finite value {v}")));
        }
        data.push(v);
    }
    Ok(Array2::from_shape_vec((rows as usize, cols as usize), data).expect("length checked"))
}

fn load_csv(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path)?;
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().ok_or_else(|| format_err(path, 0, "empty file"))?;
    let dims: Vec<usize> = header
        .trim()
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format_err(path, 0, "header must be rows,cols"))?;
    if dims.len() != 2 {
        return Err(format_err(path, 0, "header must be rows,cols"));
    }
    offset += header.len() as u64;
    let (rows, cols) = (dims[0], dims[1]);
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| format_err(path, offset, format!("missing row {r}")))?;
        let mut field_off = offset;
        let mut n = 0;
        for field in line.trim_end_matches(['\n', '\r']).split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| format_err(path, field_off, format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(format_err(path, field_off, format!("non-finite value {v}")));
            }
            data.push(v);
            n += 1;
            field_off += field.len() as u64 + 1;
        }
        if n != cols {
            return Err(format_err(path, offset, format!("row {r} has {n} fields, expected {cols}")));
        }
        offset += line.len() as u64;
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(format_err(path, offset, "trailing content after last row"));
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

/// Hard labels as an n×1 matrix.
pub fn save_labels(path: &Path, y: &HardLabelVector) -> Result<()> {
    let m = Array2::from_shape_fn((y.len(), 1), |(i, _)| y.as_slice()[i] as f64);
    save_matrix(path, &m)
}

pub fn load_labels(path: &Path) -> Result<HardLabelVector> {
    let m = load_matrix(path)?;
    if m.ncols() != 1 {
        return Err(format_err(path, 16, format!("label file must have one column, has {}", m.ncols())));
    }
    let mut y = Vec::with_capacity(m.nrows());
    for (i, v) in m.iter().enumerate() {
        if *v < 0.0 || v.fract() != 0.0 {
            return Err(format_err(path, HEADER + 8 * i as u64, format!("label {v} is not a class index")));
        }
        y.push(*v as usize);
    }
    Ok(HardLabelVector(y))
}

/// `key = value` lines; `#` starts a comment. Keys keep file order for
/// error messages but are looked up by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, (usize, String)>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| StctError::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let k = k.trim().to_string();
            if k.is_empty() {
                return Err(StctError::Config(format!("line {}: empty key", no + 1)));
            }
            if entries.insert(k.clone(), (no + 1, v.trim().to_string())).is_some() {
                return Err(StctError::Config(format!("line {}: duplicate key {k}", no + 1)));
            }
        }
        Ok(KvConfig {
            entries,
            used: Default::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| StctError::from(e).context(format!("reading {}", path.display())))?;
        Self::parse(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                let line = self.entries[key].0;
                StctError::Config(format!("line {line}: cannot parse {key} = {v:?}"))
            }),
        }
    }

    pub fn get_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse::<T>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| StctError::Config(format!("line {}: cannot parse list {key} = {v:?}", self.entries[key].0))),
        }
    }

    /// Errors on the first key no accessor asked for.
    pub fn reject_unknown(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.iter().filter(|(k, _)| !used.contains(*k)).min_by_key(|(_, (l, _))| *l) {
            Some((k, (line, _))) => Err(StctError::Config(format!("line {line}: unknown key {k}"))),
            None => Ok(()),
        }
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (no, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| StctError::from(e).context(format!("{} line {}", path.display(), no + 1)))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    encoder: Vec<[String; 2]>,
    cls: [String; 2],
    proj: [String; 2],
}

fn save_layer(dir: &Path, name: &str, l: &Layer) -> Result<[String; 2]> {
    let w = format!("{name}.w.stm");
    let b = format!("{name}.b.stm");
    save_matrix(&dir.join(&w), &l.w)?;
    save_matrix(&dir.join(&b), &l.b.clone().insert_axis(ndarray::Axis(0)))?;
    Ok([w, b])
}

fn load_layer(dir: &Path, files: &[String; 2]) -> Result<Layer> {
    let w = load_matrix(&dir.join(&files[0]))?;
    let b = load_matrix(&dir.join(&files[1]))?;
    if b.nrows() != 1 || b.ncols() != w.ncols() {
        return Err(StctError::input(format!("bias {} does not match weights {}", files[1], files[0])));
    }
    Ok(Layer {
        w,
        b: Array1::from(b.into_raw_vec_and_offset().0),
    })
}

/// One matrix file per parameter tensor plus `manifest.json`.
pub fn save_model(dir: &Path, model: &SrlModel) -> Result<()> {
    fs::create_dir_all(dir)?;
    let encoder = model
        .encoder
        .iter()
        .enumerate()
        .map(|(i, l)| save_layer(dir, &format!("encoder{i}"), l))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        encoder,
        cls: save_layer(dir, "cls", &model.cls)?,
        proj: save_layer(dir, "proj", &model.proj)?,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<SrlModel> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let encoder = manifest
        .encoder
        .iter()
        .map(|f| load_layer(dir, f))
        .collect::<Result<Vec<_>>>()?;
    let model = SrlModel {
        encoder,
        cls: load_layer(dir, &manifest.cls)?,
        proj: load_layer(dir, &manifest.proj)?,
    };
    let mut width = model.input_dim();
    for l in model.encoder.iter() {
        if l.w.nrows() != width {
            return Err(StctError::input("encoder layer widths do not chain"));
        }
        width = l.w.ncols();
    }
    if model.cls.w.nrows() != width || model.proj.w.nrows() != width {
        return Err(StctError::input("head input width differs from encoder output"));
    }
    Ok(model)
}

/// `dir/name`, creating `dir` if needed.
pub fn out_path(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}
