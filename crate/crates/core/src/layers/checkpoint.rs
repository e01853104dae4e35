//! Checkpoint archives: a directory holding `manifest.csv`
//! (`name,dtype,shape,file`, shape as `x`-separated extents) and one DGT1
//! file per parameter.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::Parameterized;
use crate::tensor::io::{self, DType};
use crate::{Error, Result, Tensor};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub file: String,
}

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Writes every parameter (running statistics included) of `model` at
/// native precision.
pub fn save_checkpoint(dir: &Path, model: &dyn Parameterized) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut failure = None;
    model.visit("", &mut |name, _, t| {
        if failure.is_some() {
            return;
        }
        let file = format!("{name}.dgt");
        match io::write(&dir.join(&file), t, DType::native()) {
            Ok(()) => entries.push(ManifestEntry {
                name: name.to_string(),
                dtype: DType::native(),
                shape: t.shape().to_vec(),
                file,
            }),
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let mut csv = String::from("name,dtype,shape,file\n");
    for e in &entries {
        csv.push_str(&format!("{},{},{},{}\n", e.name, e.dtype.name(), shape_string(&e.shape), e.file));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |line: &str| Error::Format {
        what: "checkpoint manifest",
        reason: format!("bad line {line:?}"),
    };
    let mut lines = text.lines();
    if lines.next() != Some("name,dtype,shape,file") {
        return Err(bad("header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            let [name, dtype, shape, file] = cols[..] else {
                return Err(bad(line));
            };
            let dtype = match dtype {
                "f32" => DType::F32,
                "f64" => DType::F64,
                _ => return Err(bad(line)),
            };
            let shape = shape
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad(line)))
                .collect::<Result<Vec<_>>>()?;
            Ok(ManifestEntry {
                name: name.to_string(),
                dtype,
                shape,
                file: file.to_string(),
            })
        })
        .collect()
}

/// Replaces every parameter of `model` with the archived tensor of the
/// same name. Missing, extra or reshaped entries are errors.
pub fn load_checkpoint(dir: &Path, model: &mut dyn Parameterized) -> Result<()> {
    let mut stored: HashMap<String, Tensor> = HashMap::new();
    for e in read_manifest(dir)? {
        let (t, _) = io::read(&dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!("{} does not match its manifest shape", e.name)));
        }
        stored.insert(e.name, t);
    }
    let mut failure = None;
    model.visit_mut("", &mut |name, _, t| {
        if failure.is_some() {
            return;
        }
        match stored.remove(name) {
            Some(s) if s.shape() == t.shape() => *t = s,
            Some(s) => {
                failure = Some(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    s.shape(),
                    t.shape()
                )))
            }
            None => failure = Some(Error::Checkpoint(format!("{name} missing from archive"))),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = stored.keys().min() {
        return Err(Error::Checkpoint(format!("archive has unknown parameter {extra}")));
    }
    Ok(())
}
