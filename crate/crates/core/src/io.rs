//! The dataset directory format.
//!
//! ```text
//! manifest.json   counts, names, semantic table metadata
//! samples.csv     sample_id,class_id,domain_id,x0,...,x{n-1}
//! semantics.csv   class_id,a0,...,a{m-1}          (optional)
//! ```
//!
//! Floats are written in shortest round-trip form, so import after export
//! reproduces every value bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, SemanticTable, SplitSpec};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const SAMPLES: &str = "samples.csv";
pub const SEMANTICS: &str = "semantics.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub num_domains: usize,
    pub input_dim: usize,
    pub class_names: Vec<String>,
    pub domain_names: Vec<String>,
    /// Present when the directory has `semantics.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantics: Option<SemanticsMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticsMeta {
    pub dim: usize,
    pub l2_normalized: bool,
}

/// A dataset read from disk. `semantics` is `None` when the directory has
/// no `semantics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Imported {
    pub dataset: Dataset,
    pub semantics: Option<SemanticTable>,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn float_row(out: &mut String, values: &[f64]) {
    for v in values {
        out.push(',');
        out.push_str(&format!("{v:?}"));
    }
    out.push('\n');
}

pub fn export(ds: &Dataset, sem: Option<&SemanticTable>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        num_classes: ds.num_classes,
        num_domains: ds.num_domains,
        input_dim: ds.input_dim,
        class_names: ds.class_names.clone(),
        domain_names: ds.domain_names.clone(),
        semantics: sem.map(|s| SemanticsMeta {
            dim: s.dim,
            l2_normalized: s.l2_normalized,
        }),
    };
    write_file(&dir.join(MANIFEST), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;

    let mut out = String::from("sample_id,class_id,domain_id");
    for i in 0..ds.input_dim {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for s in &ds.samples {
        out.push_str(&format!("{},{},{}", s.id, s.class_id, s.domain_id));
        float_row(&mut out, &s.input);
    }
    write_file(&dir.join(SAMPLES), &out)?;

    let sem_path = dir.join(SEMANTICS);
    if let Some(sem) = sem {
        let mut out = String::from("class_id");
        for i in 0..sem.dim {
            out.push_str(&format!(",a{i}"));
        }
        out.push('\n');
        for (class, v) in &sem.vectors {
            out.push_str(&class.to_string());
            float_row(&mut out, v);
        }
        write_file(&sem_path, &out)?;
    } else if sem_path.exists() {
        fs::remove_file(&sem_path).map_err(|e| Error::io(&sem_path, e))?;
    }
    Ok(())
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads data rows of a headed CSV, checking the column count. Yields
/// `(line number, fields)`.
fn read_rows(path: &Path, columns: usize) -> Result<Vec<(u64, Vec<String>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let header_len = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .len();
    if header_len != columns {
        return Err(parse_err(path, 1, format!("header has {header_len} columns, expected {columns}")));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != columns {
            return Err(parse_err(
                path,
                line,
                format!("row has {} columns, expected {columns}", record.len()),
            ));
        }
        rows.push((line, record.iter().map(str::to_string).collect()));
    }
    Ok(rows)
}

fn field<T: std::str::FromStr>(path: &Path, line: u64, name: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad {name} {value:?}")))
}

fn floats(path: &Path, line: u64, values: &[String]) -> Result<Vec<f64>> {
    values.iter().map(|v| field(path, line, "float", v)).collect()
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| parse_err(&path, e.line() as u64, e.to_string()))?;
    if manifest.class_names.len() != manifest.num_classes || manifest.domain_names.len() != manifest.num_domains {
        return Err(parse_err(&path, 0, "name lists do not match the declared counts"));
    }
    Ok(manifest)
}

pub fn import(dir: &Path) -> Result<Imported> {
    let manifest = read_manifest(dir)?;
    let samples_path = dir.join(SAMPLES);
    let samples = read_rows(&samples_path, 3 + manifest.input_dim)?
        .into_iter()
        .map(|(line, row)| {
            let p = &samples_path;
            Ok(Sample {
                id: field(p, line, "sample_id", &row[0])?,
                class_id: field(p, line, "class_id", &row[1])?,
                domain_id: field(p, line, "domain_id", &row[2])?,
                input: floats(p, line, &row[3..])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let sem_path = dir.join(SEMANTICS);
    let semantics = if sem_path.exists() {
        let meta = manifest.semantics.ok_or_else(|| {
            parse_err(&dir.join(MANIFEST), 0, "semantics.csv present but manifest has no semantics entry")
        })?;
        let mut vectors = std::collections::BTreeMap::new();
        for (line, row) in read_rows(&sem_path, 1 + meta.dim)? {
            let class: usize = field(&sem_path, line, "class_id", &row[0])?;
            if vectors.insert(class, floats(&sem_path, line, &row[1..])?).is_some() {
                return Err(parse_err(&sem_path, line, format!("duplicate class {class}")));
            }
        }
        Some(SemanticTable::new(meta.dim, vectors, meta.l2_normalized)?)
    } else {
        if manifest.semantics.is_some() {
            log::warn!("{} is declared in the manifest but missing", sem_path.display());
        }
        None
    };

    let dataset = Dataset {
        samples,
        num_classes: manifest.num_classes,
        num_domains: manifest.num_domains,
        input_dim: manifest.input_dim,
        class_names: manifest.class_names,
        domain_names: manifest.domain_names,
    };
    Ok(Imported { dataset, semantics })
}

pub fn write_split(split: &SplitSpec, path: &Path) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(split)? + "\n"))
}

pub fn read_split(path: &Path) -> Result<SplitSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Dataset, SemanticTable) {
        let samples = vec![
            Sample { id: 0, input: vec![0.1, -2.5e-17], class_id: 0, domain_id: 0 },
            Sample { id: 1, input: vec![1.0 / 3.0, 7.0], class_id: 1, domain_id: 1 },
        ];
        let ds = Dataset::new(samples, 2, 2, 2);
        let sem = SemanticTable::normalized(vec![vec![1.0, 2.0, 2.0], vec![0.3, 0.4, 0.0]]).unwrap();
        (ds, sem)
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, sem) = tiny();
        export(&ds, Some(&sem), dir.path()).unwrap();
        let back = import(dir.path()).unwrap();
        assert_eq!(back.dataset, ds);
        assert_eq!(back.semantics, Some(sem));
    }

    #[test]
    fn missing_semantics_is_reported_as_absent() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, _) = tiny();
        export(&ds, None, dir.path()).unwrap();
        assert_eq!(import(dir.path()).unwrap().semantics, None);
    }

    #[test]
    fn wrong_column_count_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, sem) = tiny();
        export(&ds, Some(&sem), dir.path()).unwrap();
        let path = dir.path().join(SAMPLES);
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("2,0,0,1.0\n");
        fs::write(&path, text).unwrap();
        match import(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_float_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, sem) = tiny();
        export(&ds, Some(&sem), dir.path()).unwrap();
        let path = dir.path().join(SEMANTICS);
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "1,zero,0.8,0.0";
        fs::write(&path, lines.join("\n")).unwrap();
        let err = import(dir.path()).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
    }
}
