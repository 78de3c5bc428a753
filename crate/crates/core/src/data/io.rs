//! Text format.
//!
//! * `manifest.csv`: header `subject_id,label,path`, one subject per line;
//!   `path` is relative to the manifest's directory.
//! * subject files: `m` lines of `T` comma-separated values, no header.
//! * `domains.csv` (optional, next to the manifest): header
//!   `component,domain,is_important`, component ids `0..m`.
//!
//! Values are written with 17 significant digits so a write/load cycle
//! reproduces every `f64` exactly.

use std::fs;
use std::path::{Path, PathBuf};

use super::{ComponentInfo, Dataset, Sample};
use crate::adcore::Array;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const DOMAINS_FILE: &str = "domains.csv";

pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_reader(path: &Path, headers: bool) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(headers)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::parse(path, line, e.to_string())
}

fn expect_header(path: &Path, rdr: &mut csv::Reader<fs::File>, want: &[&str]) -> Result<()> {
    let got = rdr.headers().map_err(|e| csv_error(path, e))?;
    if got.iter().ne(want.iter().copied()) {
        return Err(Error::parse(
            path,
            1,
            format!("expected header {:?}, found {:?}", want.join(","), got.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    Ok(())
}

/// Reads a headerless numeric CSV. Every line must have the same length.
pub fn read_matrix(path: &Path) -> Result<Array> {
    let mut rdr = csv_reader(path, false)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(rows.len() + 1, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if let Some(first) = rows.first() {
            if rec.len() != first.len() {
                return Err(Error::parse(
                    path,
                    line,
                    format!("ragged row {}: {} values, expected {}", rows.len(), rec.len(), first.len()),
                ));
            }
        }
        let mut row = Vec::with_capacity(rec.len());
        for (col, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::parse(path, line, format!("non-numeric value {cell:?} in column {}", col + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(path, line, format!("non-finite value {cell:?}")));
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(path, 0, "no data rows"));
    }
    Array::from_rows(&rows)
}

pub fn write_matrix(path: &Path, x: &Array) -> Result<()> {
    let mut out = String::with_capacity(x.len() * 24);
    for r in 0..x.rows() {
        let line: Vec<String> = x.row(r).iter().map(|&v| format_value(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a domain map for exactly `m` components.
pub fn load_domains(path: &Path, m: usize) -> Result<Vec<ComponentInfo>> {
    let mut rdr = csv_reader(path, true)?;
    expect_header(path, &mut rdr, &["component", "domain", "is_important"])?;
    let mut slots: Vec<Option<ComponentInfo>> = vec![None; m];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 3 {
            return Err(Error::parse(path, line, format!("expected 3 fields, found {}", rec.len())));
        }
        let id: usize = rec[0]
            .parse()
            .map_err(|_| Error::parse(path, line, format!("bad component id {:?}", &rec[0])))?;
        if id >= m {
            return Err(Error::parse(
                path,
                line,
                format!("component {id} out of range for {m} components"),
            ));
        }
        let important = match &rec[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::parse(path, line, format!("is_important must be 0 or 1, found {other:?}")))
            }
        };
        if slots[id].is_some() {
            return Err(Error::parse(path, line, format!("component {id} listed twice")));
        }
        slots[id] = Some(ComponentInfo {
            domain: rec[1].to_string(),
            important,
        });
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::parse(path, 0, format!("component {i} missing"))))
        .collect()
}

pub fn write_domains(path: &Path, domains: &[ComponentInfo]) -> Result<()> {
    let mut out = String::from("component,domain,is_important\n");
    for (i, d) in domains.iter().enumerate() {
        out.push_str(&format!("{i},{},{}\n", d.domain, u8::from(d.important)));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads the subjects listed in a manifest. A `domains.csv` next to the
/// manifest is picked up automatically.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut rdr = csv_reader(manifest, true)?;
    expect_header(manifest, &mut rdr, &["subject_id", "label", "path"])?;
    let mut samples = Vec::new();
    let mut shape: Option<((usize, usize), PathBuf)> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(manifest, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 3 {
            return Err(Error::parse(manifest, line, format!("expected 3 fields, found {}", rec.len())));
        }
        let label = match &rec[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::parse(manifest, line, format!("unknown label {other:?}"))),
        };
        let path = dir.join(&rec[2]);
        if !path.is_file() {
            return Err(Error::parse(
                manifest,
                line,
                format!("subject file {} not found", path.display()),
            ));
        }
        let x = read_matrix(&path)?;
        if x.cols() < 2 {
            return Err(Error::parse(&path, 1, "need at least two time points"));
        }
        match &shape {
            None => shape = Some((x.shape(), path.clone())),
            Some((s, first)) if *s != x.shape() => {
                return Err(Error::parse(
                    &path,
                    0,
                    format!(
                        "shape {:?} differs from {:?} of {}",
                        x.shape(),
                        s,
                        first.display()
                    ),
                ))
            }
            Some(_) => {}
        }
        samples.push(Sample {
            subject_id: rec[0].to_string(),
            x,
            label,
        });
    }
    if samples.is_empty() {
        return Err(Error::parse(manifest, 0, "manifest lists no subjects"));
    }
    let domains_path = dir.join(DOMAINS_FILE);
    let domains = if domains_path.is_file() {
        Some(load_domains(&domains_path, samples[0].x.rows())?)
    } else {
        None
    };
    Dataset::new(samples, domains)
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Input(format!("subject id {id:?} is not usable as a file name")))
    }
}

/// Writes `manifest.csv`, `subjects/<id>.csv` and, when present,
/// `domains.csv` under `dir`. Returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let sub_dir = dir.join("subjects");
    fs::create_dir_all(&sub_dir).map_err(|e| Error::io(&sub_dir, e))?;
    let mut manifest = String::from("subject_id,label,path\n");
    for s in &dataset.samples {
        check_id(&s.subject_id)?;
        let rel = format!("subjects/{}.csv", s.subject_id);
        write_matrix(&dir.join(&rel), &s.x)?;
        manifest.push_str(&format!("{},{},{rel}\n", s.subject_id, s.label));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    if let Some(d) = &dataset.domains {
        write_domains(&dir.join(DOMAINS_FILE), d)?;
    }
    Ok(path)
}
