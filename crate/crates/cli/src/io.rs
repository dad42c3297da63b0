use std::fs;
use std::path::{Path, PathBuf};

use otgmm_core::panel::{Observation, PanelData};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Numeric table with a header row.
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, field)| {
                let v: f64 = field.parse().map_err(|_| {
                    CliError::data(format!(
                        "{}:{line}: column {} is not a number: {field:?}",
                        path.display(),
                        c + 1
                    ))
                })?;
                if !v.is_finite() {
                    return Err(CliError::data(format!(
                        "{}:{line}: column {} is not finite",
                        path.display(),
                        c + 1
                    )));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::data(format!("{}: no data rows", path.display())));
    }
    Ok(Table { headers, rows })
}

/// Single-column weight vector.
pub fn read_weights(path: &Path) -> Result<Vec<f64>, CliError> {
    let t = read_table(path)?;
    if t.headers.len() != 1 {
        return Err(CliError::data(format!(
            "{}: expected one weight column, found {}",
            path.display(),
            t.headers.len()
        )));
    }
    Ok(t.rows.into_iter().map(|r| r[0]).collect())
}

fn binary(v: f64, path: &Path, row: usize) -> Result<u8, CliError> {
    match v {
        0.0 => Ok(0),
        1.0 => Ok(1),
        _ => Err(CliError::data(format!(
            "{}:{}: outcome must be 0 or 1, found {v}",
            path.display(),
            row + 2
        ))),
    }
}

fn id(v: f64, path: &Path, row: usize) -> Result<u64, CliError> {
    if v < 0.0 || v.fract() != 0.0 || v > 9.0e15 {
        return Err(CliError::data(format!(
            "{}:{}: unit_id must be a nonnegative integer",
            path.display(),
            row + 2
        )));
    }
    Ok(v as u64)
}

fn keyed(path: &Path) -> Result<(usize, Vec<(u64, Observation)>), CliError> {
    let t = read_table(path)?;
    if t.headers.len() < 3 {
        return Err(CliError::data(format!(
            "{}: expected unit_id, outcome and at least one covariate",
            path.display()
        )));
    }
    let obs = t
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok((
                id(r[0], path, i)?,
                Observation {
                    y: binary(r[1], path, i)?,
                    x: r[2..].to_vec(),
                },
            ))
        })
        .collect::<Result<_, CliError>>()?;
    Ok((t.headers.len() - 2, obs))
}

/// `wave1.csv`, `retainers.csv` and `refreshment.csv` from one directory.
pub fn read_panel(dir: &Path) -> Result<PanelData, CliError> {
    let (k, wave1) = keyed(&dir.join("wave1.csv"))?;
    let (k2, retainers) = keyed(&dir.join("retainers.csv"))?;
    let ref_path = dir.join("refreshment.csv");
    let t = read_table(&ref_path)?;
    if k2 != k || t.headers.len() != k + 1 {
        return Err(CliError::data(format!(
            "{}: covariate counts differ across the panel files",
            dir.display()
        )));
    }
    let refreshment = t
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(Observation {
                y: binary(r[0], &ref_path, i)?,
                x: r[1..].to_vec(),
            })
        })
        .collect::<Result<_, CliError>>()?;
    Ok(PanelData::new(k, wave1, retainers, refreshment)?)
}

pub fn panel_files(dir: &Path) -> Vec<PathBuf> {
    ["wave1.csv", "retainers.csv", "refreshment.csv"]
        .iter()
        .map(|f| dir.join(f))
        .collect()
}

pub fn write_panel(dir: &Path, data: &PanelData) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let cov = |prefix: &str| (1..=data.k).map(|c| format!("{prefix}_{c}")).collect::<Vec<_>>();
    let mut w = CsvOut::new(["unit_id".to_string(), "y1".into()].into_iter().chain(cov("x1")));
    for (id, o) in &data.wave1 {
        w.row(
            std::iter::once(id.to_string())
                .chain(std::iter::once(o.y.to_string()))
                .chain(o.x.iter().map(|v| num(*v))),
        );
    }
    w.write(&dir.join("wave1.csv"))?;
    let mut w = CsvOut::new(["unit_id".to_string(), "y2".into()].into_iter().chain(cov("x2")));
    for (id, o) in &data.retainers {
        w.row(
            std::iter::once(id.to_string())
                .chain(std::iter::once(o.y.to_string()))
                .chain(o.x.iter().map(|v| num(*v))),
        );
    }
    w.write(&dir.join("retainers.csv"))?;
    let mut w = CsvOut::new(std::iter::once("y2".to_string()).chain(cov("x2")));
    for o in &data.refreshment {
        w.row(std::iter::once(o.y.to_string()).chain(o.x.iter().map(|v| num(*v))));
    }
    w.write(&dir.join("refreshment.csv"))
}

/// 17 significant digits, enough to round-trip any f64.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Accumulates CSV text in memory so a failed run leaves no partial file.
pub struct CsvOut {
    buf: String,
}

impl CsvOut {
    pub fn new<I, S>(headers: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out = Self { buf: String::new() };
        out.row(headers);
        out
    }

    pub fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let line: Vec<String> = fields.into_iter().map(|s| s.as_ref().to_string()).collect();
        self.buf.push_str(&line.join(","));
        self.buf.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, &self.buf)?;
        Ok(())
    }
}

/// Git blob object id computed with SHA-256: `sha256("blob <len>\0" + bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(blob_hash(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_of_empty_input() {
        // `git hash-object --object-format=sha256 /dev/null`
        assert_eq!(
            blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456.789, f64::MIN_POSITIVE] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }
}
