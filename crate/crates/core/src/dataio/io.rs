use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Label, Sample, Split};
use crate::error::{invalid, Error, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"GS4T";
pub const MATRIX_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixFormat {
    #[default]
    Binary,
    Csv,
}

impl MatrixFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Binary => "gs4t",
            MatrixFormat::Csv => "csv",
        }
    }
}

fn parse_err(source: &str, location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse { source_name: source.to_string(), location: location.into(), message: message.into() }
}

/// Binary matrix: magic, `u32` version, `u32` rows, `u32` cols, then `f32`
/// values row-major, all little-endian. Values are stored in single precision.
pub fn write_matrix_binary<W: Write>(x: &Array2<f64>, mut w: W) -> Result<()> {
    let (v, t) = x.dim();
    let (v32, t32) = match (u32::try_from(v), u32::try_from(t)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Err(invalid("matrix dimensions exceed u32")),
    };
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&MATRIX_VERSION.to_le_bytes())?;
    w.write_all(&v32.to_le_bytes())?;
    w.write_all(&t32.to_le_bytes())?;
    let mut buf = Vec::with_capacity(v * t * 4);
    for &val in x.iter() {
        let f = val as f32;
        if val.is_finite() && !f.is_finite() {
            return Err(invalid(format!("value {val} does not fit in single precision")));
        }
        buf.extend_from_slice(&f.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_matrix_binary<R: Read>(mut r: R, source: &str) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(parse_err(source, format!("offset {}", bytes.len()), "truncated header"));
    }
    if &bytes[..4] != MATRIX_MAGIC {
        return Err(parse_err(source, "offset 0", "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != MATRIX_VERSION {
        return Err(parse_err(source, "offset 4", format!("unsupported version {}", word(4))));
    }
    let (v, t) = (word(8) as usize, word(12) as usize);
    let expected = 16 + v * t * 4;
    if bytes.len() != expected {
        return Err(parse_err(
            source,
            format!("offset {}", bytes.len().min(expected)),
            format!("expected {expected} bytes for a {v}x{t} matrix, found {}", bytes.len()),
        ));
    }
    let data = bytes[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
    Ok(Array2::from_shape_vec((v, t), data).expect("length checked"))
}

/// `V` lines of `T` comma-separated values, no header. Values use the
/// shortest representation that parses back to the same double.
pub fn write_matrix_csv<W: Write>(x: &Array2<f64>, mut w: W) -> Result<()> {
    for row in x.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: BufRead>(r: R, source: &str) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut n = 0;
        for (j, cell) in line.split(',').enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                parse_err(source, format!("row {}, column {}", i + 1, j + 1), format!("non-numeric cell {cell:?}"))
            })?;
            data.push(v);
            n += 1;
        }
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => {
                return Err(parse_err(source, format!("row {}", i + 1), format!("expected {c} columns, found {n}")));
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| parse_err(source, "row 1", "empty matrix"))?;
    Ok(Array2::from_shape_vec((rows, cols), data).expect("rectangular by construction"))
}

fn format_of(path: &Path) -> MatrixFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("csv") => MatrixFormat::Csv,
        _ => MatrixFormat::Binary,
    }
}

/// Saves by extension: `.csv` as text, anything else binary.
pub fn save_matrix(path: &Path, x: &Array2<f64>) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    match format_of(path) {
        MatrixFormat::Csv => write_matrix_csv(x, w),
        MatrixFormat::Binary => write_matrix_binary(x, w),
    }
}

/// Loads a matrix, recognizing the binary form by its magic bytes.
pub fn load_matrix(path: &Path) -> Result<Array2<f64>> {
    let source = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);
    let head = r.fill_buf()?;
    if head.starts_with(MATRIX_MAGIC) {
        read_matrix_binary(r, &source)
    } else {
        read_matrix_csv(r, &source)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    /// `0` healthy, `1` patient, `null` unlabeled.
    pub label: Option<i64>,
    pub site: String,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub num_nodes: usize,
    pub timepoints: usize,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    /// Checks labels, ids and split names, reporting every problem found.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut seen = HashSet::new();
        let mut dups = Vec::new();
        for e in &self.samples {
            if !seen.insert(e.id.as_str()) && !dups.contains(&e.id) {
                dups.push(e.id.clone());
            }
            if let Some(l) = e.label {
                if l != 0 && l != 1 {
                    problems.push(format!("sample {:?} has out-of-range label {l}", e.id));
                }
            }
            if Split::parse(&e.split).is_none() {
                problems.push(format!("sample {:?} has unknown split {:?}", e.id, e.split));
            }
        }
        if !dups.is_empty() {
            problems.push(format!("duplicate sample ids: {}", dups.join(", ")));
        }
        if self.num_nodes == 0 || self.timepoints == 0 {
            problems.push("num_nodes and timepoints must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(invalid(format!("invalid manifest: {}", problems.join("; "))))
        }
    }
}

fn label_of(l: Option<i64>) -> Label {
    match l {
        Some(0) => Label::Healthy,
        Some(_) => Label::Patient,
        None => Label::Unlabeled,
    }
}

/// Loads every sample listed in a manifest, checking dimensions against it.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<Sample>> {
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(manifest_path)?))?;
    manifest.validate()?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .samples
        .iter()
        .map(|e| {
            let p = Path::new(&e.path);
            let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            let x = load_matrix(&full)?;
            if x.dim() != (manifest.num_nodes, manifest.timepoints) {
                return Err(invalid(format!(
                    "sample {:?} is {}x{}, manifest declares {}x{}",
                    e.id,
                    x.nrows(),
                    x.ncols(),
                    manifest.num_nodes,
                    manifest.timepoints
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("sample {:?} contains non-finite values", e.id)));
            }
            Ok(Sample {
                id: e.id.clone(),
                x,
                label: label_of(e.label),
                site: e.site.clone(),
                split: Split::parse(&e.split).expect("validated"),
            })
        })
        .collect()
}

/// Writes samples under `dir/data/` and a `manifest.json` next to them.
pub fn save_dataset(dir: &Path, samples: &[Sample], format: MatrixFormat) -> Result<PathBuf> {
    let first = samples.first().ok_or_else(|| invalid("cannot save an empty dataset"))?;
    let (v, t) = first.x.dim();
    if samples.iter().any(|s| s.x.dim() != (v, t)) {
        return Err(invalid("all samples must share one shape"));
    }
    std::fs::create_dir_all(dir.join("data"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("data/{}.{}", s.id, format.extension());
        save_matrix(&dir.join(&rel), &s.x)?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            path: rel,
            label: s.label.as_class().map(i64::from),
            site: s.site.clone(),
            split: s.split.name().to_string(),
        });
    }
    let manifest = Manifest { num_nodes: v, timepoints: t, samples: entries };
    manifest.validate()?;
    let path = dir.join("manifest.json");
    let mut w = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn csv_non_numeric_cell_names_position() {
        let err = read_matrix_csv("1,2,3\n4,x,6\n".as_bytes(), "m.csv").unwrap_err();
        match err {
            Error::Parse { location, .. } => assert_eq!(location, "row 2, column 2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_ragged_rejected() {
        assert!(read_matrix_csv("1,2\n3\n".as_bytes(), "m.csv").is_err());
    }

    #[test]
    fn csv_round_trip_exact() {
        let x = array![[0.1, -1.0 / 3.0, 1e-300], [std::f64::consts::PI, 2.5e10, -0.0]];
        let mut buf = Vec::new();
        write_matrix_csv(&x, &mut buf).unwrap();
        let back = read_matrix_csv(buf.as_slice(), "m").unwrap();
        assert!(x.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn binary_truncated_rejected() {
        let mut buf = Vec::new();
        write_matrix_binary(&array![[1.0, 2.0]], &mut buf).unwrap();
        buf.pop();
        assert!(matches!(read_matrix_binary(buf.as_slice(), "m"), Err(Error::Parse { .. })));
    }

    #[test]
    fn manifest_validation_lists_problems() {
        let entry = |id: &str, label, split: &str| ManifestEntry {
            id: id.into(),
            path: "x.csv".into(),
            label,
            site: "s".into(),
            split: split.into(),
        };
        let m = Manifest {
            num_nodes: 2,
            timepoints: 3,
            samples: vec![entry("a", Some(0), "population"), entry("a", Some(2), "population"), entry("b", None, "train")],
        };
        let msg = m.validate().unwrap_err().to_string();
        assert!(msg.contains("duplicate sample ids: a"));
        assert!(msg.contains("out-of-range label 2"));
        assert!(msg.contains("unknown split \"train\""));
    }
}
