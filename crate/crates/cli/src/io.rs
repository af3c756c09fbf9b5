//! CSV ingest and emit.
//!
//! Numbers are written with the shortest representation that parses back
//! to the same `f64`, so every emitted file re-ingests bit for bit.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::CliError;

/// Marginals summing to one within this are accepted as is.
pub const MARGINAL_ACCEPT_TOL: f64 = 1e-9;
/// Marginals within this are renormalized with a warning; beyond it they
/// are rejected.
pub const MARGINAL_RENORMALIZE_TOL: f64 = 1e-6;

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a dense numeric CSV. Row numbers in errors are file lines.
pub fn parse_matrix<R: Read>(
    reader: R,
    path: &Path,
    skip_header: bool,
) -> Result<DMatrix<f64>, CliError> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(skip_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for record in csv.records() {
        let record = record.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line());
            CliError::Parse {
                path: path.to_path_buf(),
                row,
                column: 0,
                message: e.to_string(),
            }
        })?;
        let row = record.position().map_or(rows + 1, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(CliError::Parse {
                    path: path.to_path_buf(),
                    row,
                    column: record.len().min(w) + 1,
                    message: format!("expected {w} fields, found {}", record.len()),
                })
            }
            _ => {}
        }
        for (c, field) in record.iter().enumerate() {
            let parse_error = |message: String| CliError::Parse {
                path: path.to_path_buf(),
                row,
                column: c + 1,
                message,
            };
            let v: f64 = field
                .parse()
                .map_err(|_| parse_error(format!("cannot parse {field:?} as a number")))?;
            if !v.is_finite() {
                return Err(parse_error(format!("non-finite value {field:?}")));
            }
            data.push(v);
        }
        rows += 1;
    }
    let Some(cols) = width else {
        return Err(CliError::input(path, "file contains no data rows"));
    };
    Ok(DMatrix::from_row_slice(rows as usize, cols, &data))
}

pub fn read_matrix(path: &Path, skip_header: bool) -> Result<DMatrix<f64>, CliError> {
    parse_matrix(open(path)?, path, skip_header)
}

/// A probability vector stored as one row or one column.
pub fn read_marginal(path: &Path, skip_header: bool) -> Result<DVector<f64>, CliError> {
    let m = read_matrix(path, skip_header)?;
    let v = if m.nrows() == 1 || m.ncols() == 1 {
        DVector::from_iterator(m.len(), m.iter().copied())
    } else {
        return Err(CliError::input(
            path,
            format!("marginal must be a single row or column, found {}x{}", m.nrows(), m.ncols()),
        ));
    };
    normalize_marginal(v, path)
}

pub fn normalize_marginal(v: DVector<f64>, path: &Path) -> Result<DVector<f64>, CliError> {
    if let Some(i) = v.iter().position(|x| *x < 0.0) {
        return Err(CliError::input(path, format!("negative mass {} at entry {}", v[i], i + 1)));
    }
    let s = v.sum();
    let gap = (s - 1.0).abs();
    if gap <= MARGINAL_ACCEPT_TOL {
        Ok(v)
    } else if gap <= MARGINAL_RENORMALIZE_TOL {
        log::warn!("{}: marginal sums to {s}, renormalizing", path.display());
        Ok(v / s)
    } else {
        Err(CliError::input(path, format!("marginal sums to {s}, not 1")))
    }
}

/// Shortest round-trip decimal form.
pub fn format_value(v: f64) -> String {
    format!("{v}")
}

pub fn write_matrix<W: Write>(writer: W, m: &DMatrix<f64>) -> csv::Result<()> {
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for row in m.row_iter() {
        csv.write_record(row.iter().map(|v| format_value(*v)))?;
    }
    csv.flush()?;
    Ok(())
}

pub fn matrix_to_string(m: &DMatrix<f64>) -> String {
    let mut buf = Vec::new();
    write_matrix(&mut buf, m).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

fn create(path: &Path) -> Result<File, CliError> {
    File::create(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_matrix(path: &Path, m: &DMatrix<f64>) -> Result<(), CliError> {
    let file = create(path)?;
    write_matrix(file, m).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })
}

/// Vectors are written as one column.
pub fn save_vector(path: &Path, v: &DVector<f64>) -> Result<(), CliError> {
    save_matrix(path, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
}

/// Magnitude and phase files for a complex matrix.
pub fn save_complex(
    magnitude: &Path,
    phase: &Path,
    m: &DMatrix<Complex<f64>>,
) -> Result<(), CliError> {
    save_matrix(magnitude, &m.map(|z| z.norm()))?;
    save_matrix(phase, &m.map(|z| z.arg()))
}

pub fn read_complex(
    magnitude: &Path,
    phase: &Path,
) -> Result<DMatrix<Complex<f64>>, CliError> {
    let r = read_matrix(magnitude, false)?;
    let theta = read_matrix(phase, false)?;
    if r.shape() != theta.shape() {
        return Err(CliError::input(phase, "phase shape differs from magnitude shape"));
    }
    Ok(r.zip_map(&theta, Complex::from_polar))
}

/// `dir/stem.csv` -> `dir/stem.<name>.csv`.
pub fn sibling(primary: &Path, name: &str) -> PathBuf {
    let stem = primary
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = primary
        .extension()
        .map(|e| e.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    primary.with_file_name(format!("{stem}.{name}.{ext}"))
}

pub fn save_json(path: Option<&Path>, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable report");
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text).map_err(|source| CliError::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|source| CliError::Io {
                path: PathBuf::from("<stdout>"),
                source,
            }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn parse(text: &str) -> Result<DMatrix<f64>, CliError> {
        parse_matrix(text.as_bytes(), Path::new("mem.csv"), false)
    }

    #[test]
    fn parses_cloud() {
        assert_eq!(parse("0,0\n3,4\n").unwrap(), dmatrix![0.0, 0.0; 3.0, 4.0]);
    }

    #[test]
    fn error_names_row_and_column() {
        match parse("1,x\n") {
            Err(CliError::Parse { row, column, .. }) => assert_eq!((row, column), (1, 2)),
            other => panic!("unexpected {other:?}"),
        }
        match parse("1,2\n3,4\n5,nan\n") {
            Err(CliError::Parse { row, column, message, .. }) => {
                assert_eq!((row, column), (3, 2));
                assert!(message.contains("non-finite"));
            }
            other => panic!("unexpected {other:?}"),
        }
        match parse("1,2\n3\n") {
            Err(CliError::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse(""), Err(CliError::Input { .. })));
    }

    #[test]
    fn header_skipped_on_request() {
        let m = parse_matrix("x,y\n1,2\n".as_bytes(), Path::new("h.csv"), true).unwrap();
        assert_eq!(m, dmatrix![1.0, 2.0]);
    }

    #[test]
    fn marginal_tolerances() {
        let p = Path::new("m.csv");
        let ok = normalize_marginal(DVector::from_vec(vec![0.5, 0.5]), p).unwrap();
        assert_eq!(ok.as_slice(), &[0.5, 0.5]);
        let near = normalize_marginal(DVector::from_vec(vec![0.5, 0.5 + 5e-7]), p).unwrap();
        assert!((near.sum() - 1.0).abs() < 1e-15);
        assert!(normalize_marginal(DVector::from_vec(vec![0.5, 0.6]), p).is_err());
        assert!(normalize_marginal(DVector::from_vec(vec![1.5, -0.5]), p).is_err());
    }

    #[test]
    fn identity_emits_plain_integers() {
        assert_eq!(matrix_to_string(&DMatrix::identity(2, 2)), "1,0\n0,1\n");
    }

    #[test]
    fn emitted_values_reparse_exactly() {
        let m = dmatrix![0.1 + 0.2, 1e-300, -2.5e17; std::f64::consts::PI, 1.0 / 3.0, -0.0];
        let back = parse(&matrix_to_string(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(sibling(Path::new("out/op.csv"), "stationary"), Path::new("out/op.stationary.csv"));
        assert_eq!(sibling(Path::new("op"), "u"), Path::new("op.u.csv"));
    }
}
