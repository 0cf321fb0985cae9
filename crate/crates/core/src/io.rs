//! Persistence of meshes, layouts, field points, lead fields and lattices.
//!
//! Everything is JSON except the lead field matrix, which is stored as a
//! little-endian binary blob next to a JSON sidecar:
//! magic `TESLF\0\0\x01`, `u32` rows, `u32` cols, then `f64` row-major.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::LeadField;
use crate::mesh::{Point, TargetSpec};
use crate::search::{lattice_rows, CandidateGrid};

pub const LEAD_FIELD_MAGIC: [u8; 8] = *b"TESLF\0\0\x01";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: schema error: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: field `{field}`: {message}")]
    Schema {
        path: String,
        field: String,
        message: String,
    },
    #[error("{path}: bad lead field header, expected magic TESLF")]
    Magic { path: String },
    #[error("{path}: csv error: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn schema(path: &Path, field: &str, message: impl Into<String>) -> IoError {
    IoError::Schema {
        path: path.display().to_string(),
        field: field.into(),
        message: message.into(),
    }
}

fn ensure_parent(path: &Path) -> Result<(), IoError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(io_err(dir)),
        _ => Ok(()),
    }
}

/// Pretty JSON with a trailing newline; creates missing parent directories.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Metadata stored next to the binary lead field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadFieldSidecar {
    pub rows: usize,
    pub cols: usize,
    pub electrode_ids: Vec<u32>,
    pub points: Vec<Point>,
    pub target: TargetSpec,
    pub target_rows: [usize; 3],
    /// Maximum absolute column sum of the lead field.
    pub zeta: f64,
    /// Largest absolute target component (A/m²).
    pub nu: f64,
    /// Spectral norm of the lead field.
    pub sigma_scale: f64,
}

impl LeadFieldSidecar {
    fn check(&self, path: &Path) -> Result<(), IoError> {
        let np = self.points.len();
        if self.rows != 3 * np {
            return Err(schema(path, "rows", format!("{} rows but {np} points", self.rows)));
        }
        if self.cols != self.electrode_ids.len() {
            return Err(schema(
                path,
                "cols",
                format!("{} columns but {} electrode ids", self.cols, self.electrode_ids.len()),
            ));
        }
        if self.target.field_point >= np {
            return Err(schema(path, "target.field_point", "outside the point set"));
        }
        let expected = [0, 1, 2].map(|k| k * np + self.target.field_point);
        if self.target_rows != expected {
            return Err(schema(path, "target_rows", format!("expected {expected:?}")));
        }
        for (field, v) in [("zeta", self.zeta), ("nu", self.nu), ("sigma_scale", self.sigma_scale)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(schema(path, field, format!("must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn write_lead_field_matrix(path: &Path, m: &DMatrix<f64>) -> Result<(), IoError> {
    ensure_parent(path)?;
    let (rows, cols) = m.shape();
    let to_u32 = |n: usize, field: &str| u32::try_from(n).map_err(|_| schema(path, field, "too large"));
    let mut buf = Vec::with_capacity(16 + 8 * rows * cols);
    buf.extend_from_slice(&LEAD_FIELD_MAGIC);
    buf.extend_from_slice(&to_u32(rows, "rows")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(cols, "cols")?.to_le_bytes());
    for i in 0..rows {
        for j in 0..cols {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

pub fn read_lead_field_matrix(path: &Path) -> Result<DMatrix<f64>, IoError> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(io_err(path))?;
    if buf.len() < 16 || buf[..8] != LEAD_FIELD_MAGIC {
        return Err(IoError::Magic {
            path: path.display().to_string(),
        });
    }
    let word = |k: usize| u32::from_le_bytes(buf[k..k + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(8), word(12));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(16));
    if expected != Some(buf.len()) {
        return Err(schema(
            path,
            "payload",
            format!("{} bytes do not hold a {rows}×{cols} matrix", buf.len()),
        ));
    }
    let data = &buf[16..];
    Ok(DMatrix::from_fn(rows, cols, |i, j| {
        let k = 8 * (i * cols + j);
        f64::from_le_bytes(data[k..k + 8].try_into().expect("8 bytes"))
    }))
}

pub fn write_lead_field(bin: &Path, sidecar_path: &Path, lf: &LeadField, sidecar: &LeadFieldSidecar) -> Result<(), IoError> {
    sidecar.check(sidecar_path)?;
    if lf.matrix.shape() != (sidecar.rows, sidecar.cols) {
        return Err(schema(sidecar_path, "rows", "sidecar dimensions differ from the matrix"));
    }
    write_lead_field_matrix(bin, &lf.matrix)?;
    write_json(sidecar_path, sidecar)
}

/// Reads a lead field and its sidecar, checking that they agree.
pub fn read_lead_field(bin: &Path, sidecar_path: &Path) -> Result<(LeadField, LeadFieldSidecar), IoError> {
    let sidecar: LeadFieldSidecar = read_json(sidecar_path)?;
    sidecar.check(sidecar_path)?;
    let matrix = read_lead_field_matrix(bin)?;
    if matrix.nrows() != sidecar.rows {
        return Err(schema(
            sidecar_path,
            "rows",
            format!("sidecar says {} but matrix has {}", sidecar.rows, matrix.nrows()),
        ));
    }
    if matrix.ncols() != sidecar.cols {
        return Err(schema(
            sidecar_path,
            "cols",
            format!("sidecar says {} but matrix has {}", sidecar.cols, matrix.ncols()),
        ));
    }
    let lf = LeadField {
        matrix,
        points: sidecar.points.clone(),
        electrode_ids: sidecar.electrode_ids.clone(),
    };
    Ok((lf, sidecar))
}

/// Writes one row per lattice cell, row-major, with the headers
/// `alpha_db,weight_db,gamma,theta,ad_deg,max_current_ma,status`.
pub fn write_lattice_csv(path: &Path, grid: &CandidateGrid) -> Result<(), IoError> {
    ensure_parent(path)?;
    let csv_err = |source| IoError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in lattice_rows(grid) {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_ball_mesh, FieldPointSet};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("tesopt-io-{}", std::process::id()));
        dir.join(name)
    }

    fn sample() -> (LeadField, LeadFieldSidecar) {
        let m = DMatrix::from_fn(6, 3, |i, j| (i as f64 + 1.0) * 0.1 - j as f64 * 1e-300);
        let lf = LeadField {
            matrix: m,
            points: vec![[0.0, 0.0, 0.01], [0.0, 0.01, 0.0]],
            electrode_ids: vec![1, 2, 3],
        };
        let side = LeadFieldSidecar {
            rows: 6,
            cols: 3,
            electrode_ids: vec![1, 2, 3],
            points: lf.points.clone(),
            target: TargetSpec {
                position: [0.0, 0.0, 0.01],
                orientation: [0.0, 0.0, 1.0],
                d_target: 0.2,
                field_point: 0,
            },
            target_rows: [0, 2, 4],
            zeta: 1.0,
            nu: 0.2,
            sigma_scale: 2.0,
        };
        (lf, side)
    }

    #[test]
    fn lead_field_round_trip_is_bitwise() {
        let (lf, side) = sample();
        let (b, s) = (tmp("rt.bin"), tmp("rt.json"));
        write_lead_field(&b, &s, &lf, &side).unwrap();
        let (back, side_back) = read_lead_field(&b, &s).unwrap();
        assert_eq!(side_back, side);
        for (u, v) in back.matrix.iter().zip(lf.matrix.iter()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let (lf, side) = sample();
        let (b, s) = (tmp("magic.bin"), tmp("magic.json"));
        write_lead_field(&b, &s, &lf, &side).unwrap();
        let mut bytes = fs::read(&b).unwrap();
        bytes[0] = b'X';
        fs::write(&b, bytes).unwrap();
        assert!(matches!(read_lead_field(&b, &s), Err(IoError::Magic { .. })));
    }

    #[test]
    fn wrong_sidecar_dims_are_rejected() {
        let (lf, side) = sample();
        let (b, s) = (tmp("dims.bin"), tmp("dims.json"));
        write_lead_field(&b, &s, &lf, &side).unwrap();
        let mut bad = side.clone();
        bad.cols = 2;
        bad.electrode_ids.pop();
        write_json(&s, &bad).unwrap();
        match read_lead_field(&b, &s) {
            Err(IoError::Schema { field, .. }) => assert_eq!(field, "cols"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let (lf, side) = sample();
        let (b, s) = (tmp("trunc.bin"), tmp("trunc.json"));
        write_lead_field(&b, &s, &lf, &side).unwrap();
        let bytes = fs::read(&b).unwrap();
        fs::write(&b, &bytes[..bytes.len() - 8]).unwrap();
        match read_lead_field(&b, &s) {
            Err(IoError::Schema { field, .. }) => assert_eq!(field, "payload"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let p = tmp("missing.json");
        write_json(&p, &serde_json::json!({"nodes": [], "tets": [], "labels": []})).unwrap();
        let err = read_json::<crate::mesh::HeadMesh>(&p).unwrap_err().to_string();
        assert!(err.contains("conductivities"), "{err}");
    }

    #[test]
    fn mesh_json_round_trip() {
        let mesh = generate_ball_mesh(&[0.09], &[0.33], 0.03).unwrap();
        let p = tmp("nested/dir/mesh.json");
        write_json(&p, &mesh).unwrap();
        let back: crate::mesh::HeadMesh = read_json(&p).unwrap();
        assert_eq!(back, mesh);
        let fp = FieldPointSet {
            points: vec![[0.1, 0.2, 0.3]],
            tets: vec![0],
            compartment: 1,
            seed: 7,
        };
        let q = tmp("fp.json");
        write_json(&q, &fp).unwrap();
        assert_eq!(read_json::<FieldPointSet>(&q).unwrap(), fp);
    }
}
