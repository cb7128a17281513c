//! On-disk dataset directory:
//!
//! ```text
//! manifest.toml     M, P, n, schema_version, [normalized], [planted_map_file]
//! spots.csv         spot_id,x,y
//! expr.csv          spot_id,<gene_1>,...,<gene_n>
//! patches.bin       M×P little-endian f32, row-major
//! planted_map.bin   n×P little-endian f64, row-major (synthetic only)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{SpotRecord, StDataset};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.toml";
const SPOTS: &str = "spots.csv";
const EXPR: &str = "expr.csv";
const PATCHES: &str = "patches.bin";
const PLANTED_MAP: &str = "planted_map.bin";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    #[serde(rename = "M")]
    spots: usize,
    #[serde(rename = "P")]
    patch_dim: usize,
    #[serde(rename = "n")]
    genes: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    planted_map_file: Option<String>,
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::MissingFile(p))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_f64(s: &str, path: &Path, what: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, format!("{what}: {s:?} is not a number")))?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{what} in {}", path.display())));
    }
    Ok(v)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))
}

/// Reads a dataset directory. Row order of `spots.csv` is preserved.
pub fn load_dataset(dir: &Path) -> Result<StDataset> {
    let manifest_path = require(dir, MANIFEST)?;
    let spots_path = require(dir, SPOTS)?;
    let expr_path = require(dir, EXPR)?;
    let patches_path = require(dir, PATCHES)?;

    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::parse(&manifest_path, e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::parse(
            &manifest_path,
            format!("unsupported schema_version {}", manifest.schema_version),
        ));
    }
    let (m, p, n) = (manifest.spots, manifest.patch_dim, manifest.genes);

    let mut rdr = csv_reader(&spots_path)?;
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(&spots_path, e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["spot_id", "x", "y"] {
        return Err(Error::parse(&spots_path, "header must be spot_id,x,y"));
    }
    let mut ids = Vec::new();
    let mut coords = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(&spots_path, e.to_string()))?;
        if rec.len() != 3 {
            return Err(Error::DimensionMismatch(format!(
                "{}: row with {} fields",
                spots_path.display(),
                rec.len()
            )));
        }
        ids.push(rec[0].to_string());
        coords.push((
            parse_f64(&rec[1], &spots_path, "x")?,
            parse_f64(&rec[2], &spots_path, "y")?,
        ));
    }
    if ids.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "manifest M = {m} but spots.csv has {} rows",
            ids.len()
        )));
    }

    let mut rdr = csv_reader(&expr_path)?;
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(&expr_path, e.to_string()))?
        .clone();
    if header.get(0) != Some("spot_id") {
        return Err(Error::parse(&expr_path, "first column must be spot_id"));
    }
    if header.len() != n + 1 {
        return Err(Error::DimensionMismatch(format!(
            "manifest n = {n} but expr.csv has {} gene columns",
            header.len().saturating_sub(1)
        )));
    }
    let gene_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut exprs = Vec::with_capacity(m);
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(&expr_path, e.to_string()))?;
        if rec.len() != n + 1 {
            return Err(Error::DimensionMismatch(format!(
                "expr.csv row {row} has {} fields, expected {}",
                rec.len(),
                n + 1
            )));
        }
        if ids.get(row).map(String::as_str) != Some(&rec[0]) {
            return Err(Error::parse(
                &expr_path,
                format!("row {row} is spot {:?}, out of order with spots.csv", &rec[0]),
            ));
        }
        let e = rec
            .iter()
            .skip(1)
            .map(|s| parse_f64(s, &expr_path, "expression"))
            .collect::<Result<Vec<_>>>()?;
        exprs.push(e);
    }
    if exprs.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "manifest M = {m} but expr.csv has {} rows",
            exprs.len()
        )));
    }

    let bytes = read_bytes(&patches_path)?;
    if bytes.len() != m * p * 4 {
        return Err(Error::DimensionMismatch(format!(
            "patches.bin holds {} bytes, expected M·P·4 = {}",
            bytes.len(),
            m * p * 4
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
        .collect();

    let spots = ids
        .into_iter()
        .zip(coords)
        .zip(exprs)
        .enumerate()
        .map(|(i, ((spot_id, coord), expr))| SpotRecord {
            spot_id,
            coord,
            patch: values[i * p..(i + 1) * p].to_vec(),
            expr,
        })
        .collect();
    let ds = StDataset::new(spots, gene_names, p, manifest.normalized)?;

    match manifest.planted_map_file {
        Some(name) => {
            let map_path = require(dir, &name)?;
            let bytes = read_bytes(&map_path)?;
            if bytes.len() != n * p * 8 {
                return Err(Error::DimensionMismatch(format!(
                    "{name} holds {} bytes, expected n·P·8 = {}",
                    bytes.len(),
                    n * p * 8
                )));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            ds.with_planted_map(Matrix::from_vec(n, p, data)?)
        }
        None => Ok(ds),
    }
}

/// Writes `ds` in the directory layout read by [`load_dataset`], creating
/// the directory if needed.
pub fn save_dataset(ds: &StDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in ds.spots() {
        if let Some(x) = s.patch.iter().find(|&&x| f64::from(x as f32) != x) {
            return Err(Error::invalid(format!(
                "patch value {x} of spot {} is not representable as f32",
                s.spot_id
            )));
        }
    }

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        spots: ds.len(),
        patch_dim: ds.patch_dim(),
        genes: ds.genes(),
        normalized: ds.is_normalized(),
        planted_map_file: ds.planted_map().map(|_| PLANTED_MAP.to_string()),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    write_file(&dir.join(MANIFEST), text.as_bytes())?;

    let mut spots = String::from("spot_id,x,y\n");
    for s in ds.spots() {
        spots.push_str(&format!("{},{},{}\n", csv_field(&s.spot_id), s.coord.0, s.coord.1));
    }
    write_file(&dir.join(SPOTS), spots.as_bytes())?;

    let mut expr = String::from("spot_id");
    for g in ds.gene_names() {
        expr.push(',');
        expr.push_str(&csv_field(g));
    }
    expr.push('\n');
    for s in ds.spots() {
        expr.push_str(&csv_field(&s.spot_id));
        for v in &s.expr {
            expr.push_str(&format!(",{v}"));
        }
        expr.push('\n');
    }
    write_file(&dir.join(EXPR), expr.as_bytes())?;

    let mut bytes = Vec::with_capacity(ds.len() * ds.patch_dim() * 4);
    for s in ds.spots() {
        for &x in &s.patch {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    write_file(&dir.join(PATCHES), &bytes)?;

    if let Some(map) = ds.planted_map() {
        let bytes: Vec<u8> = map.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect();
        write_file(&dir.join(PLANTED_MAP), &bytes)?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn fixture() -> StDataset {
        let spots = (0..4)
            .map(|i| SpotRecord {
                spot_id: format!("s{i}"),
                coord: (i as f64 * 1.5, -(i as f64)),
                patch: vec![i as f64, 0.25, -1.0],
                expr: vec![0.0, i as f64 / 3.0],
            })
            .collect();
        StDataset::new(spots, vec!["ACTB".into(), "a,b".into()], 3, true).unwrap()
    }

    #[test]
    fn four_spot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = fixture();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.len(), 4);
    }

    #[test]
    fn synthetic_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            grid_side: 5,
            patch_dim: 7,
            genes: 4,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg, 7).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        let bits = |m: Matrix<f64>| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.expr_matrix()), bits(ds.expr_matrix()));
        assert_eq!(back, ds);
    }

    #[test]
    fn manifest_gene_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&fixture(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replace("n = 2", "n = 3");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn missing_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&fixture(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(PATCHES)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingFile(_))));

        save_dataset(&fixture(), dir.path()).unwrap();
        let spots = fs::read_to_string(dir.path().join(SPOTS))
            .unwrap()
            .replace("s1,", "s0,");
        fs::write(dir.path().join(SPOTS), spots).unwrap();
        assert!(load_dataset(dir.path()).is_err());

        save_dataset(&fixture(), dir.path()).unwrap();
        let expr = fs::read_to_string(dir.path().join(EXPR))
            .unwrap()
            .replace("s3,0,1", "s3,NaN,1");
        fs::write(dir.path().join(EXPR), expr).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn duplicate_spot_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&fixture(), dir.path()).unwrap();
        for f in [SPOTS, EXPR] {
            let t = fs::read_to_string(dir.path().join(f)).unwrap().replace("s2,", "s1,");
            fs::write(dir.path().join(f), t).unwrap();
        }
        assert!(matches!(load_dataset(dir.path()), Err(Error::Duplicate { .. })));
    }
}
