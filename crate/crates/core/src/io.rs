//! On-disk formats: model directories and headerless numeric CSV.
//!
//! A model directory holds `manifest.json` and one raw binary per layer
//! (`f64`, little-endian, column-major), so any language can read it back.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::model::{NetworkModel, ScaleLedger, WeightMatrix};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub rows: usize,
    pub cols: usize,
    pub file: String,
    pub byte_order: String,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub layers: Vec<LayerEntry>,
    pub last_layer_linear: bool,
    #[serde(default)]
    pub input_bias: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_ledger: Option<Vec<f64>>,
}

fn model_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::ModelFile { path: path.to_path_buf(), reason: reason.into() }
}

pub fn save_model(net: &NetworkModel, dir: &Path) -> Result<()> {
    save_model_with_ledger(net, None, dir)
}

pub fn save_model_with_ledger(net: &NetworkModel, ledger: Option<&ScaleLedger>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut layers = Vec::with_capacity(net.num_layers());
    for (l, w) in net.layers().iter().enumerate() {
        let file = format!("layer_{}.bin", l + 1);
        let mut bytes = Vec::with_capacity(w.len() * 8);
        // nalgebra storage is column-major already
        for v in w.as_matrix().iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        layers.push(LayerEntry {
            rows: w.nrows(),
            cols: w.ncols(),
            file,
            byte_order: "little-endian".into(),
            dtype: "f64".into(),
        });
    }
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        layers,
        last_layer_linear: net.last_layer_linear(),
        input_bias: net.input_bias(),
        scale_ledger: ledger.map(|l| l.masses().to_vec()),
    };
    let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<ModelManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| model_err(&path, e.to_string()))?;
    let manifest: ModelManifest = serde_json::from_str(&text).map_err(|e| model_err(&path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::UnknownVersion(manifest.format_version));
    }
    Ok(manifest)
}

pub fn load_model(dir: &Path) -> Result<NetworkModel> {
    Ok(load_model_with_ledger(dir)?.0)
}

pub fn load_model_with_ledger(dir: &Path) -> Result<(NetworkModel, Option<ScaleLedger>)> {
    let manifest = load_manifest(dir)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (l, entry) in manifest.layers.iter().enumerate() {
        let path = dir.join(&entry.file);
        if entry.byte_order != "little-endian" || entry.dtype != "f64" {
            return Err(model_err(&path, format!("unsupported encoding {} {}", entry.byte_order, entry.dtype)));
        }
        let bytes = fs::read(&path).map_err(|e| model_err(&path, e.to_string()))?;
        let expected = (entry.rows * entry.cols * 8) as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::SizeMismatch {
                layer: l + 1,
                file: entry.file.clone(),
                expected,
                found: bytes.len() as u64,
            });
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        layers.push(WeightMatrix::from_column_slice(entry.rows, entry.cols, &data)?);
    }
    let net = NetworkModel::new(layers, manifest.last_layer_linear)?.with_input_bias(manifest.input_bias);
    let ledger = manifest.scale_ledger.map(ScaleLedger::from_masses).transpose()?;
    Ok((net, ledger))
}

/// Samples as columns plus optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvData {
    pub x: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CsvOptions {
    pub header: bool,
    /// Treat the last column as an integer class label.
    pub labels: bool,
}

/// Reads one sample per line and returns `N x P` (features by samples).
pub fn load_csv_data(path: &Path, opts: CsvOptions) -> Result<CsvData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(opts.header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        let line = i + 1 + usize::from(opts.header);
        if *width.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Csv(format!(
                "line {line}: {} fields, expected {}",
                rec.len(),
                width.unwrap_or(0)
            )));
        }
        let mut fields: Vec<&str> = rec.iter().collect();
        if opts.labels {
            let last = fields.pop().ok_or_else(|| Error::Csv(format!("line {line}: missing label")))?;
            let label = last
                .parse::<usize>()
                .map_err(|_| Error::Csv(format!("line {line}: label {last:?} is not a class id")))?;
            labels.push(label);
        }
        let row = fields
            .iter()
            .map(|s| {
                let v = s
                    .parse::<f64>()
                    .map_err(|_| Error::Csv(format!("line {line}: {s:?} is not a number")))?;
                if v.is_finite() { Ok(v) } else { Err(Error::Csv(format!("line {line}: non-finite value"))) }
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let n = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || n == 0 {
        return Err(Error::Csv(format!("{}: no data", path.display())));
    }
    let x = DMatrix::from_fn(n, rows.len(), |i, p| rows[p][i]);
    Ok(CsvData { x, labels: opts.labels.then_some(labels) })
}

/// Writes `x` one sample (column) per line. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_csv_data(path: &Path, x: &DMatrix<f64>, labels: Option<&[usize]>, header: bool) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != x.ncols() {
            return Err(Error::Dimension(format!("{} labels for {} samples", l.len(), x.ncols())));
        }
    }
    let mut w = csv::WriterBuilder::new()
        .from_path(path)
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    if header {
        let mut names: Vec<String> = (0..x.nrows()).map(|i| format!("x{i}")).collect();
        if labels.is_some() {
            names.push("label".into());
        }
        w.write_record(&names).map_err(csv_err)?;
    }
    for p in 0..x.ncols() {
        let mut rec: Vec<String> = x.column(p).iter().map(|v| v.to_string()).collect();
        if let Some(l) = labels {
            rec.push(l[p].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a table with a header row; used for plot-ready report exports.
pub fn write_csv_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    w.write_record(header).map_err(|e| Error::Csv(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// `dir/name`, creating `dir` if needed.
pub fn output_path(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn net() -> NetworkModel {
        let w1 = WeightMatrix::new(DMatrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.1 - 0.3)).unwrap();
        let w2 = WeightMatrix::new(DMatrix::from_fn(4, 2, |i, j| 1.0 / (1.0 + i as f64 + 2.0 * j as f64))).unwrap();
        NetworkModel::new(vec![w1, w2], true).unwrap().with_input_bias(true)
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let n = net();
        save_model(&n, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back, n);
        for (a, b) in back.layers().iter().zip(n.layers()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn binary_layout_is_column_major_le() {
        let dir = tempdir().unwrap();
        save_model(&net(), dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("layer_2.bin")).unwrap();
        // entry (1, 0) comes second in column-major order
        let second = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
        assert_eq!(second, 1.0 / 2.0);
    }

    #[test]
    fn truncated_file_names_the_layer() {
        let dir = tempdir().unwrap();
        save_model(&net(), dir.path()).unwrap();
        let p = dir.path().join("layer_2.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        match load_model(dir.path()) {
            Err(Error::SizeMismatch { layer, expected, found, .. }) => {
                assert_eq!(layer, 2);
                assert_eq!(expected, 64);
                assert_eq!(found, 61);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn swapped_dims_break_the_chain() {
        let dir = tempdir().unwrap();
        save_model(&net(), dir.path()).unwrap();
        let mut m = load_manifest(dir.path()).unwrap();
        let e = &mut m.layers[1];
        std::mem::swap(&mut e.rows, &mut e.cols);
        write_json(&dir.path().join(MANIFEST_FILE), &m).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Dimension(_))));
    }

    #[test]
    fn unknown_version_and_missing_files() {
        let dir = tempdir().unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::ModelFile { .. })));
        save_model(&net(), dir.path()).unwrap();
        let mut m = load_manifest(dir.path()).unwrap();
        m.format_version = 7;
        write_json(&dir.path().join(MANIFEST_FILE), &m).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::UnknownVersion(7))));
        m.format_version = FORMAT_VERSION;
        write_json(&dir.path().join(MANIFEST_FILE), &m).unwrap();
        fs::remove_file(dir.path().join("layer_1.bin")).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::ModelFile { .. })));
    }

    #[test]
    fn ledger_survives_round_trip() {
        let dir = tempdir().unwrap();
        let ledger = ScaleLedger::from_masses(vec![2.0, 0.5]).unwrap();
        save_model_with_ledger(&net(), Some(&ledger), dir.path()).unwrap();
        let (_, back) = load_model_with_ledger(dir.path()).unwrap();
        assert_eq!(back, Some(ledger));
    }

    #[test]
    fn csv_is_transposed_into_columns() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "1,2\n3,4\n").unwrap();
        let d = load_csv_data(&p, CsvOptions::default()).unwrap();
        assert_eq!(d.x, DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 2.0, 4.0]));
        assert_eq!(d.labels, None);
    }

    #[test]
    fn csv_errors() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "").unwrap();
        assert!(matches!(load_csv_data(&p, CsvOptions::default()), Err(Error::Csv(_))));
        fs::write(&p, "1,2\n3\n").unwrap();
        assert!(matches!(load_csv_data(&p, CsvOptions::default()), Err(Error::Csv(_))));
        fs::write(&p, "1,x\n").unwrap();
        assert!(matches!(load_csv_data(&p, CsvOptions::default()), Err(Error::Csv(_))));
        fs::write(&p, "1,0.5\n").unwrap();
        assert!(load_csv_data(&p, CsvOptions { labels: true, header: false }).is_err());
    }

    #[test]
    fn csv_with_header_and_labels() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let x = DMatrix::from_row_slice(2, 3, &[0.1, -2.5, 1e-300, 3.0, 7.25, -0.0]);
        write_csv_data(&p, &x, Some(&[0, 1, 1]), true).unwrap();
        let back = load_csv_data(&p, CsvOptions { header: true, labels: true }).unwrap();
        assert_eq!(back.x, x);
        assert_eq!(back.labels, Some(vec![0, 1, 1]));
    }
}
