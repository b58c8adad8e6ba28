//! JSON model files and versioned CSV tables.
//!
//! Every CSV table starts with a `# weightcert <kind> v1` comment line followed
//! by a header row. Files are written to a sibling temporary path and renamed
//! into place, so a failed write leaves nothing behind.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attack::RobustCurve;
use crate::bounds::{MarginCertificate, PairBound};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{Activation, Network, NetworkSpec};
use crate::trainer::{EpochRecord, LayerNorms, RunRecord};

pub const CSV_VERSION: u32 = 1;

pub const KIND_CERTIFICATES: &str = "certificates";
pub const KIND_RUN: &str = "run";
pub const KIND_ATTACK: &str = "attack";
pub const KIND_ANALYSIS: &str = "analysis";
pub const KIND_SWEEP: &str = "sweep";
pub const KIND_QUANTIZE: &str = "quantize";

/// On-disk model layout: weight matrices flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<f64>>,
}

impl ModelFile {
    pub fn from_network(net: &Network) -> Self {
        ModelFile {
            layer_dims: net.spec().layer_dims().to_vec(),
            activation: net.activation(),
            weights: net
                .weights()
                .iter()
                .map(|w| w.as_slice().to_vec())
                .collect(),
        }
    }

    pub fn into_network(self) -> Result<Network> {
        let spec = NetworkSpec::new(self.layer_dims, self.activation)?;
        let dims = spec.layer_dims();
        if self.weights.len() != dims.len() - 1 {
            return Err(Error::dimension(
                "model weight count",
                dims.len() - 1,
                self.weights.len(),
            ));
        }
        let weights = self
            .weights
            .into_iter()
            .zip(dims.windows(2))
            .map(|(flat, d)| Matrix::new(d[1], d[0], flat))
            .collect::<Result<Vec<_>>>()?;
        Network::new(spec.activation(), weights)
    }
}

pub fn network_to_json(net: &Network) -> Result<String> {
    Ok(serde_json::to_string(&ModelFile::from_network(net))?)
}

pub fn network_from_json(text: &str) -> Result<Network> {
    serde_json::from_str::<ModelFile>(text)?.into_network()
}

pub fn save_network(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), network_to_json(net)?.as_bytes())
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    network_from_json(&fs::read_to_string(path)?)
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let result = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn version_line(kind: &str) -> String {
    format!("# weightcert {kind} v{CSV_VERSION}")
}

/// Raw table: header plus string records.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn table_to_string(kind: &str, table: &Table) -> Result<String> {
    let mut buf = Vec::new();
    writeln!(buf, "{}", version_line(kind))?;
    let mut w = csv::Writer::from_writer(&mut buf);
    w.write_record(&table.header)?;
    for row in &table.rows {
        w.write_record(row)?;
    }
    w.flush()?;
    drop(w);
    String::from_utf8(buf).map_err(|e| Error::CsvFormat(e.to_string()))
}

pub fn table_from_str(kind: &str, text: &str) -> Result<Table> {
    let body = check_version(kind, text)?;
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(body.as_bytes());
    let header = r.headers()?.iter().map(str::to_owned).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_owned).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok(Table { header, rows })
}

/// Serializes typed rows under a version comment.
pub fn rows_to_string<T: Serialize>(kind: &str, rows: &[T]) -> Result<String> {
    let mut buf = Vec::new();
    writeln!(buf, "{}", version_line(kind))?;
    let mut w = csv::Writer::from_writer(&mut buf);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    drop(w);
    String::from_utf8(buf).map_err(|e| Error::CsvFormat(e.to_string()))
}

pub fn rows_from_str<T: DeserializeOwned>(kind: &str, text: &str) -> Result<Vec<T>> {
    let body = check_version(kind, text)?;
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(body.as_bytes())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn write_rows<T: Serialize>(path: impl AsRef<Path>, kind: &str, rows: &[T]) -> Result<()> {
    write_atomic(path.as_ref(), rows_to_string(kind, rows)?.as_bytes())
}

pub fn read_rows<T: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<Vec<T>> {
    rows_from_str(kind, &fs::read_to_string(path)?)
}

fn check_version<'a>(kind: &str, text: &'a str) -> Result<&'a str> {
    let expected = version_line(kind);
    let mut lines = text.as_bytes().lines();
    match lines.next() {
        Some(Ok(first)) if first.trim_end() == expected => {}
        Some(Ok(first)) => {
            return Err(Error::CsvFormat(format!(
                "expected first line {expected:?}, found {:?}",
                first.trim_end()
            )))
        }
        _ => return Err(Error::CsvFormat(format!("missing {expected:?} line"))),
    }
    Ok(text.split_once('\n').map_or("", |(_, rest)| rest))
}

/// One row per (sample, competitor) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRow {
    pub sample_id: usize,
    pub label: usize,
    pub natural_margin: f64,
    pub eta_max: f64,
    pub certified: bool,
    pub competitor: usize,
    pub pair_margin: f64,
    pub pair_eta: f64,
}

pub fn certificates_to_string(certs: &[MarginCertificate]) -> Result<String> {
    let rows: Vec<CertificateRow> = certs
        .iter()
        .flat_map(|c| {
            c.pairs.iter().map(move |p| CertificateRow {
                sample_id: c.sample_id,
                label: c.label,
                natural_margin: c.natural_margin,
                eta_max: c.eta_max,
                certified: c.certified,
                competitor: p.competitor,
                pair_margin: p.margin,
                pair_eta: p.eta,
            })
        })
        .collect();
    rows_to_string(KIND_CERTIFICATES, &rows)
}

/// Regroups consecutive rows sharing a sample id.
pub fn certificates_from_str(text: &str) -> Result<Vec<MarginCertificate>> {
    let rows: Vec<CertificateRow> = rows_from_str(KIND_CERTIFICATES, text)?;
    let mut out: Vec<MarginCertificate> = Vec::new();
    for r in rows {
        let pair = PairBound {
            competitor: r.competitor,
            margin: r.pair_margin,
            eta: r.pair_eta,
        };
        match out.last_mut() {
            Some(c) if c.sample_id == r.sample_id => c.pairs.push(pair),
            _ => out.push(MarginCertificate {
                sample_id: r.sample_id,
                label: r.label,
                natural_margin: r.natural_margin,
                eta_max: r.eta_max,
                pairs: vec![pair],
                certified: r.certified,
            }),
        }
    }
    Ok(out)
}

pub fn write_certificates(path: impl AsRef<Path>, certs: &[MarginCertificate]) -> Result<()> {
    write_atomic(path.as_ref(), certificates_to_string(certs)?.as_bytes())
}

pub fn read_certificates(path: impl AsRef<Path>) -> Result<Vec<MarginCertificate>> {
    certificates_from_str(&fs::read_to_string(path)?)
}

const RUN_FIXED: [&str; 5] = [
    "epoch",
    "train_loss",
    "train_acc",
    "test_acc",
    "wall_clock_secs",
];

/// Fixed columns, then `col_l1_k`, `row_l1_k`, `spectral_k` for each layer `k`.
pub fn run_record_to_string(run: &RunRecord) -> Result<String> {
    let layers = run.epochs.first().map_or(0, |e| e.layer_norms.len());
    let mut header: Vec<String> = RUN_FIXED.iter().map(|s| s.to_string()).collect();
    for k in 1..=layers {
        header.extend([
            format!("col_l1_{k}"),
            format!("row_l1_{k}"),
            format!("spectral_{k}"),
        ]);
    }
    let mut rows = Vec::with_capacity(run.len());
    for e in &run.epochs {
        if e.layer_norms.len() != layers {
            return Err(Error::dimension(
                "run record layers",
                layers,
                e.layer_norms.len(),
            ));
        }
        let mut row = vec![
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.train_accuracy.to_string(),
            e.test_accuracy.map_or(String::new(), |v| v.to_string()),
            e.wall_clock_secs.to_string(),
        ];
        for n in &e.layer_norms {
            row.extend([
                n.col_l1.to_string(),
                n.row_l1.to_string(),
                n.spectral.to_string(),
            ]);
        }
        rows.push(row);
    }
    table_to_string(KIND_RUN, &Table { header, rows })
}

pub fn run_record_from_str(text: &str) -> Result<RunRecord> {
    let table = table_from_str(KIND_RUN, text)?;
    let fixed = RUN_FIXED.len();
    if table.header.len() < fixed
        || table.header[..fixed] != RUN_FIXED
        || (table.header.len() - fixed) % 3 != 0
    {
        return Err(Error::CsvFormat(format!(
            "unexpected run header {:?}",
            table.header
        )));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::CsvFormat(format!("not a number: {s:?}")))
    };
    let mut epochs = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        let epoch = row[0]
            .parse()
            .map_err(|_| Error::CsvFormat(format!("bad epoch {:?}", row[0])))?;
        let layer_norms = row[fixed..]
            .chunks(3)
            .map(|c| {
                Ok(LayerNorms {
                    col_l1: num(&c[0])?,
                    row_l1: num(&c[1])?,
                    spectral: num(&c[2])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: num(&row[1])?,
            train_accuracy: num(&row[2])?,
            test_accuracy: if row[3].is_empty() {
                None
            } else {
                Some(num(&row[3])?)
            },
            wall_clock_secs: num(&row[4])?,
            layer_norms,
        });
    }
    Ok(RunRecord { epochs })
}

pub fn write_run_record(path: impl AsRef<Path>, run: &RunRecord) -> Result<()> {
    write_atomic(path.as_ref(), run_record_to_string(run)?.as_bytes())
}

pub fn read_run_record(path: impl AsRef<Path>) -> Result<RunRecord> {
    run_record_from_str(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub eps: f64,
    pub accuracy: f64,
    /// AUC over the grid up to and including this row.
    pub auc_to_date: f64,
}

pub fn attack_rows(curve: &RobustCurve) -> Vec<AttackRow> {
    curve
        .points
        .iter()
        .enumerate()
        .map(|(i, &(eps, accuracy))| AttackRow {
            eps,
            accuracy,
            auc_to_date: curve.auc_to(i + 1),
        })
        .collect()
}

pub fn curve_from_rows(rows: &[AttackRow]) -> RobustCurve {
    RobustCurve {
        points: rows.iter().map(|r| (r.eps, r.accuracy)).collect(),
    }
}

/// One analyzed (model, setting) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub model: String,
    pub setting: String,
    pub samples: usize,
    pub accuracy: f64,
    pub prod_spectral: f64,
    pub spectral_of_product: f64,
    pub log_ratio: f64,
    pub layer: usize,
    pub eps: f64,
    pub gamma: f64,
    pub delta: f64,
    pub empirical_risk: f64,
    pub margin_complexity: f64,
    pub psi_complexity: f64,
    pub psi_complexity_all_layers: f64,
    pub confidence: f64,
    pub bound_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeRow {
    pub bits: u32,
    pub accuracy: f64,
    pub accuracy_drop: f64,
    pub max_abs_error: f64,
}

/// One trained model evaluated at one attack radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mu: f64,
    pub eps_train: f64,
    pub train_size: usize,
    pub seed: u64,
    pub eps_test: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub gap: f64,
    pub auc: f64,
    pub prod_spectral: f64,
    pub spectral_of_product: f64,
    pub log_ratio: f64,
}
