use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::encoder::{NormKind, Tap};
use crate::error::{Error, Result};
use crate::ssl::Algorithm;

const LEADING: [&str; 9] = [
    "fingerprint",
    "algorithm",
    "depth",
    "width",
    "norm",
    "seed",
    "epoch",
    "params",
    "test_error",
];
const TRAILING: [&str; 2] = ["dup_warn", "wall_s"];

/// One measurement of one grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRecord {
    pub fingerprint: String,
    pub algorithm: Algorithm,
    pub depth: String,
    pub width: usize,
    pub norm: NormKind,
    pub seed: u64,
    pub epoch: usize,
    pub params: usize,
    pub test_error: f64,
    /// `−E_s` per tap and exponent, laid out `[s][tap]` in the order of the
    /// owning [`RecordSet`]'s `s` list and [`Tap::ALL`].
    pub diversity: Vec<f64>,
    /// Taps whose measurement saw coinciding vectors.
    pub dup_warn: Vec<Tap>,
    pub wall_s: Option<f64>,
}

fn column(tap: Tap, s: f64) -> String {
    format!("div_{}_s{s}", tap.name())
}

/// Records sharing one list of energy exponents, kept in canonical order
/// with at most one record per (fingerprint, epoch).
#[derive(Clone, Debug, PartialEq)]
pub struct RecordSet {
    s: Vec<f64>,
    records: Vec<ExperimentRecord>,
}

impl RecordSet {
    pub fn new(s: Vec<f64>) -> Self {
        RecordSet { s, records: Vec::new() }
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn records(&self) -> &[ExperimentRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn fingerprints(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.fingerprint.as_str()).collect()
    }

    /// `−E_s` of `tap` in `r`, if `s` is one of this set's exponents.
    pub fn diversity(&self, r: &ExperimentRecord, tap: Tap, s: f64) -> Option<f64> {
        let si = self.s.iter().position(|&x| x == s)?;
        let ti = Tap::ALL.iter().position(|&t| t == tap)?;
        r.diversity.get(si * Tap::ALL.len() + ti).copied()
    }

    /// Adds records, replacing any with the same (fingerprint, epoch).
    pub fn extend(&mut self, records: impl IntoIterator<Item = ExperimentRecord>) -> Result<()> {
        let want = self.s.len() * Tap::ALL.len();
        for r in records {
            if r.diversity.len() != want {
                return Err(Error::Records(format!(
                    "record has {} diversity values, expected {want}",
                    r.diversity.len()
                )));
            }
            self.records
                .retain(|o| !(o.fingerprint == r.fingerprint && o.epoch == r.epoch));
            self.records.push(r);
        }
        self.records.sort_by(|a, b| {
            (
                a.algorithm,
                &a.depth,
                a.width,
                a.norm.to_string(),
                a.seed,
                &a.fingerprint,
                a.epoch,
            )
                .cmp(&(
                    b.algorithm,
                    &b.depth,
                    b.width,
                    b.norm.to_string(),
                    b.seed,
                    &b.fingerprint,
                    b.epoch,
                ))
        });
        Ok(())
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = LEADING.iter().map(|s| s.to_string()).collect();
        for &s in &self.s {
            h.extend(Tap::ALL.iter().map(|&t| column(t, s)));
        }
        h.extend(TRAILING.iter().map(|s| s.to_string()));
        h
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header())?;
        for r in &self.records {
            let mut row = vec![
                r.fingerprint.clone(),
                r.algorithm.to_string(),
                r.depth.clone(),
                r.width.to_string(),
                r.norm.to_string(),
                r.seed.to_string(),
                r.epoch.to_string(),
                r.params.to_string(),
                r.test_error.to_string(),
            ];
            row.extend(r.diversity.iter().map(|v| v.to_string()));
            row.push(r.dup_warn.iter().map(|t| t.name()).collect::<Vec<_>>().join(";"));
            row.push(r.wall_s.map(|w| w.to_string()).unwrap_or_default());
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header: Vec<String> = rd.headers()?.iter().map(|s| s.to_string()).collect();
        let n = header.len();
        let ok_frame = n >= LEADING.len() + TRAILING.len()
            && header[..LEADING.len()].iter().zip(LEADING).all(|(a, b)| a == b)
            && header[n - TRAILING.len()..].iter().zip(TRAILING).all(|(a, b)| a == b);
        if !ok_frame {
            return Err(Error::Records(format!("unexpected header {header:?}")));
        }
        let div_cols = &header[LEADING.len()..n - TRAILING.len()];
        if !div_cols.len().is_multiple_of(Tap::ALL.len()) {
            return Err(Error::Records("diversity columns do not cover every tap".into()));
        }
        let mut s = Vec::new();
        for chunk in div_cols.chunks(Tap::ALL.len()) {
            let v = chunk[0]
                .strip_prefix("div_conv1_s")
                .and_then(|x| x.parse::<f64>().ok())
                .ok_or_else(|| Error::Records(format!("bad diversity column {:?}", chunk[0])))?;
            for (c, &t) in chunk.iter().zip(&Tap::ALL) {
                if *c != column(t, v) {
                    return Err(Error::Records(format!("bad diversity column {c:?}")));
                }
            }
            s.push(v);
        }

        let mut set = RecordSet::new(s);
        let mut seen = BTreeSet::new();
        let mut rows = Vec::new();
        for (line, row) in rd.records().enumerate() {
            let row = row?;
            let bad = |what: &str| Error::Records(format!("row {}: bad {what}", line + 1));
            let num = |i: usize, what: &str| row[i].parse::<f64>().map_err(|_| bad(what));
            let int = |i: usize, what: &str| row[i].parse::<u64>().map_err(|_| bad(what));
            let fingerprint = row[0].to_string();
            let epoch = int(6, "epoch")? as usize;
            if !seen.insert((fingerprint.clone(), epoch)) {
                return Err(Error::Records(format!("duplicate record {fingerprint} epoch {epoch}")));
            }
            let diversity = (LEADING.len()..n - TRAILING.len())
                .map(|i| num(i, "diversity"))
                .collect::<Result<Vec<_>>>()?;
            let dup = &row[n - 2];
            let dup_warn = if dup.is_empty() {
                Vec::new()
            } else {
                dup.split(';').map(|t| t.parse::<Tap>()).collect::<Result<Vec<_>>>()?
            };
            let wall = &row[n - 1];
            rows.push(ExperimentRecord {
                fingerprint,
                algorithm: row[1].parse()?,
                depth: row[2].to_string(),
                width: int(3, "width")? as usize,
                norm: row[4].parse()?,
                seed: int(5, "seed")?,
                epoch,
                params: int(7, "params")? as usize,
                test_error: num(8, "test_error")?,
                diversity,
                dup_warn,
                wall_s: if wall.is_empty() {
                    None
                } else {
                    Some(num(n - 1, "wall_s")?)
                },
            });
        }
        set.extend(rows)?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_csv(&text)
    }

    /// Writes through a temporary file and a rename, so readers never see
    /// a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::file(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}
