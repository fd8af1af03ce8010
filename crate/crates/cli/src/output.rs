//! Header block, CSV/JSON rendering and atomic file writes.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use gfbsde::{Error, Result};

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Header {
    pub tool: String,
    pub schema: String,
    pub config_hash: String,
    pub seed: u64,
    pub cp_formula: String,
}

impl Header {
    pub fn new(schema: &str, config_hash: &str, seed: u64, cp_formula: &str) -> Self {
        Header {
            tool: format!("gfbsde {}", env!("CARGO_PKG_VERSION")),
            schema: format!("{schema}/1"),
            config_hash: config_hash.to_string(),
            seed,
            cp_formula: cp_formula.to_string(),
        }
    }

    pub fn with_schema(&self, schema: &str) -> Self {
        Header {
            schema: format!("{schema}/1"),
            ..self.clone()
        }
    }

    fn csv_lines(&self) -> String {
        format!(
            "# {}\n# schema: {}\n# config-hash: {}\n# seed: {}\n# bdg: C(p) = {}\n",
            self.tool, self.schema, self.config_hash, self.seed, self.cp_formula
        )
    }
}

/// Shortest round-trip text; `nan`/`inf` spelled out, empty for `None`.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:e}")
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// CSV document: header block, `# key: value` notes, then the table.
pub struct CsvDoc {
    header: Header,
    notes: Vec<(String, String)>,
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvDoc {
    pub fn new(header: Header, columns: &[&str]) -> Self {
        CsvDoc {
            header,
            notes: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.push((key.to_string(), value.to_string()));
    }

    pub fn row(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> Result<Vec<u8>> {
        let mut out = self.header.csv_lines().into_bytes();
        for (k, v) in &self.notes {
            out.extend_from_slice(format!("# {k}: {v}\n").as_bytes());
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Config {
            key: "output".into(),
            message: e.to_string(),
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config {
        key: "output".into(),
        message: e.to_string(),
    }
}

pub fn json_doc<T: Serialize>(header: &Header, result: &T) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct Doc<'a, T> {
        header: &'a Header,
        result: &'a T,
    }
    let mut v = serde_json::to_vec_pretty(&Doc { header, result }).map_err(|e| Error::Config {
        key: "output".into(),
        message: e.to_string(),
    })?;
    v.push(b'\n');
    Ok(v)
}

/// One emitted document; `None` goes to stdout.
pub struct Artifact {
    pub path: Option<PathBuf>,
    pub bytes: Vec<u8>,
}

/// Temp file in the target directory, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e: std::io::Error| Error::Config {
        key: "output".into(),
        message: format!("{}: {e}", path.display()),
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn emit(artifacts: &[Artifact]) -> Result<()> {
    for a in artifacts {
        match &a.path {
            Some(p) => write_atomic(p, &a.bytes)?,
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(&a.bytes)
                    .and_then(|_| out.flush())
                    .map_err(|e| Error::Config {
                        key: "output".into(),
                        message: e.to_string(),
                    })?;
            }
        }
    }
    Ok(())
}
