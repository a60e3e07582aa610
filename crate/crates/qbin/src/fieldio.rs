//! QWF1 grid-field files, the on-disk catalog of an archive, and JSON run
//! configuration.
//!
//! Layout of a field file, all integers little-endian:
//!
//! ```text
//! "QWF1" | u32 header_len | header (UTF-8 `key=value` lines) | u64 payload_len | f32 payload
//! ```
//!
//! Header keys: `variable`, `units`, `n_lat`, `n_lon`, `latitudes`
//! (comma-separated), `lon_start`, `lon_step`, `date` (ISO-8601 day),
//! `lead`, `member`. The payload is row-major `[lat, lon]`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use qbin_core::config::RunConfig;
use qbin_core::field::{DailySeries, FieldKey, GridField};
use qbin_core::grid::LatLonGrid;

pub const MAGIC: &[u8; 4] = b"QWF1";
pub const EXTENSION: &str = "qwf";

#[derive(Debug, thiserror::Error)]
pub enum FieldIoError {
    #[error("bad magic {0:?}, expected \"QWF1\"")]
    BadMagic([u8; 4]),
    #[error("header declares {n_lat}x{n_lon} ({expected} bytes) but payload holds {actual} bytes")]
    DimMismatch {
        n_lat: usize,
        n_lon: usize,
        expected: u64,
        actual: u64,
    },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("invalid date {0:?}, expected YYYY-MM-DD")]
    BadDate(String),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("catalog: {0}")]
    Catalog(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] qbin_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub type Result<T, E = FieldIoError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FieldIoError + '_ {
    move |source| FieldIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn join_f64(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Serializes a field. Values are stored as 32-bit floats.
pub fn encode_field(field: &GridField) -> Result<Vec<u8>> {
    if let Some(i) = field
        .values
        .iter()
        .position(|v| !v.is_finite() || !(*v as f32).is_finite())
    {
        return Err(FieldIoError::NonFinite(i));
    }
    let g = &field.grid;
    for (k, v) in [("variable", &field.variable), ("units", &field.units)] {
        if v.contains('\n') || v.contains('=') {
            return Err(FieldIoError::BadHeader(format!(
                "{k} {v:?} contains a reserved character"
            )));
        }
    }
    let header = format!(
        "variable={}\nunits={}\nn_lat={}\nn_lon={}\nlatitudes={}\nlon_start={}\nlon_step={}\ndate={}\nlead={}\nmember={}\n",
        field.variable,
        field.units,
        g.n_lat(),
        g.n_lon(),
        join_f64(g.latitudes()),
        g.lon_start(),
        g.lon_step(),
        field.date.format("%Y-%m-%d"),
        field.lead,
        field.member
    );
    let payload_len = 4 * field.values.len() as u64;
    let mut out = Vec::with_capacity(16 + header.len() + payload_len as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload_len.to_le_bytes());
    for v in &field.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(FieldIoError::Truncated(format!(
                "{what} needs {n} bytes, {} left",
                self.bytes.len() - self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
}

fn parse_header(text: &str) -> Result<BTreeMap<&str, &str>> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FieldIoError::BadHeader(format!("line {line:?} has no '='")))?;
        if map.insert(k, v).is_some() {
            return Err(FieldIoError::BadHeader(format!("duplicate key {k}")));
        }
    }
    Ok(map)
}

fn header_value<T: std::str::FromStr>(h: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    let raw = h
        .get(key)
        .ok_or_else(|| FieldIoError::BadHeader(format!("missing key {key}")))?;
    raw.parse()
        .map_err(|_| FieldIoError::BadHeader(format!("{key}={raw:?} does not parse")))
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| FieldIoError::BadDate(s.to_string()))
}

/// Parses a field from its serialized bytes.
pub fn decode_field(bytes: &[u8]) -> Result<GridField> {
    let mut c = Cursor { bytes, at: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().expect("four bytes");
    if &magic != MAGIC {
        return Err(FieldIoError::BadMagic(magic));
    }
    let header_len =
        u32::from_le_bytes(c.take(4, "header length")?.try_into().expect("four bytes")) as usize;
    let text = std::str::from_utf8(c.take(header_len, "header")?)
        .map_err(|e| FieldIoError::BadHeader(format!("not UTF-8: {e}")))?;
    let h = parse_header(text)?;
    let n_lat: usize = header_value(&h, "n_lat")?;
    let n_lon: usize = header_value(&h, "n_lon")?;
    let lat_text = h
        .get("latitudes")
        .ok_or_else(|| FieldIoError::BadHeader("missing key latitudes".into()))?;
    let latitudes = lat_text
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| FieldIoError::BadHeader(format!("latitude {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if latitudes.len() != n_lat {
        return Err(FieldIoError::BadHeader(format!(
            "{} latitudes for n_lat={n_lat}",
            latitudes.len()
        )));
    }
    let date_text = h
        .get("date")
        .ok_or_else(|| FieldIoError::BadHeader("missing key date".into()))?;
    let date = parse_date(date_text)?;
    let grid = LatLonGrid::new(
        latitudes,
        header_value(&h, "lon_start")?,
        header_value(&h, "lon_step")?,
        n_lon,
    )?;

    let declared = u64::from_le_bytes(
        c.take(8, "payload length")?
            .try_into()
            .expect("eight bytes"),
    );
    let expected = 4 * (n_lat * n_lon) as u64;
    if declared != expected {
        return Err(FieldIoError::DimMismatch {
            n_lat,
            n_lon,
            expected,
            actual: declared,
        });
    }
    let payload = c.take(declared as usize, "payload")?;
    if c.at != bytes.len() {
        let actual = (bytes.len() - c.at) as u64 + declared;
        return Err(FieldIoError::DimMismatch {
            n_lat,
            n_lon,
            expected,
            actual,
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")) as f64)
        .collect();
    let mut f = GridField::new(
        header_value::<String>(&h, "variable")?,
        header_value::<String>(&h, "units")?,
        grid,
        date,
        values,
    )?;
    f.lead = header_value(&h, "lead")?;
    f.member = header_value(&h, "member")?;
    Ok(f)
}

pub fn write_field(field: &GridField, path: &Path) -> Result<()> {
    let bytes = encode_field(field)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))
}

pub fn read_field(path: &Path) -> Result<GridField> {
    decode_field(&fs::read(path).map_err(io_err(path))?)
}

/// Directory layout `root/<variable>/lead<LLL>/m<MM>/<YYYY-MM-DD>.qwf` and the
/// keys found in it.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    root: PathBuf,
    entries: BTreeMap<FieldKey, PathBuf>,
}

impl Catalog {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &FieldKey) -> PathBuf {
        self.root
            .join(&key.variable)
            .join(format!("lead{:03}", key.lead))
            .join(format!("m{:02}", key.member))
            .join(format!("{}.{EXTENSION}", key.date.format("%Y-%m-%d")))
    }

    /// Indexes every field file below `root`. Keys come from the path layout.
    pub fn scan(root: impl Into<PathBuf>) -> Result<Self> {
        let mut cat = Self::new(root);
        let root = cat.root.clone();
        for var in sorted_dirs(&root)? {
            let variable = file_name(&var);
            for lead_dir in sorted_dirs(&var)? {
                let lead = parse_prefixed(&lead_dir, "lead")?;
                for member_dir in sorted_dirs(&lead_dir)? {
                    let member = parse_prefixed(&member_dir, "m")?;
                    for file in sorted_entries(&member_dir)? {
                        if file.extension().and_then(|e| e.to_str()) != Some(EXTENSION) {
                            continue;
                        }
                        let stem = file
                            .file_stem()
                            .and_then(|s| s.to_str())
                            .unwrap_or_default();
                        let key = FieldKey::new(variable.clone(), parse_date(stem)?, lead, member);
                        cat.insert(key, file)?;
                    }
                }
            }
        }
        Ok(cat)
    }

    fn insert(&mut self, key: FieldKey, path: PathBuf) -> Result<()> {
        if self.entries.contains_key(&key) {
            return Err(FieldIoError::Catalog(format!("duplicate key {key:?}")));
        }
        self.entries.insert(key, path);
        Ok(())
    }

    /// Writes a field at its catalog path and records it.
    pub fn write(&mut self, field: &GridField) -> Result<()> {
        let key = field.key();
        let path = self.path_for(&key);
        self.insert(key, path.clone())?;
        write_field(field, &path)
    }

    pub fn get(&self, key: &FieldKey) -> Result<&Path> {
        self.entries.get(key).map(PathBuf::as_path).ok_or_else(|| {
            FieldIoError::Catalog(format!(
                "no entry for {} on {} (lead {}, member {})",
                key.variable, key.date, key.lead, key.member
            ))
        })
    }

    pub fn read(&self, key: &FieldKey) -> Result<GridField> {
        read_field(self.get(key)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &FieldKey> {
        self.entries.keys()
    }

    /// Dense daily series of `variable` (lead 0, member 0) with its grid.
    pub fn daily_series(
        &self,
        variable: &str,
        first: NaiveDate,
        last: NaiveDate,
    ) -> Result<(DailySeries, LatLonGrid)> {
        let mut days = Vec::new();
        let mut grid = None;
        for d in first.iter_days().take_while(|d| *d <= last) {
            let f = self.read(&FieldKey::new(variable, d, 0, 0))?;
            match &grid {
                None => grid = Some(f.grid.clone()),
                Some(g) if *g != f.grid => {
                    return Err(FieldIoError::Catalog(format!(
                        "{variable} on {d} uses a different grid"
                    )))
                }
                _ => {}
            }
            days.push(f.values);
        }
        let grid =
            grid.ok_or_else(|| FieldIoError::Catalog(format!("no {variable} fields in range")))?;
        Ok((DailySeries::new(first, grid.n_cells(), days)?, grid))
    }

    /// Earliest and latest date of `variable` at lead 0, member 0.
    pub fn date_span(&self, variable: &str) -> Option<(NaiveDate, NaiveDate)> {
        let mut dates = self
            .entries
            .keys()
            .filter(|k| k.variable == variable && k.lead == 0 && k.member == 0)
            .map(|k| k.date);
        let first = dates.next()?;
        Some(dates.fold((first, first), |(a, b), d| (a.min(d), b.max(d))))
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

fn parse_prefixed(p: &Path, prefix: &str) -> Result<u32> {
    let name = file_name(p);
    name.strip_prefix(prefix)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| FieldIoError::Catalog(format!("unexpected directory {}", p.display())))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect())
}

/// Reads a JSON run configuration; absent keys take their defaults.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = if text.trim().is_empty() {
        RunConfig::default()
    } else {
        serde_json::from_str(text).map_err(|e| FieldIoError::Config(e.to_string()))?
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    let text =
        serde_json::to_string_pretty(cfg).map_err(|e| FieldIoError::Config(e.to_string()))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text + "\n").map_err(io_err(path))
}
