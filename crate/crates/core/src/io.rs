//! Run configuration (`key=value` files) and the WPG1 grid file format.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{config, numeric, Error, Result};
use crate::models::{PotentialModel, SystemParams};
use crate::phase::{PhaseGrid, PhasePoint, QGrid, ScalarField, SymbolNorm, WeylConventions};
use crate::quantum::{PropagatorSlice, Route, SpectralFilter};
use crate::semiclassical::ScanConfig;

pub const MAGIC: &str = "WPG1";
pub const ENCODING: &str = "f64le";

/// Every key a config file may set, with its default (empty for "unset").
pub const KEYS: &[(&str, &str)] = &[
    ("mass", "0.5"),
    ("hbar", "1"),
    ("potential", "morse"),
    ("D0", "1"),
    ("alpha", "1.25"),
    ("qe", "0"),
    ("omega", "2.5"),
    ("pmin", "-10"),
    ("pmax", "10"),
    ("qmin", "-4"),
    ("qmax", "16"),
    ("np", "128"),
    ("nq", "128"),
    ("box_qmin", "-4"),
    ("box_qmax", "16"),
    ("n", "512"),
    ("origin_p", "0"),
    ("origin_q", "0.1"),
    ("t", "quarter-period"),
    ("route", "exact"),
    ("ecut", "auto"),
    ("scan_np", "512"),
    ("scan_nq", "512"),
    ("scan_extent_p", ""),
    ("scan_extent_q", ""),
    ("eps_det", "1e-10"),
    ("newton_tol", "1e-8"),
    ("newton_max_iter", "50"),
    ("multistart", "16"),
    ("dt", ""),
    ("masses", "0.25,1,2,10"),
    ("L", "1"),
    ("observable", "q"),
    ("sigma", ""),
    ("suite", "all"),
    ("out", ""),
    ("workers", ""),
    ("text", "false"),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeRule {
    Absolute(f64),
    QuarterPeriod,
}

impl TimeRule {
    pub fn resolve(&self, params: &SystemParams) -> Result<f64> {
        match *self {
            TimeRule::Absolute(t) => Ok(t),
            TimeRule::QuarterPeriod => params.quarter_period(),
        }
    }
}

impl fmt::Display for TimeRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeRule::Absolute(t) => write!(f, "{t}"),
            TimeRule::QuarterPeriod => f.write_str("quarter-period"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub system: SystemParams,
    pub grid: PhaseGrid,
    pub qgrid: QGrid,
    pub origin: PhasePoint,
    pub time: TimeRule,
    pub route: Route,
    pub filter: SpectralFilter,
    /// `extent` is replaced from the exact slice when `scan_extent` is `None`.
    pub scan: ScanConfig,
    pub scan_extent: Option<PhasePoint>,
    pub masses: Vec<f64>,
    pub modular_l: f64,
    pub observable: String,
    pub sigma: Option<f64>,
    pub suite: String,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub text: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_pairs(&BTreeMap::new()).expect("defaults are valid")
    }
}

/// Flat `key=value` pairs with `#` comments. Unknown keys and repeated keys are errors.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return config(format!("line {}: expected key=value, got '{line}'", n + 1));
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.iter().any(|(name, _)| *name == k) {
            return config(format!("unknown key '{k}' on line {}", n + 1));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return config(format!("key '{k}' is set twice"));
        }
    }
    Ok(out)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    RunConfig::from_pairs(&parse_pairs(text)?)
}

struct Lookup<'a>(&'a BTreeMap<String, String>);

impl Lookup<'_> {
    fn raw(&self, key: &str) -> &str {
        match self.0.get(key) {
            Some(v) => v,
            None => KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d).expect("key is declared"),
        }
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    fn num(&self, key: &str) -> Result<f64> {
        let v: f64 = self.get(key)?;
        if !v.is_finite() {
            return config(format!("{key} must be finite"));
        }
        Ok(v)
    }
}

/// Prefix a library error with the key it came from.
fn named<T>(key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{key}: {m}")),
        other => other,
    })
}

impl RunConfig {
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = pairs.keys().find(|k| !KEYS.iter().any(|(n, _)| n == k)) {
            return config(format!("unknown key '{k}'"));
        }
        let c = Lookup(pairs);
        let conv = named("hbar", WeylConventions::new(c.num("hbar")?, SymbolNorm::Weyl))?;
        let potential = match c.raw("potential") {
            "morse" => PotentialModel::Morse { d0: c.num("D0")?, alpha: c.num("alpha")?, qe: c.num("qe")? },
            "harmonic" => PotentialModel::Harmonic { omega: c.num("omega")?, qe: c.num("qe")? },
            "free" => PotentialModel::Free,
            other => return config(format!("potential: expected morse, harmonic or free, got '{other}'")),
        };
        let system = named("mass", SystemParams::new(c.num("mass")?, potential, conv))?;
        let grid = named(
            "grid",
            PhaseGrid::new(c.num("pmin")?, c.num("pmax")?, c.num("qmin")?, c.num("qmax")?, c.get("np")?, c.get("nq")?),
        )?;
        let qgrid = named("box", QGrid::new(c.num("box_qmin")?, c.num("box_qmax")?, c.get("n")?))?;
        let origin = PhasePoint::new(c.num("origin_p")?, c.num("origin_q")?);
        let time = match c.raw("t") {
            "quarter-period" => TimeRule::QuarterPeriod,
            _ => TimeRule::Absolute(c.num("t")?),
        };
        let route: Route = named("route", c.raw("route").parse())?;
        let filter: SpectralFilter = named("ecut", c.raw("ecut").parse())?;
        let extent_p: Option<f64> = c.opt("scan_extent_p")?;
        let extent_q: Option<f64> = c.opt("scan_extent_q")?;
        let scan_extent = match (extent_p, extent_q) {
            (Some(p), Some(q)) => Some(PhasePoint::new(p, q)),
            (None, None) => None,
            _ => return config("scan_extent_p and scan_extent_q must be set together"),
        };
        let scan = ScanConfig {
            extent: scan_extent.unwrap_or(ScanConfig::default().extent),
            np: c.get("scan_np")?,
            nq: c.get("scan_nq")?,
            eps_det: c.num("eps_det")?,
            newton_tol: c.num("newton_tol")?,
            max_iter: c.get("newton_max_iter")?,
            multistart: c.get("multistart")?,
            dt: c.opt("dt")?,
        };
        named("scan", scan.validate())?;
        let masses = parse_list(c.raw("masses")).map_err(|e| Error::Config(format!("masses: {e}")))?;
        for &m in &masses {
            named("masses", system.with_mass(m))?;
        }
        let workers: Option<usize> = c.opt("workers")?;
        if workers == Some(0) {
            return config("workers must be at least 1");
        }
        let sigma: Option<f64> = c.opt("sigma")?;
        if sigma.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return config("sigma must be positive");
        }
        let observable = c.raw("observable").to_string();
        if !["q", "p", "H", "modular"].contains(&observable.as_str()) {
            return config(format!("observable: expected q, p, H or modular, got '{observable}'"));
        }
        Ok(RunConfig {
            system,
            grid,
            qgrid,
            origin,
            time,
            route,
            filter,
            scan,
            scan_extent,
            masses,
            modular_l: c.num("L")?,
            observable,
            sigma,
            suite: c.raw("suite").to_string(),
            out: c.opt::<String>("out")?.map(PathBuf::from),
            workers,
            text: c.get("text")?,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        parse_config(&fs::read_to_string(path)?)
    }
}

/// Comma-separated numbers.
pub fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| v.trim())
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<f64>().map_err(|_| format!("cannot parse '{v}'")))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Propagator,
    Wigner,
    SymbolRe,
    SymbolIm,
}

impl FieldKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FieldKind::Propagator => "propagator",
            FieldKind::Wigner => "wigner",
            FieldKind::SymbolRe => "symbol-re",
            FieldKind::SymbolIm => "symbol-im",
        }
    }
}

impl FromStr for FieldKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "propagator" => Ok(FieldKind::Propagator),
            "wigner" => Ok(FieldKind::Wigner),
            "symbol-re" => Ok(FieldKind::SymbolRe),
            "symbol-im" => Ok(FieldKind::SymbolIm),
            _ => numeric(format!("unknown field kind '{s}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridFileHeader {
    pub kind: FieldKind,
    pub route: Option<Route>,
    pub grid: PhaseGrid,
    pub t: f64,
    pub origin: PhasePoint,
    pub model: String,
}

impl GridFileHeader {
    pub fn for_slice(slice: &PropagatorSlice, model: impl Into<String>) -> Self {
        Self {
            kind: FieldKind::Propagator,
            route: Some(slice.route),
            grid: slice.field.grid,
            t: slice.t,
            origin: slice.origin,
            model: model.into(),
        }
    }

    fn render(&self) -> String {
        let g = &self.grid;
        let route = self.route.map_or("none", |r| r.as_str());
        format!(
            "magic={MAGIC}\nkind={}\nroute={route}\nnp={}\nnq={}\npmin={:?}\npmax={:?}\nqmin={:?}\nqmax={:?}\nt={:?}\norigin_p={:?}\norigin_q={:?}\nmodel={}\nencoding={ENCODING}\n\n",
            self.kind.as_str(),
            g.np,
            g.nq,
            g.pmin,
            g.pmax,
            g.qmin,
            g.qmax,
            self.t,
            self.origin.p,
            self.origin.q,
            self.model
        )
    }
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    numeric(msg)
}

pub fn encode_field(header: &GridFileHeader, field: &ScalarField) -> Result<Vec<u8>> {
    if header.grid != field.grid {
        return config("header grid does not match the field grid");
    }
    if header.model.contains('\n') {
        return config("model descriptor must be a single line");
    }
    let mut out = header.render().into_bytes();
    out.reserve(8 * field.values.len());
    for v in &field.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_field(bytes: &[u8]) -> Result<(GridFileHeader, ScalarField)> {
    let Some(split) = bytes.windows(2).position(|w| w == b"\n\n") else {
        return bad("missing header terminator");
    };
    let head = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::Numeric("header is not text".into()))?;
    let payload = &bytes[split + 2..];
    let mut map = BTreeMap::new();
    for line in head.lines() {
        let Some((k, v)) = line.split_once('=') else {
            return bad(format!("malformed header line '{line}'"));
        };
        map.insert(k, v);
    }
    if map.get("magic") != Some(&MAGIC) {
        return bad(format!("bad magic {:?}, expected {MAGIC}", map.get("magic")));
    }
    let get = |k: &str| map.get(k).copied().ok_or_else(|| Error::Numeric(format!("header lacks '{k}'")));
    let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Numeric(format!("header {k} is not a number"))) };
    let count = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Numeric(format!("header {k} is not a count"))) };
    const KNOWN: [&str; 14] =
        ["magic", "kind", "route", "np", "nq", "pmin", "pmax", "qmin", "qmax", "t", "origin_p", "origin_q", "model", "encoding"];
    if let Some(k) = map.keys().find(|k| !KNOWN.contains(k)) {
        return bad(format!("unknown header key '{k}'"));
    }
    if get("encoding")? != ENCODING {
        return bad(format!("unsupported encoding '{}'", get("encoding")?));
    }
    let route = match get("route")? {
        "none" => None,
        r => Some(r.parse::<Route>().map_err(|e| Error::Numeric(e.to_string()))?),
    };
    let grid = PhaseGrid::new(num("pmin")?, num("pmax")?, num("qmin")?, num("qmax")?, count("np")?, count("nq")?)
        .map_err(|e| Error::Numeric(e.to_string()))?;
    let header = GridFileHeader {
        kind: get("kind")?.parse()?,
        route,
        grid,
        t: num("t")?,
        origin: PhasePoint::new(num("origin_p")?, num("origin_q")?),
        model: get("model")?.to_string(),
    };
    if payload.len() != 8 * grid.len() {
        return bad(format!("payload has {} bytes, expected {}", payload.len(), 8 * grid.len()));
    }
    let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return bad("payload contains non-finite values");
    }
    Ok((header, ScalarField::new(grid, values)?))
}

pub fn write_field(path: &Path, header: &GridFileHeader, field: &ScalarField) -> Result<()> {
    fs::write(path, encode_field(header, field)?)?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<(GridFileHeader, ScalarField)> {
    decode_field(&fs::read(path)?)
}

/// Plain-text matrix: one line per p row, q along the line.
pub fn write_text(path: &Path, field: &ScalarField) -> Result<()> {
    let g = field.grid;
    let mut s = String::with_capacity(g.len() * 24);
    for j in 0..g.np {
        let row: Vec<String> = (0..g.nq).map(|i| format!("{:e}", field.at(j, i))).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}
