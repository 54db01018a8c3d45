//! Mesh-size sweeps over energies and diagram terms, three-point power-law
//! extrapolation, validation against larger meshes, and result files.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::amplitudes::{
    ccd_solve, energy, mp3_amplitude, term_evaluate_fast, AmplitudeTensor, CcdContext, EriTable, ExactAmplitude, Quad,
    TermId,
};
use crate::error::{Error, Result};
use crate::lattice::{Frac, KPoint, MeshScheme, MonkhorstPackMesh};
use crate::meanfield::{ModelSystem, SystemParams};
use crate::quadrature::{linear_fit, three_point_power_law, FitFlag, RateFit};
use crate::C64;

pub const SCHEMA_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

const S_MIN: f64 = 0.05;
const S_MAX: f64 = 6.0;
const GIB: f64 = (1u64 << 30) as f64;

/// A quantity evaluated once per mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Selector {
    /// One catalog diagram with the exact MP2 (= CCD(1)) amplitude.
    Term(TermId),
    /// Correlation energy of CCD(n) on the mesh.
    CcdEnergy(usize),
    /// Amplitude at the external labels after n map applications.
    CcdAmplitude(usize),
    /// MP3 amplitude at the external labels.
    Mp3Amplitude,
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::Term(t) => f.write_str(t.name()),
            Selector::CcdEnergy(n) => write!(f, "ccd{n}_energy"),
            Selector::CcdAmplitude(n) => write!(f, "ccd{n}_amplitude"),
            Selector::Mp3Amplitude => f.write_str("mp3_amplitude"),
        }
    }
}

impl FromStr for Selector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "mp3_amplitude" {
            return Ok(Selector::Mp3Amplitude);
        }
        let ccd = |suffix: &str| -> Option<usize> {
            s.strip_prefix("ccd")?.strip_suffix(suffix)?.parse().ok().filter(|n| *n >= 1)
        };
        if let Some(n) = ccd("_energy") {
            return Ok(Selector::CcdEnergy(n));
        }
        if let Some(n) = ccd("_amplitude") {
            return Ok(Selector::CcdAmplitude(n));
        }
        s.parse::<TermId>()
            .map(Selector::Term)
            .map_err(|_| Error::Config(format!("unknown selector '{s}'")))
    }
}

impl Serialize for Selector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Selector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Selector {
    /// Relative cost at n_k mesh points.
    pub fn cost(&self, n_k: usize) -> f64 {
        let n = n_k as f64;
        match self {
            Selector::Term(t) => n.powi(t.internal_sums() as i32),
            Selector::CcdEnergy(it) | Selector::CcdAmplitude(it) => *it as f64 * n.powi(3),
            Selector::Mp3Amplitude => 2.0 * n,
        }
    }

    /// Bytes of tensors the evaluation holds at once.
    pub fn memory(&self, sys: &SystemParams, n_k: usize) -> u64 {
        match self {
            Selector::CcdEnergy(_) | Selector::CcdAmplitude(_) => {
                EriTable::bytes_for(n_k, sys.n_bands()) + 4 * AmplitudeTensor::bytes_for(n_k, sys.n_occ, sys.n_vir)
            }
            _ => 0,
        }
    }
}

/// Fractional k coordinate: a number or a "p/q" string in the config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FracCoord(pub Frac);

impl Serialize for FracCoord {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for FracCoord {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let frac = match Raw::deserialize(d)? {
            Raw::Num(x) => {
                let r = Frac::approximate_float(x)
                    .filter(|r| *r.denom() <= 1_000_000 && (r.to_f64().unwrap_or(f64::NAN) - x).abs() < 1e-12)
                    .ok_or_else(|| serde::de::Error::custom(format!("{x} is not a simple fraction")))?;
                r
            }
            Raw::Text(s) => {
                let parse = |t: &str| t.trim().parse::<i64>().map_err(|_| serde::de::Error::custom(format!("bad fraction '{s}'")));
                match s.split_once('/') {
                    Some((p, q)) => {
                        let q = parse(q)?;
                        if q == 0 {
                            return Err(serde::de::Error::custom("zero denominator"));
                        }
                        Frac::new(parse(p)?, q)
                    }
                    None => Frac::from_integer(parse(&s)?),
                }
            }
        };
        Ok(FracCoord(frac))
    }
}

fn kpoint(c: &[FracCoord; 3]) -> KPoint {
    KPoint::new([c[0].0, c[1].0, c[2].0])
}

/// External orbital labels and momenta for amplitude quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalLabels {
    /// (i, j, a, b) as 0-based band indices (holes first).
    pub bands: [usize; 4],
    pub ki: [FracCoord; 3],
    pub kj: [FracCoord; 3],
    pub ka: [FracCoord; 3],
}

impl Default for ExternalLabels {
    fn default() -> Self {
        let z = FracCoord(Frac::zero());
        ExternalLabels {
            bands: [0, 0, 1, 1],
            ki: [z; 3],
            kj: [z; 3],
            ka: [z, z, FracCoord(Frac::new(1, 2))],
        }
    }
}

impl ExternalLabels {
    pub fn quad(&self) -> Quad {
        Quad::new(self.bands[0], self.bands[1], self.bands[2], self.bands[3])
    }
    pub fn momenta(&self) -> (KPoint, KPoint, KPoint) {
        (kpoint(&self.ki), kpoint(&self.kj), kpoint(&self.ka))
    }
}

/// Scalar series a fit is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    Real,
    Magnitude,
    /// |value − value at the largest mesh|.
    #[default]
    FinestDifference,
}

/// One quantity and its mesh plan; unset lists fall back to the study-wide ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantitySpec {
    pub selector: Selector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meshes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_meshes: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_meshes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub version: u32,
    pub system: SystemParams,
    pub quantities: Vec<QuantitySpec>,
    pub labels: ExternalLabels,
    pub scheme: MeshScheme,
    /// Mesh sizes m (N_k = m³).
    pub meshes: Vec<usize>,
    pub fit_meshes: [usize; 3],
    pub validation_meshes: Vec<usize>,
    pub reference_mode: ReferenceMode,
    /// Fixed exponents validated alongside the free fit.
    pub candidate_exponents: Vec<f64>,
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub budget_gib: f64,
    /// Persistent band cache shared across runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_cache: Option<PathBuf>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            version: SCHEMA_VERSION,
            system: SystemParams::default(),
            quantities: Vec::new(),
            labels: ExternalLabels::default(),
            scheme: MeshScheme::GammaCentered,
            meshes: vec![6, 8, 10, 12, 14, 16],
            fit_meshes: [6, 8, 10],
            validation_meshes: vec![12, 14, 16],
            reference_mode: ReferenceMode::FinestDifference,
            candidate_exponents: Vec::new(),
            out: PathBuf::from("out"),
            threads: 0,
            budget_gib: 4.0,
            band_cache: None,
        }
    }
}

/// A quantity with its mesh lists resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedQuantity {
    pub selector: Selector,
    pub meshes: Vec<usize>,
    pub fit_meshes: [usize; 3],
    pub validation_meshes: Vec<usize>,
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: StudyConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn budget_bytes(&self) -> u64 {
        (self.budget_gib * GIB) as u64
    }

    /// sha256 of the canonical JSON form, ignoring the output path, thread
    /// count, budget and cache location (they do not change any value).
    pub fn hash(&self) -> String {
        let d = StudyConfig::default();
        let content = StudyConfig {
            out: d.out,
            threads: d.threads,
            budget_gib: d.budget_gib,
            band_cache: None,
            ..self.clone()
        };
        let text = serde_json::to_string(&content).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn resolved(&self) -> Vec<ResolvedQuantity> {
        self.quantities
            .iter()
            .map(|q| ResolvedQuantity {
                selector: q.selector,
                meshes: q.meshes.clone().unwrap_or_else(|| self.meshes.clone()),
                fit_meshes: q.fit_meshes.unwrap_or(self.fit_meshes),
                validation_meshes: q.validation_meshes.clone().unwrap_or_else(|| self.validation_meshes.clone()),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.version != SCHEMA_VERSION {
            return bad(format!("unsupported config version {} (expected {SCHEMA_VERSION})", self.version));
        }
        self.system.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.labels
            .quad()
            .validate(self.system.n_occ, self.system.n_vir)
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.budget_gib > 0.0) {
            return bad("budget_gib must be positive".into());
        }
        if self.candidate_exponents.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return bad("candidate exponents must be positive".into());
        }
        let mut seen = HashSet::new();
        for q in self.resolved() {
            if !seen.insert(q.selector) {
                return bad(format!("selector {} listed twice", q.selector));
            }
            if q.meshes.is_empty() || q.meshes.contains(&0) {
                return bad(format!("{}: mesh sizes must be positive", q.selector));
            }
            let mut sorted = q.meshes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != q.meshes.len() {
                return bad(format!("{}: duplicate mesh sizes", q.selector));
            }
            let f = q.fit_meshes;
            if !(f[0] < f[1] && f[1] < f[2]) {
                return bad(format!("{}: fit meshes must be strictly increasing", q.selector));
            }
            if let Some(m) = f.iter().chain(&q.validation_meshes).find(|m| !q.meshes.contains(m)) {
                return bad(format!("{}: mesh {m} is not in the mesh list", q.selector));
            }
            if let Some(m) = q.validation_meshes.iter().find(|m| **m <= f[2]) {
                return bad(format!("{}: validation mesh {m} must exceed the fit meshes", q.selector));
            }
        }
        Ok(())
    }
}

/// One evaluated (quantity, mesh) point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub selector: Selector,
    pub m: usize,
    pub n_k: usize,
    pub re: f64,
    pub im: f64,
    pub wall_seconds: f64,
    pub threads: usize,
    pub version: String,
}

impl SweepRecord {
    pub fn value(&self) -> C64 {
        C64::new(self.re, self.im)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedPoint {
    pub selector: Selector,
    pub m: usize,
    pub n_k: usize,
    pub cost: f64,
    pub memory_bytes: u64,
}

/// Every (quantity, mesh) point, most expensive first. Fails if any point
/// exceeds the memory budget.
pub fn plan(config: &StudyConfig) -> Result<Vec<PlannedPoint>> {
    let mut pts = Vec::new();
    for q in config.resolved() {
        for &m in &q.meshes {
            let n_k = m * m * m;
            let memory_bytes = q.selector.memory(&config.system, n_k);
            pts.push(PlannedPoint {
                selector: q.selector,
                m,
                n_k,
                cost: q.selector.cost(n_k),
                memory_bytes,
            });
        }
    }
    pts.sort_by(|a, b| b.cost.total_cmp(&a.cost).then(b.m.cmp(&a.m)).then(a.selector.cmp(&b.selector)));
    if let Some(p) = pts.iter().find(|p| p.memory_bytes > config.budget_bytes()) {
        return Err(Error::Budget {
            what: format!("{} at N_k = {}^3", p.selector, p.m),
            needed: p.memory_bytes,
            budget: config.budget_bytes(),
        });
    }
    Ok(pts)
}

/// Value of one selector on one mesh.
pub fn evaluate(sys: &ModelSystem, config: &StudyConfig, selector: Selector, m: usize) -> Result<C64> {
    let mesh = MonkhorstPackMesh::new(sys.cell(), m, config.scheme)?;
    let q = config.labels.quad();
    let (ki, kj, ka) = config.labels.momenta();
    sys.solve_mesh(&mesh)?;
    match selector {
        Selector::Term(term) => term_evaluate_fast(sys, term, ExactAmplitude::Mp2, q, &ki, &kj, &ka, &mesh),
        Selector::CcdEnergy(n) => {
            let ctx = CcdContext::new(sys, &mesh, config.budget_bytes())?;
            energy(&ctx, &ccd_solve(&ctx, n)?.amplitudes)
        }
        Selector::CcdAmplitude(n) => {
            let ctx = CcdContext::new(sys, &mesh, config.budget_bytes())?;
            ccd_solve(&ctx, n)?.amplitudes.at(q, &ki, &kj, &ka)
        }
        Selector::Mp3Amplitude => mp3_amplitude(sys, &mesh, q, &ki, &kj, &ka),
    }
}

pub const RECORDS_FILE: &str = "records.jsonl";

/// Records already on disk; a torn final line from an interrupted run is
/// ignored.
pub fn read_records(path: &Path) -> Result<Vec<SweepRecord>> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<String> = BufReader::new(f).lines().collect::<std::io::Result<_>>()?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// Evaluates every planned point not already recorded, appending each record
/// to `<out>/records.jsonl` as it completes. Returns all records of the
/// configured quantities.
pub fn run_sweep(config: &StudyConfig, resume: bool) -> Result<Vec<SweepRecord>> {
    config.validate()?;
    let sys = ModelSystem::new(config.system.clone())?;
    if let Some(cache) = &config.band_cache {
        let n = sys.load_band_cache(cache)?;
        log::info!("loaded {n} cached k-points from {}", cache.display());
    }
    run_sweep_on(&sys, config, resume)
}

/// [`run_sweep`] on an existing system (whose parameters must match the
/// config), reusing its band cache.
pub fn run_sweep_on(sys: &ModelSystem, config: &StudyConfig, resume: bool) -> Result<Vec<SweepRecord>> {
    config.validate()?;
    if sys.params() != &config.system {
        return Err(Error::Config("system parameters differ from the config".into()));
    }
    let points = plan(config)?;
    fs::create_dir_all(&config.out)?;
    let path = config.out.join(RECORDS_FILE);
    let mut records = if resume { read_records(&path)? } else { Vec::new() };
    let wanted: HashSet<(Selector, usize)> = points.iter().map(|p| (p.selector, p.m)).collect();
    records.retain(|r| wanted.contains(&(r.selector, r.m)));
    {
        // rewrite without a possibly torn tail or stale entries
        let mut w = BufWriter::new(File::create(&path)?);
        for r in &records {
            writeln!(w, "{}", serde_json::to_string(r)?)?;
        }
        w.flush()?;
    }
    let done: HashSet<(Selector, usize)> = records.iter().map(|r| (r.selector, r.m)).collect();
    let todo: Vec<&PlannedPoint> = points.iter().filter(|p| !done.contains(&(p.selector, p.m))).collect();
    if todo.is_empty() {
        return Ok(records);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let threads = pool.current_num_threads();
    let mut writer = OpenOptions::new().append(true).open(&path)?;
    for p in todo {
        let start = Instant::now();
        let before = sys.cached_bands();
        let v = pool.install(|| evaluate(sys, config, p.selector, p.m))?;
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(Error::Invalid(format!("{} at N_k = {}^3 is not finite", p.selector, p.m)));
        }
        let rec = SweepRecord {
            selector: p.selector,
            m: p.m,
            n_k: p.n_k,
            re: v.re,
            im: v.im,
            wall_seconds: start.elapsed().as_secs_f64(),
            threads,
            version: ARTIFACT_VERSION.to_string(),
        };
        log::info!("{} m={} value={} ({:.1}s)", rec.selector, rec.m, v, rec.wall_seconds);
        writeln!(writer, "{}", serde_json::to_string(&rec)?)?;
        writer.flush()?;
        records.push(rec);
        if let Some(cache) = &config.band_cache {
            if sys.cached_bands() > before {
                sys.save_band_cache(cache)?;
            }
        }
    }
    Ok(records)
}

/// C₀ + C₁N^{−s} through exactly three points (N, y), s ∈ [0.05, 6].
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<RateFit> {
    check_fit_points(points)?;
    let x = [points[0].0, points[1].0, points[2].0];
    let y = [points[0].1, points[1].1, points[2].1];
    let mut flags = Vec::new();
    if (y[0] - y[1]) * (y[1] - y[2]) < 0.0 {
        flags.push(FitFlag::NonMonotone);
    }
    let (c0, c1, s) = match three_point_power_law(x, y, S_MIN, S_MAX) {
        Some(v) => v,
        None => {
            flags.push(FitFlag::NoPowerLaw);
            (y[2], 0.0, 0.0)
        }
    };
    Ok(finish_fit(points, c0, c1, s, flags))
}

/// C₀ + C₁N^{−s} with s fixed, least squares over the points.
pub fn fit_power_law_fixed(points: &[(f64, f64)], s: f64) -> Result<RateFit> {
    check_fit_points(points)?;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Invalid(format!("exponent {s} must be positive")));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.powf(-s)).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (c1, c0) = linear_fit(&xs, &ys);
    let mut flags = Vec::new();
    if ys.windows(3).any(|w| (w[0] - w[1]) * (w[1] - w[2]) < 0.0) {
        flags.push(FitFlag::NonMonotone);
    }
    Ok(finish_fit(points, c0, c1, s, flags))
}

fn check_fit_points(points: &[(f64, f64)]) -> Result<()> {
    if points.len() != 3 {
        return Err(Error::Invalid(format!("power-law fit needs exactly 3 points, got {}", points.len())));
    }
    if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite() || p.0 <= 0.0) {
        return Err(Error::Invalid("fit points must be finite with positive N".into()));
    }
    if !(points[0].0 < points[1].0 && points[1].0 < points[2].0) {
        return Err(Error::Invalid("fit points need distinct increasing N".into()));
    }
    Ok(())
}

fn finish_fit(points: &[(f64, f64)], c0: f64, c1: f64, s: f64, flags: Vec<FitFlag>) -> RateFit {
    let mut fit = RateFit {
        c0,
        c1,
        s,
        points: points.iter().map(|p| [p.0, p.1]).collect(),
        residuals: Vec::new(),
        flags,
    };
    fit.residuals = points.iter().map(|p| [p.0, p.1 - fit.eval(p.0)]).collect();
    fit
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    MatchesPowerLaw { s: f64 },
    FasterThan { s: f64 },
    Unreliable,
}

/// Comparison at one validation mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub n_k: f64,
    pub value: f64,
    pub fitted: f64,
    /// |fit(N) − value(N)|.
    pub discrepancy: f64,
    /// Actual change since the last fit point over the change the fit
    /// predicts; `None` when the fit predicts no change.
    pub change_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub fit: RateFit,
    pub discrepancies: Vec<Discrepancy>,
    pub verdict: Verdict,
}

/// Checks a fit against larger meshes. With r = (value(N) − value(N₃)) /
/// (C₁(N^{−s} − N₃^{−s})) at the two largest validation meshes: both r ≤ 0.2
/// gives faster_than(s), both in [0.5, 2] gives matches_power_law(s),
/// anything else unreliable. The residuals of the validation points are
/// appended to the fit.
pub fn validate_fit(fit: &RateFit, later: &[(f64, f64)]) -> Validation {
    let mut fit = fit.clone();
    let (n3, y3) = match fit.points.last() {
        Some(p) => (p[0], p[1]),
        None => (f64::NAN, f64::NAN),
    };
    let discrepancies: Vec<Discrepancy> = later
        .iter()
        .map(|&(n, y)| {
            let fitted = fit.eval(n);
            let predicted = fit.c1 * (n.powf(-fit.s) - n3.powf(-fit.s));
            Discrepancy {
                n_k: n,
                value: y,
                fitted,
                discrepancy: (fitted - y).abs(),
                change_ratio: Some(((y - y3) / predicted).abs()).filter(|r| r.is_finite()),
            }
        })
        .collect();
    let extra: Vec<[f64; 2]> = later.iter().map(|&(n, y)| [n, y - fit.eval(n)]).collect();
    fit.residuals.extend(extra);
    let usable = fit.reliable() && later.len() >= 2 && later.iter().all(|p| p.0 > n3);
    let verdict = if !usable {
        Verdict::Unreliable
    } else {
        let last: Vec<Option<f64>> = discrepancies[discrepancies.len() - 2..].iter().map(|d| d.change_ratio).collect();
        if last.iter().all(|r| r.is_some_and(|r| r <= 0.2)) {
            Verdict::FasterThan { s: fit.s }
        } else if last.iter().all(|r| r.is_some_and(|r| (0.5..=2.0).contains(&r))) {
            Verdict::MatchesPowerLaw { s: fit.s }
        } else {
            Verdict::Unreliable
        }
    };
    Validation {
        fit,
        discrepancies,
        verdict,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationReport {
    pub selector: Selector,
    pub reference_mode: ReferenceMode,
    /// Free-exponent three-point fit and its validation.
    pub free: Validation,
    /// Fixed-exponent fits from `candidate_exponents`.
    pub candidates: Vec<Validation>,
}

fn scalar(mode: ReferenceMode, v: C64, finest: C64) -> f64 {
    match mode {
        ReferenceMode::Real => v.re,
        ReferenceMode::Magnitude => v.norm(),
        ReferenceMode::FinestDifference => (v - finest).norm(),
    }
}

/// Fits and validations for every quantity whose fit meshes are all
/// recorded.
pub fn analyze(config: &StudyConfig, records: &[SweepRecord]) -> Result<Vec<ExtrapolationReport>> {
    let mut out = Vec::new();
    for q in config.resolved() {
        let by_m: BTreeMap<usize, C64> = records
            .iter()
            .filter(|r| r.selector == q.selector)
            .map(|r| (r.m, r.value()))
            .collect();
        let Some((_, &finest)) = by_m.iter().next_back() else {
            continue;
        };
        if q.fit_meshes.iter().any(|m| !by_m.contains_key(m)) {
            continue;
        }
        let pt = |m: usize| ((m * m * m) as f64, scalar(config.reference_mode, by_m[&m], finest));
        let fit_pts: Vec<(f64, f64)> = q.fit_meshes.iter().map(|&m| pt(m)).collect();
        let val_pts: Vec<(f64, f64)> = q.validation_meshes.iter().filter(|m| by_m.contains_key(m)).map(|&m| pt(m)).collect();
        let free = validate_fit(&fit_power_law(&fit_pts)?, &val_pts);
        let candidates = config
            .candidate_exponents
            .iter()
            .map(|&s| Ok(validate_fit(&fit_power_law_fixed(&fit_pts, s)?, &val_pts)))
            .collect::<Result<_>>()?;
        out.push(ExtrapolationReport {
            selector: q.selector,
            reference_mode: config.reference_mode,
            free,
            candidates,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: u32,
    pub artifact_version: String,
    pub config_hash: String,
    pub config: StudyConfig,
    pub reports: Vec<ExtrapolationReport>,
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// printf-style `%.17g`.
pub fn format_g17(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.16e}");
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -4 || exp >= 17 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mant), exp.abs())
    } else {
        trim(&format!("{x:.*}", (16 - exp) as usize))
    }
}

/// Writes `results.csv`, `summary.json` and one `<selector>.dat` plot file
/// (N_k, |value − finest|) per quantity into `dir`.
pub fn emit_report(config: &StudyConfig, records: &[SweepRecord], reports: &[ExtrapolationReport], dir: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(dir)?;
    let hash = config.hash();
    let order: Vec<Selector> = config.quantities.iter().map(|q| q.selector).collect();
    let mut rows: Vec<&SweepRecord> = records.iter().collect();
    rows.sort_by_key(|r| (order.iter().position(|s| *s == r.selector).unwrap_or(usize::MAX), r.selector, r.m));
    let finest: BTreeMap<Selector, C64> = {
        let mut f: BTreeMap<Selector, (usize, C64)> = BTreeMap::new();
        for r in &rows {
            let e = f.entry(r.selector).or_insert((r.m, r.value()));
            if r.m >= e.0 {
                *e = (r.m, r.value());
            }
        }
        f.into_iter().map(|(k, v)| (k, v.1)).collect()
    };

    let csv_path = dir.join("results.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["term", "n_k", "m", "re", "im", "err_vs_finest", "config_hash", "version"])?;
    for r in &rows {
        let err = (r.value() - finest[&r.selector]).norm();
        w.write_record([
            r.selector.to_string(),
            r.n_k.to_string(),
            r.m.to_string(),
            format_g17(r.re),
            format_g17(r.im),
            format_g17(err),
            hash.clone(),
            ARTIFACT_VERSION.to_string(),
        ])?;
    }
    w.flush()?;

    let mut plots = Vec::new();
    for sel in finest.keys() {
        let path = dir.join(format!("{sel}.dat"));
        let mut f = BufWriter::new(File::create(&path)?);
        writeln!(f, "# {sel} config_hash={hash} version={ARTIFACT_VERSION}")?;
        writeln!(f, "# n_k err_vs_finest")?;
        for r in rows.iter().filter(|r| r.selector == *sel) {
            writeln!(f, "{} {}", r.n_k, format_g17((r.value() - finest[sel]).norm()))?;
        }
        f.flush()?;
        plots.push(path);
    }

    let summary = Summary {
        version: SCHEMA_VERSION,
        artifact_version: ARTIFACT_VERSION.to_string(),
        config_hash: hash,
        config: config.clone(),
        reports: reports.to_vec(),
    };
    let summary_path = dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    Ok(ReportFiles {
        csv: csv_path,
        summary: summary_path,
        plots,
    })
}

/// The six-quantity study of the Gaussian model at the standard labels.
pub fn fig2_config() -> StudyConfig {
    let q = |term: TermId, meshes: Option<Vec<usize>>, fit: Option<[usize; 3]>, val: Option<Vec<usize>>| QuantitySpec {
        selector: Selector::Term(term),
        meshes,
        fit_meshes: fit,
        validation_meshes: val,
    };
    StudyConfig {
        quantities: vec![
            q(TermId::EnergyDirect, Some(vec![5, 6, 7, 8, 9, 10]), Some([5, 6, 7]), Some(vec![8, 9, 10])),
            q(TermId::Lin4h2p, None, None, None),
            q(TermId::Lin3h3pXc2, None, None, None),
            q(TermId::Lin3h3pRing, None, None, None),
            q(TermId::Quad3h3pSuper, None, None, None),
            q(TermId::Quad4h2p, Some(vec![6, 8, 10, 12, 14]), None, Some(vec![12, 14])),
        ],
        candidate_exponents: vec![1.0, 1.0 / 3.0],
        out: PathBuf::from("out/fig2"),
        ..StudyConfig::default()
    }
}

#[cfg(test)]
mod tests;
