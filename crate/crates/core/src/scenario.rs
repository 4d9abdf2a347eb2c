//! JSON scenario documents and the check runner used by the command-line tool and the C API.
//!
//! A scenario fixes a chart, graded dimensions, a superconnection and named test objects
//! (path families, simplices, chains of barycenters, cobar words). [`run`] evaluates a
//! suite of checks on it and returns one [`CheckRecord`] per check in declaration order.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use num_rational::BigRational;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::catalog;
use crate::cobar::{self, BarWord, Letter, SimplexTable};
use crate::error::Error;
use crate::expr::{Chart, ScalarExpr};
use crate::forms::{mask_from_indices, EndForm};
use crate::graded::GradedDims;
use crate::quad::QuadSpec;
use crate::simplex::{self, Simplex};
use crate::superconn::{flatness_residuals, SampleGrid, Superconnection};
use crate::transport::{self, PathFamily};

/// Failure modes of loading or running a scenario. Check failures are not errors.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error in {check}: {source}")]
    Runtime { check: String, source: Error },
}

impl RunError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Runtime { .. } => 3,
        }
    }
}

fn config(msg: impl Into<String>) -> RunError {
    RunError::Config(msg.into())
}

// ---------------------------------------------------------------------------
// Document schema

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub chart: ChartSpec,
    /// `[[degree, dimension], ...]`. Builtin connections supply their own.
    #[serde(default)]
    pub dims: Option<Vec<(i32, usize)>>,
    pub superconnection: ConnectionSpec,
    #[serde(default)]
    pub families: Vec<FamilySpec>,
    #[serde(default)]
    pub simplices: Vec<SimplexSpec>,
    #[serde(default)]
    pub chains: Vec<ChainSpec>,
    #[serde(default)]
    pub words: Vec<WordSpec>,
    #[serde(default)]
    pub quadrature: Option<QuadSpec>,
    #[serde(default)]
    pub tolerances: ToleranceSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartSpec {
    #[serde(default)]
    pub names: Option<Vec<String>>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub bounds: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionSpec {
    #[serde(default)]
    pub builtin: Option<BuiltinSpec>,
    /// Explicit components; added to the builtin ones when both are present.
    #[serde(default)]
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuiltinSpec {
    /// `trivial`, `unipotent` or `gauge`.
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    /// Form degree; the endomorphism degree is `1 − p`.
    pub p: usize,
    pub terms: Vec<TermSpec>,
}

/// One `dx^I` coefficient, either as a full matrix or as blocks keyed by source degree.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    /// 1-based, strictly increasing axis indices.
    pub dx: Vec<usize>,
    #[serde(default)]
    pub matrix: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub blocks: Option<BTreeMap<String, Vec<Vec<String>>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub name: String,
    /// Number of parameters `w1..wk`; 0 for a single path in `t`.
    #[serde(default)]
    pub k: usize,
    pub components: Vec<String>,
    #[serde(default)]
    pub breakpoints: Vec<f64>,
    /// Parameter values used by pointwise checks; defaults to a fixed sample set.
    #[serde(default)]
    pub params: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimplexSpec {
    pub name: String,
    /// Dimension, required with `components`.
    #[serde(default)]
    pub dim: Option<usize>,
    /// Expressions in `y1..yk`.
    #[serde(default)]
    pub components: Option<Vec<String>>,
    /// Vertices of an affine simplex, as an alternative to `components`.
    #[serde(default)]
    pub vertices: Option<Vec<Vec<f64>>>,
    /// Global vertex labels used by cobar words; defaults to `0..=k`.
    #[serde(default)]
    pub labels: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub name: String,
    pub barycenters: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordSpec {
    pub name: String,
    pub letters: Vec<LetterSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LetterSpec {
    pub simplex: String,
    pub verts: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceSpec {
    #[serde(default = "default_exact")]
    pub exact: f64,
    #[serde(default = "default_smooth")]
    pub smooth: f64,
    #[serde(default = "default_kink")]
    pub kink: f64,
    /// Allowed deviation of an observed convergence order from its nominal value.
    #[serde(default = "default_order")]
    pub order: f64,
    /// Per-check overrides keyed by check name.
    #[serde(default)]
    pub checks: BTreeMap<String, f64>,
}

fn default_exact() -> f64 {
    1e-10
}
fn default_smooth() -> f64 {
    1e-6
}
fn default_kink() -> f64 {
    1e-3
}
fn default_order() -> f64 {
    0.25
}

impl Default for ToleranceSpec {
    fn default() -> Self {
        ToleranceSpec {
            exact: default_exact(),
            smooth: default_smooth(),
            kink: default_kink(),
            order: default_order(),
            checks: BTreeMap::new(),
        }
    }
}

/// Tolerance class of a check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    Exact,
    Smooth,
    Kink,
    Order,
}

impl ToleranceSpec {
    fn lookup(&self, name: &str, kind: CheckKind) -> f64 {
        if let Some(v) = self.checks.get(name) {
            return *v;
        }
        match kind {
            CheckKind::Exact => self.exact,
            CheckKind::Smooth => self.smooth,
            CheckKind::Kink => self.kink,
            CheckKind::Order => self.order,
        }
    }

    /// Applies `NAME=VALUE`, where `NAME` is a class (`exact`, `smooth`, `kink`, `order`)
    /// or a check name.
    pub fn apply_override(&mut self, name: &str, value: f64) -> Result<(), RunError> {
        if !(value >= 0.0) {
            return Err(config(format!("tolerance for '{name}' must be a non-negative number")));
        }
        match name {
            "exact" => self.exact = value,
            "smooth" => self.smooth = value,
            "kink" => self.kink = value,
            "order" => self.order = value,
            _ => {
                self.checks.insert(name.to_string(), value);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Validated scenario

/// A parsed family with its check parameters.
#[derive(Debug, Clone)]
pub struct NamedFamily {
    pub name: String,
    pub family: PathFamily,
    pub params: Vec<Vec<f64>>,
    spec: Value,
}

#[derive(Debug, Clone)]
pub struct NamedSimplex {
    pub name: String,
    pub simplex: Simplex,
    spec: Value,
}

#[derive(Debug, Clone)]
pub struct NamedChain {
    pub name: String,
    pub barycenters: Vec<Vec<f64>>,
    spec: Value,
}

#[derive(Debug, Clone)]
pub struct NamedWord {
    pub name: String,
    pub word: BarWord,
    spec: Value,
}

/// A validated scenario ready to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub chart: Arc<Chart>,
    pub dims: Arc<GradedDims>,
    pub connection: Superconnection,
    pub families: Vec<NamedFamily>,
    pub simplices: Vec<NamedSimplex>,
    pub chains: Vec<NamedChain>,
    pub words: Vec<NamedWord>,
    pub table: SimplexTable,
    pub quad: QuadSpec,
    pub tolerances: ToleranceSpec,
    context: Value,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, RunError> {
        let spec: ScenarioSpec = serde_json::from_str(text).map_err(|e| config(format!("scenario JSON: {e}")))?;
        Scenario::from_spec(spec)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Scenario, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| config(format!("cannot read {}: {e}", path.display())))?;
        Scenario::from_json(&text)
    }

    pub fn from_spec(spec: ScenarioSpec) -> Result<Scenario, RunError> {
        let cfg = |e: Error| config(e.to_string());
        let chart = Arc::new(build_chart(&spec.chart)?);
        let (dims, connection) = build_connection(&chart, spec.dims.as_deref(), &spec.superconnection)?;
        let quad = spec.quadrature.unwrap_or_default();
        quad.validate().map_err(cfg)?;

        let mut names = std::collections::HashSet::new();
        let mut unique = |kind: &str, n: &str| {
            if names.insert(format!("{kind}/{n}")) {
                Ok(())
            } else {
                Err(config(format!("duplicate {kind} name '{n}'")))
            }
        };

        let mut families = Vec::new();
        for f in &spec.families {
            unique("family", &f.name)?;
            let comps = parse_all(&f.components, &format!("family '{}'", f.name))?;
            let family = PathFamily::new(&chart, f.k, comps, f.breakpoints.clone())
                .map_err(|e| config(format!("family '{}': {e}", f.name)))?;
            let params = f.params.clone().unwrap_or_else(|| transport::sample_params(f.k));
            if params.is_empty() || params.iter().any(|w| w.len() != f.k || w.iter().any(|v| !(0.0..=1.0).contains(v))) {
                return Err(config(format!("family '{}': params must be points of [0,1]^{}", f.name, f.k)));
            }
            families.push(NamedFamily { name: f.name.clone(), family, params, spec: to_value(f) });
        }

        let mut simplices = Vec::new();
        let mut table = SimplexTable::new();
        let mut index = HashMap::new();
        let mut label_points: HashMap<u32, Vec<f64>> = HashMap::new();
        for (id, s) in spec.simplices.iter().enumerate() {
            unique("simplex", &s.name)?;
            let ctx = |e: Error| config(format!("simplex '{}': {e}", s.name));
            let simplex = match (&s.components, &s.vertices) {
                (Some(c), None) => {
                    let k = s.dim.ok_or_else(|| config(format!("simplex '{}': 'dim' is required with 'components'", s.name)))?;
                    Simplex::new(&chart, k, parse_all(c, &format!("simplex '{}'", s.name))?).map_err(ctx)?
                }
                (None, Some(v)) => {
                    let sx = Simplex::affine(&chart, v).map_err(ctx)?;
                    if s.dim.is_some_and(|k| k != sx.dim()) {
                        return Err(config(format!("simplex '{}': 'dim' disagrees with the vertex count", s.name)));
                    }
                    sx
                }
                _ => return Err(config(format!("simplex '{}': give exactly one of 'components' or 'vertices'", s.name))),
            };
            let labels = s.labels.clone().unwrap_or_else(|| (0..=simplex.dim() as u32).collect());
            for (i, l) in labels.iter().enumerate() {
                let p = simplex.vertex_point(i).map_err(ctx)?;
                if let Some(q) = label_points.get(l) {
                    if p.iter().zip(q).any(|(a, b)| (a - b).abs() > 1e-12) {
                        return Err(config(format!("vertex label {l} is used for different points")));
                    }
                }
                label_points.insert(*l, p);
            }
            table.insert(id as u32, simplex.clone(), labels).map_err(ctx)?;
            index.insert(s.name.clone(), id as u32);
            simplices.push(NamedSimplex { name: s.name.clone(), simplex, spec: to_value(s) });
        }

        let mut chains = Vec::new();
        for c in &spec.chains {
            unique("chain", &c.name)?;
            if c.barycenters.len() < 2 || c.barycenters.iter().any(|b| b.len() != chart.dim()) {
                return Err(config(format!(
                    "chain '{}': needs at least two barycenters with {} coordinates",
                    c.name,
                    chart.dim()
                )));
            }
            chains.push(NamedChain { name: c.name.clone(), barycenters: c.barycenters.clone(), spec: to_value(c) });
        }

        let mut words = Vec::new();
        for w in &spec.words {
            unique("word", &w.name)?;
            let ctx = |e: Error| config(format!("word '{}': {e}", w.name));
            let mut letters = Vec::new();
            for l in &w.letters {
                let base = *index
                    .get(&l.simplex)
                    .ok_or_else(|| config(format!("word '{}': unknown simplex '{}'", w.name, l.simplex)))?;
                let letter = Letter::new(base, l.verts.clone()).map_err(ctx)?;
                table.realize(&letter).map_err(ctx)?;
                letters.push(letter);
            }
            let word = BarWord::new(letters).map_err(ctx)?;
            if word.is_empty() {
                return Err(config(format!("word '{}' is empty", w.name)));
            }
            words.push(NamedWord { name: w.name.clone(), word, spec: to_value(w) });
        }

        let context = json!({
            "chart": spec.chart,
            "dims": dims.degrees().collect::<Vec<_>>(),
            "superconnection": spec.superconnection,
        });
        Ok(Scenario {
            chart,
            dims,
            connection,
            families,
            simplices,
            chains,
            words,
            table,
            quad,
            tolerances: spec.tolerances,
            context,
        })
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn parse_all(exprs: &[String], what: &str) -> Result<Vec<ScalarExpr>, RunError> {
    exprs
        .iter()
        .map(|e| ScalarExpr::parse(e).map_err(|err| config(format!("{what}: '{e}': {err}"))))
        .collect()
}

fn build_chart(spec: &ChartSpec) -> Result<Chart, RunError> {
    let names = match (&spec.names, spec.dim) {
        (Some(n), None) => n.clone(),
        (Some(n), Some(m)) if n.len() == m => n.clone(),
        (None, Some(m)) => (1..=m).map(|i| format!("x{i}")).collect(),
        (Some(_), Some(_)) => return Err(config("chart: 'dim' disagrees with the number of names")),
        (None, None) => return Err(config("chart: give 'names' or 'dim'")),
    };
    Chart::new(names, spec.bounds.clone()).map_err(|e| config(e.to_string()))
}

fn build_connection(
    chart: &Arc<Chart>,
    dims: Option<&[(i32, usize)]>,
    spec: &ConnectionSpec,
) -> Result<(Arc<GradedDims>, Superconnection), RunError> {
    let cfg = |e: Error| config(format!("superconnection: {e}"));
    let explicit_dims = dims.map(|d| GradedDims::shared(d.iter().copied())).transpose().map_err(cfg)?;
    let base = match &spec.builtin {
        None => None,
        Some(b) => Some(match b.name.as_str() {
            "trivial" => {
                let d = explicit_dims.clone().ok_or_else(|| config("builtin 'trivial' needs 'dims'"))?;
                Superconnection::trivial(chart, &d)
            }
            "unipotent" => catalog::unipotent_example(chart, b.seed.unwrap_or(11)).map_err(cfg)?,
            "gauge" => catalog::gauge_example(chart).map_err(cfg)?,
            other => return Err(config(format!("unknown builtin superconnection '{other}'"))),
        }),
    };
    let dims = match (&base, explicit_dims) {
        (Some(b), Some(d)) if **b.dims() != *d => {
            return Err(config("'dims' disagrees with the builtin superconnection"));
        }
        (Some(b), _) => b.dims().clone(),
        (None, Some(d)) => d,
        (None, None) => return Err(config("'dims' is required without a builtin superconnection")),
    };
    let m = chart.dim();
    let mut comps: Vec<EndForm> = match &base {
        Some(b) => b.components().to_vec(),
        None => (0..=m).map(|p| EndForm::zero(chart, &dims, p, 1 - p as i32)).collect(),
    };
    for c in &spec.components {
        if c.p > m {
            return Err(config(format!("component A_{} exceeds the chart dimension {m}", c.p)));
        }
        let form = build_component(chart, &dims, c)?;
        comps[c.p] = comps[c.p].add(&form).map_err(cfg)?;
    }
    let conn = Superconnection::new(chart, &dims, comps).map_err(cfg)?;
    Ok((dims, conn))
}

fn build_component(chart: &Arc<Chart>, dims: &Arc<GradedDims>, c: &ComponentSpec) -> Result<EndForm, RunError> {
    let e = 1 - c.p as i32;
    let what = format!("A_{}", c.p);
    let cfg = |err: Error| config(format!("{what}: {err}"));
    let mut out = EndForm::zero(chart, dims, c.p, e);
    for t in &c.terms {
        let mask = mask_from_indices(&t.dx).map_err(cfg)?;
        if t.dx.len() != c.p {
            return Err(config(format!("{what}: dx{:?} is not a {}-form index", t.dx, c.p)));
        }
        let form = match (&t.matrix, &t.blocks) {
            (Some(rows), None) => {
                let n = dims.total();
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(config(format!("{what}: matrix must be {n}x{n}")));
                }
                let mut mat = crate::forms::ExprMatrix::zero(n);
                for (i, r) in rows.iter().enumerate() {
                    for (j, v) in parse_all(r, &what)?.into_iter().enumerate() {
                        mat.set(i, j, v);
                    }
                }
                EndForm::new(chart, dims, c.p, e, [(mask, mat)]).map_err(cfg)?
            }
            (None, Some(blocks)) => {
                let mut parsed = Vec::new();
                for (k, rows) in blocks {
                    let k: i32 = k.parse().map_err(|_| config(format!("{what}: block key '{k}' is not a degree")))?;
                    let rows = rows.iter().map(|r| parse_all(r, &what)).collect::<Result<Vec<_>, _>>()?;
                    parsed.push((k, rows));
                }
                EndForm::from_blocks(chart, dims, c.p, e, [(mask, parsed)]).map_err(cfg)?
            }
            _ => return Err(config(format!("{what}: each term needs exactly one of 'matrix' or 'blocks'"))),
        };
        out = out.add(&form).map_err(cfg)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Suites and records

/// Which group of checks to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    CheckFlat,
    Transport,
    Psi,
    Stokes,
    Simplex,
    Twisting,
    Ainfty,
    Cobar,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 9] =
        ["check-flat", "transport", "psi", "stokes", "simplex", "twisting", "ainfty", "cobar", "all"];

    fn expand(self) -> Vec<Suite> {
        use Suite::*;
        match self {
            All => vec![CheckFlat, Transport, Psi, Stokes, Simplex, Twisting, Ainfty, Cobar],
            s => vec![s],
        }
    }
}

impl FromStr for Suite {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Suite, RunError> {
        Ok(match s {
            "check-flat" => Suite::CheckFlat,
            "transport" => Suite::Transport,
            "psi" => Suite::Psi,
            "stokes" => Suite::Stokes,
            "simplex" => Suite::Simplex,
            "twisting" => Suite::Twisting,
            "ainfty" => Suite::Ainfty,
            "cobar" => Suite::Cobar,
            "all" => Suite::All,
            other => return Err(config(format!("unknown subcommand '{other}' (expected one of {})", Suite::NAMES.join(", ")))),
        })
    }
}

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub kind: CheckKind,
    /// SHA-256 of the canonical JSON of the check's inputs.
    pub inputs_digest: String,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Records in declaration order plus wall-clock time per check.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<CheckRecord>,
    pub timings: Vec<Duration>,
}

impl RunOutput {
    pub fn all_pass(&self) -> bool {
        self.records.iter().all(|r| r.pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.records).expect("records serialize")
    }
}

/// Options that are not part of the scenario document.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Seed for the randomized suites.
    pub seed: u64,
}

type Job<'a> = Box<dyn Fn() -> crate::error::Result<f64> + Send + Sync + 'a>;

struct Check<'a> {
    name: String,
    kind: CheckKind,
    inputs: Value,
    job: Job<'a>,
}

/// Number of random words in the cobar `d² = 0` check.
pub const RANDOM_WORDS: usize = 64;

fn order_deviation(order: f64, residuals: &[(f64, f64)]) -> f64 {
    // at roundoff the order is meaningless; treat it as converged
    if residuals.last().is_some_and(|(_, r)| *r < 1e-11) {
        0.0
    } else {
        (order - 2.0).abs()
    }
}

fn checks_for<'a>(sc: &'a Scenario, suite: Suite, opts: &RunOptions) -> Vec<Check<'a>> {
    let d = &sc.connection;
    let quad = sc.quad;
    let mut out: Vec<Check<'a>> = Vec::new();
    let mut push = |name: String, kind: CheckKind, inputs: Value, job: Job<'a>| out.push(Check { name, kind, inputs, job });
    match suite {
        Suite::CheckFlat => {
            // one grid evaluation shared by all q; the first check to run pays for it
            let report = Arc::new(OnceLock::new());
            for q in -1..2 * sc.chart.dim() as i32 {
                let r = report.clone();
                push(
                    format!("flat.q={q}"),
                    CheckKind::Exact,
                    json!({"grid": "default", "q": q}),
                    Box::new(move || match r.get_or_init(|| flatness_residuals(d, &SampleGrid::Default)) {
                        Ok(rep) => Ok(rep.residual(q).unwrap_or(0.0)),
                        Err(e) => Err(e.clone()),
                    }),
                );
            }
        }
        Suite::Transport => {
            for f in &sc.families {
                push(
                    format!("transport.chain_map.{}", f.name),
                    CheckKind::Smooth,
                    f.spec.clone(),
                    Box::new(move || {
                        let mut worst: f64 = 0.0;
                        for w in &f.params {
                            worst = worst.max(transport::check_chain_map(&f.family, w, d, &quad)?);
                        }
                        Ok(worst)
                    }),
                );
                push(
                    format!("transport.series.{}", f.name),
                    CheckKind::Smooth,
                    f.spec.clone(),
                    Box::new(move || {
                        let mut worst: f64 = 0.0;
                        for w in &f.params {
                            let ode = transport::transport_phi(&f.family, w, 0.0, 1.0, d, &quad)?;
                            let series = transport::phi_series(&f.family, w, 0.0, 1.0, d, 1e-12)?;
                            worst = worst.max(ode.sub(&series.value)?.op_norm());
                        }
                        Ok(worst)
                    }),
                );
            }
        }
        Suite::Psi => {
            for f in sc.families.iter().filter(|f| f.family.params() >= 1) {
                push(
                    format!("psi.recursion.{}", f.name),
                    CheckKind::Smooth,
                    f.spec.clone(),
                    Box::new(move || {
                        let p_max = f.family.params().min(2);
                        let mut worst: f64 = 0.0;
                        for w in &f.params {
                            let ode = transport::transport_psi(&f.family, w, 0.0, 1.0, d, &quad, p_max)?;
                            for (p, v) in ode.iter().enumerate() {
                                let rec = transport::psi_recursive(&f.family, w, 0.0, 1.0, d, &quad, p)?;
                                worst = worst.max(v.sub(&rec)?.norm());
                            }
                        }
                        Ok(worst)
                    }),
                );
                push(
                    format!("psi.factorization.{}", f.name),
                    CheckKind::Smooth,
                    f.spec.clone(),
                    Box::new(move || {
                        let mut worst: f64 = 0.0;
                        for w in &f.params {
                            worst = worst.max(transport::check_factorization(&f.family, w, d, &quad, 0.5)?);
                        }
                        Ok(worst)
                    }),
                );
                push(
                    format!("psi.ds_order.{}", f.name),
                    CheckKind::Order,
                    f.spec.clone(),
                    Box::new(move || {
                        let rep = transport::check_ds(&f.family, &f.params[0], d, &quad, 1)?;
                        Ok(order_deviation(rep.order, &rep.residuals))
                    }),
                );
            }
        }
        Suite::Stokes => {
            for f in sc.families.iter().filter(|f| f.family.params() >= 1) {
                push(
                    format!("stokes.{}", f.name),
                    CheckKind::Smooth,
                    f.spec.clone(),
                    Box::new(move || transport::check_stokes(&f.family, d, &quad, f.family.params())),
                );
            }
        }
        Suite::Simplex => {
            for k in 2..=4usize {
                push(
                    format!("simplex.face_lemmas.k={k}"),
                    CheckKind::Exact,
                    json!({"k": k}),
                    Box::new(move || Ok(if simplex::check_face_lemmas(k)?.holds() { 0.0 } else { 1.0 })),
                );
            }
            push(
                "simplex.theta_endpoints".into(),
                CheckKind::Exact,
                json!({"k": [1, 2, 3, 4]}),
                Box::new(theta_endpoint_failures),
            );
            for s in &sc.simplices {
                push(
                    format!("simplex.image.{}", s.name),
                    CheckKind::Exact,
                    s.spec.clone(),
                    Box::new(move || {
                        for i in 0..=s.simplex.dim() {
                            let p = s.simplex.vertex_point(i)?;
                            if !sc.chart.contains(&p, 1e-9) {
                                return Ok(1.0);
                            }
                        }
                        Ok(0.0)
                    }),
                );
            }
        }
        Suite::Twisting => {
            for s in sc.simplices.iter().filter(|s| s.simplex.dim() >= 1) {
                let kind = if s.simplex.dim() == 1 { CheckKind::Smooth } else { CheckKind::Kink };
                push(
                    format!("twisting.{}", s.name),
                    kind,
                    s.spec.clone(),
                    Box::new(move || simplex::twisting_residual(&s.simplex, d, &quad)),
                );
            }
        }
        Suite::Ainfty => {
            for c in &sc.chains {
                let kind = if c.barycenters.len() == 2 { CheckKind::Smooth } else { CheckKind::Kink };
                push(
                    format!("ainfty.{}", c.name),
                    kind,
                    c.spec.clone(),
                    Box::new(move || simplex::ainfty_residual(&c.barycenters, d, &quad)),
                );
            }
        }
        Suite::Cobar => {
            let seed = opts.seed;
            push(
                "cobar.d_squared.random".into(),
                CheckKind::Exact,
                json!({"seed": seed, "words": RANDOM_WORDS, "max_degree": 4}),
                Box::new(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let failures = (0..RANDOM_WORDS)
                        .filter(|_| !cobar::check_d_squared(&cobar::random_word(&mut rng, 4)))
                        .count();
                    Ok(failures as f64)
                }),
            );
            for w in &sc.words {
                push(
                    format!("cobar.d_squared.{}", w.name),
                    CheckKind::Exact,
                    w.spec.clone(),
                    Box::new(move || Ok(cobar::bar_d_sum(&cobar::bar_d(&w.word)).len() as f64)),
                );
                push(
                    format!("cobar.dg_functor.{}", w.name),
                    CheckKind::Kink,
                    w.spec.clone(),
                    Box::new(move || cobar::dg_functor_residual(&w.word, &sc.table, d, &quad)),
                );
            }
        }
        Suite::All => unreachable!("expanded by the caller"),
    }
    out
}

/// Number of `(k, w)` samples where `θ_w(0) ≠ v_k` or `θ_w(1) ≠ v_0`, exactly.
fn theta_endpoint_failures() -> crate::error::Result<f64> {
    let mut failures = 0usize;
    let levels = [(0i64, 1i64), (1, 3), (1, 2), (5, 7), (1, 1)];
    for k in 1..=4usize {
        for (i, &(n, dd)) in levels.iter().enumerate() {
            let w: Vec<BigRational> = (0..k.saturating_sub(1))
                .map(|a| {
                    let (n2, d2) = levels[(i + a) % levels.len()];
                    BigRational::new(n.into(), dd.into()) * BigRational::new(n2.max(1).into(), d2.into())
                })
                .collect();
            let zero: BigRational = num_traits::Zero::zero();
            let one: BigRational = num_traits::One::one();
            let start = simplex::theta(k, &w, &zero)?;
            let end = simplex::theta(k, &w, &one)?;
            if start != simplex::vertex::<BigRational>(k, k) || end != simplex::vertex::<BigRational>(k, 0) {
                failures += 1;
            }
        }
    }
    Ok(failures as f64)
}

fn digest(context: &Value, suite: &str, name: &str, inputs: &Value, quad: &QuadSpec) -> String {
    let doc = json!({
        "suite": suite,
        "check": name,
        "context": context,
        "inputs": inputs,
        "quadrature": quad,
    });
    let bytes = serde_json::to_vec(&doc).expect("digest input serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn suite_name(s: Suite) -> &'static str {
    match s {
        Suite::CheckFlat => "check-flat",
        Suite::Transport => "transport",
        Suite::Psi => "psi",
        Suite::Stokes => "stokes",
        Suite::Simplex => "simplex",
        Suite::Twisting => "twisting",
        Suite::Ainfty => "ainfty",
        Suite::Cobar => "cobar",
        Suite::All => "all",
    }
}

/// Runs `suite` on `sc`. Checks run concurrently; records keep declaration order.
pub fn run(sc: &Scenario, suite: Suite, opts: &RunOptions) -> Result<RunOutput, RunError> {
    let mut tagged = Vec::new();
    for s in suite.expand() {
        for c in checks_for(sc, s, opts) {
            tagged.push((s, c));
        }
    }
    let results: Vec<(crate::error::Result<f64>, Duration)> = tagged
        .par_iter()
        .map(|(_, c)| {
            let start = Instant::now();
            let r = (c.job)();
            (r, start.elapsed())
        })
        .collect();
    let mut records = Vec::with_capacity(tagged.len());
    let mut timings = Vec::with_capacity(tagged.len());
    for ((s, c), (r, dt)) in tagged.iter().zip(results) {
        let residual = r.map_err(|source| RunError::Runtime { check: c.name.clone(), source })?;
        let tolerance = sc.tolerances.lookup(&c.name, c.kind);
        records.push(CheckRecord {
            name: c.name.clone(),
            kind: c.kind,
            inputs_digest: digest(&sc.context, suite_name(*s), &c.name, &c.inputs, &sc.quad),
            residual,
            tolerance,
            pass: residual <= tolerance,
        });
        timings.push(dt);
    }
    Ok(RunOutput { records, timings })
}

#[cfg(test)]
mod tests {
    use super::*;

    const WITNESS: &str = r#"{
        "chart": {"dim": 2, "bounds": [[-1, 1], [-1, 1]]},
        "dims": [[0, 1]],
        "superconnection": {"components": [{"p": 1, "terms": [{"dx": [1], "matrix": [["x2"]]}]}]}
    }"#;

    #[test]
    fn witness_has_unit_q1_residual() {
        let sc = Scenario::from_json(WITNESS).unwrap();
        let out = run(&sc, Suite::CheckFlat, &RunOptions::default()).unwrap();
        let q1 = out.records.iter().find(|r| r.name == "flat.q=1").unwrap();
        assert!((q1.residual - 1.0).abs() < 1e-9);
        assert!(!q1.pass && !out.all_pass());
        assert!(out.records.iter().filter(|r| r.name != "flat.q=1").all(|r| r.residual == 0.0));
    }

    #[test]
    fn blocks_and_matrix_agree() {
        let blocks = WITNESS.replace(r#""matrix": [["x2"]]"#, r#""blocks": {"0": [["x2"]]}"#);
        let a = Scenario::from_json(WITNESS).unwrap();
        let b = Scenario::from_json(&blocks).unwrap();
        assert_eq!(
            a.connection.component(1).terms().map(|(k, m)| (k, m.get(0, 0).to_string())).collect::<Vec<_>>(),
            b.connection.component(1).terms().map(|(k, m)| (k, m.get(0, 0).to_string())).collect::<Vec<_>>()
        );
    }

    #[test]
    fn configuration_errors() {
        let bad = [
            r#"{"chart": {"dim": 2}, "superconnection": {}}"#,
            r#"{"chart": {"dim": 1}, "dims": [[0,1]], "superconnection": {"components": [{"p": 1, "terms": [{"dx": [1], "matrix": [["x1 +"]]}]}]}}"#,
            r#"{"chart": {"dim": 1}, "dims": [[0,1]], "superconnection": {"components": [{"p": 1, "terms": [{"dx": [2], "matrix": [["1"]]}]}]}}"#,
            r#"{"chart": {"dim": 1}, "dims": [[0,1]], "superconnection": {"builtin": {"name": "nope"}}}"#,
            r#"{"chart": {"dim": 1}, "dims": [[0,1]], "superconnection": {}, "families": [{"name": "f", "components": ["t", "t"]}]}"#,
            r#"{"chart": {"dim": 1}, "dims": [[0,1]], "superconnection": {}, "extra": 1}"#,
        ];
        for b in bad {
            let e = Scenario::from_json(b).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{b}: {e}");
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn tolerance_overrides() {
        let mut t = ToleranceSpec::default();
        t.apply_override("kink", 0.5).unwrap();
        t.apply_override("flat.q=1", 2.0).unwrap();
        assert_eq!(t.lookup("twisting.s", CheckKind::Kink), 0.5);
        assert_eq!(t.lookup("flat.q=1", CheckKind::Exact), 2.0);
        assert_eq!(t.lookup("flat.q=0", CheckKind::Exact), 1e-10);
        assert!(t.apply_override("smooth", f64::NAN).is_err());
    }

    #[test]
    fn digests_are_stable_and_input_sensitive() {
        let sc = Scenario::from_json(WITNESS).unwrap();
        let a = run(&sc, Suite::CheckFlat, &RunOptions::default()).unwrap();
        let b = run(&sc, Suite::CheckFlat, &RunOptions::default()).unwrap();
        assert_eq!(a.records, b.records);
        let other = Scenario::from_json(&WITNESS.replace("x2", "2*x2")).unwrap();
        let c = run(&other, Suite::CheckFlat, &RunOptions::default()).unwrap();
        assert_ne!(a.records[0].inputs_digest, c.records[0].inputs_digest);
        assert_eq!(a.records[0].inputs_digest.len(), 64);
    }
}
