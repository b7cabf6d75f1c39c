//! Linear maps from the target-language contextual space into the source-language space.
//!
//! Data matrices hold one vector per row: `X` is `n × d_t` (target side), `Y` is `n × d_s`
//! (source side). A map `W` is `d_s × d_t` and sends row `x` to `W x`, i.e. `X Wᵀ`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const MAP_MAGIC: &[u8; 4] = b"XMAP";

/// Tolerance for the isometry invariant `‖WᵀW − I‖_max`.
pub const ISOMETRY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    #[serde(alias = "lstsq")]
    LeastSquares,
    #[serde(alias = "procrustes")]
    Isometric,
    Rcsls,
    Identity,
}

impl MapKind {
    pub fn name(self) -> &'static str {
        match self {
            MapKind::LeastSquares => "least_squares",
            MapKind::Isometric => "isometric",
            MapKind::Rcsls => "rcsls",
            MapKind::Identity => "identity",
        }
    }

    fn code(self) -> u8 {
        match self {
            MapKind::LeastSquares => 0,
            MapKind::Isometric => 1,
            MapKind::Rcsls => 2,
            MapKind::Identity => 3,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => MapKind::LeastSquares,
            1 => MapKind::Isometric,
            2 => MapKind::Rcsls,
            3 => MapKind::Identity,
            other => {
                return Err(Error::MalformedHeader(format!(
                    "map: unknown kind code {other}"
                )))
            }
        })
    }
}

/// Alphabetical by canonical name.
impl Ord for MapKind {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.name().cmp(other.name())
    }
}

impl PartialOrd for MapKind {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "least_squares" | "lstsq" => Ok(MapKind::LeastSquares),
            "isometric" | "procrustes" => Ok(MapKind::Isometric),
            "rcsls" => Ok(MapKind::Rcsls),
            "identity" => Ok(MapKind::Identity),
            other => Err(Error::InvalidArgument(format!("unknown map kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    /// `d_s × d_t`.
    pub matrix: DMatrix<f64>,
    pub kind: MapKind,
    /// Layers are carried in memory only; the `.map` format does not store them.
    pub source_layer: Option<i8>,
    pub target_layer: Option<i8>,
}

impl LinearMap {
    pub fn identity(dim: usize) -> Self {
        LinearMap {
            matrix: DMatrix::identity(dim, dim),
            kind: MapKind::Identity,
            source_layer: None,
            target_layer: None,
        }
    }

    pub fn with_layers(mut self, source_layer: i8, target_layer: i8) -> Self {
        self.source_layer = Some(source_layer);
        self.target_layer = Some(target_layer);
        self
    }

    pub fn source_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn target_dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Checks the kind-specific invariants.
    pub fn validate(&self) -> Result<()> {
        if self.matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("map matrix".into()));
        }
        match self.kind {
            MapKind::Isometric => {
                let dev = orthogonality_error(&self.matrix);
                if dev > ISOMETRY_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "isometric map deviates from WᵀW = I by {dev:e}"
                    )));
                }
            }
            MapKind::Identity
                if (!self.matrix.is_square() || self.matrix != DMatrix::identity(self.source_dim(), self.source_dim()))
                => {
                    return Err(Error::InvalidArgument(
                        "identity map must be a square identity matrix".into(),
                    ));
                }
            _ => {}
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAP_MAGIC);
        w.u8(self.kind.code());
        w.u32(self.source_dim() as u32);
        w.u32(self.target_dim() as u32);
        for r in 0..self.source_dim() {
            for c in 0..self.target_dim() {
                w.f64(self.matrix[(r, c)]);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "map");
        r.magic(MAP_MAGIC)?;
        let kind = MapKind::from_code(r.u8()?)?;
        let ds = r.u32()? as usize;
        let dt = r.u32()? as usize;
        let mut matrix = DMatrix::zeros(ds, dt);
        for row in 0..ds {
            for col in 0..dt {
                matrix[(row, col)] = r.f64()?;
            }
        }
        r.finish()?;
        let map = LinearMap {
            matrix,
            kind,
            source_layer: None,
            target_layer: None,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

/// `‖WᵀW − I‖_max`.
pub fn orthogonality_error(w: &DMatrix<f64>) -> f64 {
    let gram = w.transpose() * w;
    let eye = DMatrix::<f64>::identity(gram.nrows(), gram.ncols());
    (gram - eye).amax()
}

/// `Σᵢ ‖W xᵢ − yᵢ‖²`.
pub fn squared_loss(w: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    (x * w.transpose() - y).norm_squared()
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

fn check_rows(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::dims(x.nrows(), y.nrows(), "anchor rows of X and Y"));
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("no anchor pairs".into()));
    }
    check_finite(x, "X")?;
    check_finite(y, "Y")
}

/// Unit-length rows; zero rows are left at zero.
pub fn normalize_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct LeastSquaresFit {
    pub map: LinearMap,
    /// `Σᵢ ‖W xᵢ − yᵢ‖²` at the solution.
    pub residual: f64,
    pub effective_rank: usize,
}

/// Unconstrained least squares through the SVD pseudoinverse of `X`, so rank-deficient
/// anchor sets yield the minimum-norm solution.
pub fn fit_least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<LeastSquaresFit> {
    check_rows(x, y)?;
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON;
    let rank = svd.rank(eps);
    let pinv = svd
        .pseudo_inverse(eps)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let wt = pinv * y;
    let matrix = wt.transpose();
    let residual = squared_loss(&matrix, x, y);
    Ok(LeastSquaresFit {
        map: LinearMap {
            matrix,
            kind: MapKind::LeastSquares,
            source_layer: None,
            target_layer: None,
        },
        residual,
        effective_rank: rank,
    })
}

/// Orthogonal Procrustes: with `YᵀX = UΣVᵀ`, returns `W = UVᵀ`.
///
/// Rectangular spaces are allowed when `d_s ≥ d_t`; `W` then has orthonormal columns.
pub fn fit_procrustes(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<LinearMap> {
    check_rows(x, y)?;
    if y.ncols() < x.ncols() {
        return Err(Error::dims(
            x.ncols(),
            y.ncols(),
            "isometric map needs source dim >= target dim",
        ));
    }
    let m = y.transpose() * x;
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    Ok(LinearMap {
        matrix: u * v_t,
        kind: MapKind::Isometric,
        source_layer: None,
        target_layer: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcslsParams {
    pub knn: usize,
    pub steps: usize,
    pub step_size: f64,
    /// Halvings tried before a step is abandoned.
    pub max_halvings: usize,
}

impl Default for RcslsParams {
    fn default() -> Self {
        RcslsParams {
            knn: 10,
            steps: 50,
            step_size: 1.0,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RcslsFit {
    pub map: LinearMap,
    /// Objective at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
}

const BLOCK: usize = 256;

/// For each row of `a`, the `k` largest dot products against rows of `b`: indices and their sum.
fn top_k_rows(a: &DMatrix<f64>, b: &DMatrix<f64>, k: usize) -> Vec<(Vec<usize>, f64)> {
    let bt = b.transpose();
    let starts: Vec<usize> = (0..a.nrows()).step_by(BLOCK).collect();
    starts
        .par_iter()
        .map(|&start| {
            let len = BLOCK.min(a.nrows() - start);
            let scores = a.rows(start, len) * &bt;
            (0..len)
                .map(|r| {
                    let mut idx: Vec<usize> = (0..scores.ncols()).collect();
                    let row = scores.row(r);
                    let by_score = |i: &usize, j: &usize| {
                        row[*j].partial_cmp(&row[*i]).unwrap().then(i.cmp(j))
                    };
                    if k < idx.len() {
                        idx.select_nth_unstable_by(k - 1, by_score);
                        idx.truncate(k);
                    }
                    let sum = idx.iter().map(|&j| row[j]).sum();
                    (idx, sum)
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

struct RcslsState {
    objective: f64,
    fwd: Vec<(Vec<usize>, f64)>,
    bwd: Vec<(Vec<usize>, f64)>,
}

/// Relaxed CSLS objective on row-normalized anchors:
/// `(1/n) Σᵢ [2 (W xᵢ)·yᵢ − mean_{k-NN y of W xᵢ} (W xᵢ)·y − mean_{k-NN W x of yᵢ} (W x)·yᵢ]`.
fn rcsls_state(w: &DMatrix<f64>, xn: &DMatrix<f64>, yn: &DMatrix<f64>, k: usize) -> RcslsState {
    let n = xn.nrows();
    let mapped = xn * w.transpose();
    let fwd = top_k_rows(&mapped, yn, k);
    let bwd = top_k_rows(yn, &mapped, k);
    let kf = k as f64;
    let mut total = 0.0;
    for i in 0..n {
        let own = mapped.row(i).dot(&yn.row(i));
        total += 2.0 * own - fwd[i].1 / kf - bwd[i].1 / kf;
    }
    RcslsState {
        objective: total / n as f64,
        fwd,
        bwd,
    }
}

/// Gradient of the objective with the neighbourhoods held fixed.
fn rcsls_gradient(
    state: &RcslsState,
    xn: &DMatrix<f64>,
    yn: &DMatrix<f64>,
    k: usize,
) -> DMatrix<f64> {
    let n = xn.nrows();
    // Row i of `fwd_sum` is Σ_{j ∈ NN_y(W xᵢ)} yⱼ; row i of `bwd_sum` is Σ_{j ∈ NN_Wx(yᵢ)} xⱼ.
    let mut fwd_sum = DMatrix::<f64>::zeros(n, yn.ncols());
    let mut bwd_sum = DMatrix::<f64>::zeros(n, xn.ncols());
    for i in 0..n {
        for &j in &state.fwd[i].0 {
            let yj = yn.row(j).into_owned();
            let mut row = fwd_sum.row_mut(i);
            row += yj;
        }
        for &j in &state.bwd[i].0 {
            let xj = xn.row(j).into_owned();
            let mut row = bwd_sum.row_mut(i);
            row += xj;
        }
    }
    let kf = k as f64;
    let yt = yn.transpose();
    (&yt * xn * 2.0 - fwd_sum.transpose() * xn / kf - yt * bwd_sum / kf) / n as f64
}

/// Clips singular values into `[0, 1]`.
fn project_spectral(w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut svd = w.clone().svd(true, true);
    for s in svd.singular_values.iter_mut() {
        *s = s.clamp(0.0, 1.0);
    }
    svd.recompose().expect("U and Vᵀ computed")
}

/// Full-batch projected gradient ascent on the relaxed CSLS criterion, starting from `init`.
pub fn fit_rcsls(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    init: &LinearMap,
    params: &RcslsParams,
) -> Result<RcslsFit> {
    check_rows(x, y)?;
    if params.knn == 0 {
        return Err(Error::InvalidArgument("knn must be at least 1".into()));
    }
    if init.target_dim() != x.ncols() {
        return Err(Error::dims(init.target_dim(), x.ncols(), "init map vs X"));
    }
    if init.source_dim() != y.ncols() {
        return Err(Error::dims(init.source_dim(), y.ncols(), "init map vs Y"));
    }
    if params.steps == 0 {
        return Ok(RcslsFit {
            map: init.clone(),
            objective_trace: Vec::new(),
        });
    }
    let k = params.knn.min(x.nrows());
    let xn = normalize_rows(x);
    let yn = normalize_rows(y);
    let mut w = init.matrix.clone();
    let mut state = rcsls_state(&w, &xn, &yn, k);
    let mut trace = vec![state.objective];
    let mut eta = params.step_size;
    for _ in 0..params.steps {
        let grad = rcsls_gradient(&state, &xn, &yn, k);
        let mut accepted = false;
        for _ in 0..=params.max_halvings {
            let candidate = project_spectral(&(&w + &grad * eta));
            let next = rcsls_state(&candidate, &xn, &yn, k);
            if next.objective >= state.objective {
                w = candidate;
                state = next;
                trace.push(state.objective);
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(RcslsFit {
        map: LinearMap {
            matrix: w,
            kind: MapKind::Rcsls,
            source_layer: init.source_layer,
            target_layer: init.target_layer,
        },
        objective_trace: trace,
    })
}

/// The relaxed CSLS objective of an arbitrary `W`, exposed for diagnostics and tests.
pub fn rcsls_objective(w: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>, knn: usize) -> f64 {
    let k = knn.clamp(1, x.nrows().max(1));
    rcsls_state(w, &normalize_rows(x), &normalize_rows(y), k).objective
}

/// Rows `W xᵢ`; the identity map returns the input unchanged.
pub fn apply_map(map: &LinearMap, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != map.target_dim() {
        return Err(Error::dims(map.target_dim(), x.ncols(), "columns of X vs map"));
    }
    if map.kind == MapKind::Identity {
        return Ok(x.clone());
    }
    Ok(x * map.matrix.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub accuracy_at_1: f64,
    /// Queries whose best score was shared by more than one candidate.
    pub ties: usize,
    pub n: usize,
}

/// Fraction of queries `i` whose cosine nearest neighbour among `y_test` rows is row `i`.
/// Ties go to the lowest index.
pub fn eval_retrieval(
    map: &LinearMap,
    x_test: &DMatrix<f64>,
    y_test: &DMatrix<f64>,
) -> Result<RetrievalReport> {
    if x_test.nrows() == 0 {
        return Err(Error::EmptyTestSet);
    }
    if x_test.nrows() != y_test.nrows() {
        return Err(Error::dims(x_test.nrows(), y_test.nrows(), "test rows"));
    }
    let mapped = apply_map(map, x_test)?;
    if mapped.ncols() != y_test.ncols() {
        return Err(Error::dims(y_test.ncols(), mapped.ncols(), "mapped dim vs Y"));
    }
    Ok(nearest_neighbour_accuracy(&normalize_rows(&mapped), &normalize_rows(y_test)))
}

fn nearest_neighbour_accuracy(queries: &DMatrix<f64>, keys: &DMatrix<f64>) -> RetrievalReport {
    let n = queries.nrows();
    let kt = keys.transpose();
    let starts: Vec<usize> = (0..n).step_by(BLOCK).collect();
    let (hits, ties) = starts
        .par_iter()
        .map(|&start| {
            let len = BLOCK.min(n - start);
            let scores = queries.rows(start, len) * &kt;
            let mut hits = 0usize;
            let mut ties = 0usize;
            for r in 0..len {
                let row = scores.row(r);
                let mut best = 0;
                let mut tied = false;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                        tied = false;
                    } else if row[j] == row[best] {
                        tied = true;
                    }
                }
                hits += usize::from(best == start + r);
                ties += usize::from(tied);
            }
            (hits, ties)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    RetrievalReport {
        accuracy_at_1: hits as f64 / n as f64,
        ties,
        n,
    }
}
