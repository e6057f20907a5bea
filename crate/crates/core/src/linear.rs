//! One-vs-rest linear SVM and epsilon-insensitive linear SVR.
//!
//! Both models minimise their primal objective with an unregularised bias:
//!
//! ```text
//! SVM (per class k):  1/2 |w|^2 + C sum_i max(0, 1 - s_i (w.x_i + b))
//! SVR:                1/2 |w|^2 + C sum_i max(0, |w.x_i + b - y_i| - eps)
//! ```
//!
//! For a fixed bias the problem is the bias-free SVM/SVR, solved by dual
//! coordinate descent (one exact coordinate maximisation per sample, sample
//! order reshuffled every epoch from the seeded generator). The optimal value
//! as a function of the bias is convex with subgradient `-sum(dual)` so the
//! bias itself is found by bracketing and bisection on the sign of the dual
//! sum, warm-starting the inner solver each time.
//!
//! Inner stopping rule: relative change of the dual objective over one epoch
//! below `tolerance`, or `max_epochs`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dates::{BinIndex, TemporalBinning};
use crate::error::{Error, Result};
use crate::ingest::FeatureMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub c_svm: f64,
    pub c_svr: f64,
    pub epsilon: f64,
    /// Epoch cap of every inner (fixed-bias) solve.
    pub max_epochs: usize,
    pub tolerance: f64,
    pub rng_seed: u64,
    /// L2-normalise every row before training and prediction.
    pub normalize_rows: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            c_svm: 0.1,
            c_svr: 100.0,
            epsilon: 0.1,
            max_epochs: 2000,
            tolerance: 1e-10,
            rng_seed: 0,
            normalize_rows: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.c_svm > 0.0
            && self.c_svr > 0.0
            && self.epsilon >= 0.0
            && self.epsilon.is_finite()
            && self.c_svm.is_finite()
            && self.c_svr.is_finite()
            && self.max_epochs > 0
            && self.tolerance >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "bad training config {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvmModel {
    dim: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
    binning: TemporalBinning,
    normalize_rows: bool,
}

impl LinearSvmModel {
    /// `weights` is `n_bins x dim`, row-major.
    pub fn from_parts(
        binning: TemporalBinning,
        dim: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
        normalize_rows: bool,
    ) -> Result<Self> {
        let k = binning.n_bins();
        if weights.len() != k * dim || biases.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "svm with {k} classes and dim {dim} got {} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("svm parameters".into()));
        }
        Ok(LinearSvmModel {
            dim,
            weights,
            biases,
            binning,
            normalize_rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.biases.len()
    }

    pub fn binning(&self) -> &TemporalBinning {
        &self.binning
    }

    pub fn normalize_rows(&self) -> bool {
        self.normalize_rows
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn class_weights(&self, k: usize) -> &[f64] {
        &self.weights[k * self.dim..(k + 1) * self.dim]
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn decision_values(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        let x = prepare_row(x, self.normalize_rows);
        Ok((0..self.n_classes())
            .map(|k| dot(self.class_weights(k), &x) + self.biases[k])
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvrModel {
    weight: Vec<f64>,
    bias: f64,
    normalize_rows: bool,
}

impl LinearSvrModel {
    pub fn from_parts(weight: Vec<f64>, bias: f64, normalize_rows: bool) -> Result<Self> {
        if weight.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
            return Err(Error::NonFinite("svr parameters".into()));
        }
        Ok(LinearSvrModel {
            weight,
            bias,
            normalize_rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn normalize_rows(&self) -> bool {
        self.normalize_rows
    }

    /// Predicted year.
    pub fn predict(&self, x: &[f32]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(dot(&self.weight, &prepare_row(x, self.normalize_rows)) + self.bias)
    }
}

/// Diagnostics of one binary (or regression) solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Number of fixed-bias solves performed by the bias search.
    pub bias_steps: usize,
    pub epochs: usize,
    pub primal_objective: f64,
    /// Dual objective at the final bias; a lower bound for that bias.
    pub dual_objective: f64,
    /// Primal objective of the returned point after every epoch.
    pub objective_trace: Vec<f64>,
}

/// Argmax of the decision values; ties go to the lowest class index.
pub fn predict_class(model: &LinearSvmModel, x: &[f32]) -> Result<BinIndex> {
    let scores = model.decision_values(x)?;
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = k;
        }
    }
    Ok(BinIndex(best))
}

/// Predicted year of a class model: the representative year of its bin.
pub fn predict_year_svm(model: &LinearSvmModel, x: &[f32]) -> Result<f64> {
    Ok(model.binning.representative_year(predict_class(model, x)?) as f64)
}

pub fn train_svm(
    x: &FeatureMatrix,
    labels: &[BinIndex],
    binning: &TemporalBinning,
    cfg: &TrainConfig,
) -> Result<LinearSvmModel> {
    train_svm_with_report(x, labels, binning, cfg).map(|(m, _)| m)
}

/// One-vs-rest training; classes are solved in parallel, each with its own
/// generator derived from `rng_seed`, so the result does not depend on the
/// thread count.
pub fn train_svm_with_report(
    x: &FeatureMatrix,
    labels: &[BinIndex],
    binning: &TemporalBinning,
    cfg: &TrainConfig,
) -> Result<(LinearSvmModel, Vec<SolveReport>)> {
    cfg.validate()?;
    if labels.len() != x.n_samples() {
        return Err(Error::LengthMismatch {
            left: x.n_samples(),
            right: labels.len(),
        });
    }
    if x.n_samples() == 0 {
        return Err(Error::Empty("training set"));
    }
    for &l in labels {
        binning.check(l)?;
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::SingleClass);
    }
    let rows = DenseRows::new(x, cfg.normalize_rows);
    let k = binning.n_bins();
    let solved: Vec<(Vec<f64>, f64, SolveReport)> = (0..k)
        .into_par_iter()
        .map(|class| {
            let signs: Vec<f64> = labels
                .iter()
                .map(|l| if l.0 == class { 1.0 } else { -1.0 })
                .collect();
            let seed = cfg.rng_seed.wrapping_add(class as u64);
            solve_with_bias(&mut SvmDual::new(&rows, signs, cfg.c_svm, seed), cfg)
        })
        .collect();
    let mut weights = Vec::with_capacity(k * x.dim());
    let mut biases = Vec::with_capacity(k);
    let mut reports = Vec::with_capacity(k);
    for (w, b, r) in solved {
        weights.extend(w);
        biases.push(b);
        reports.push(r);
    }
    let model = LinearSvmModel::from_parts(*binning, x.dim(), weights, biases, cfg.normalize_rows)?;
    Ok((model, reports))
}

pub fn train_svr(x: &FeatureMatrix, years: &[f64], cfg: &TrainConfig) -> Result<LinearSvrModel> {
    train_svr_with_report(x, years, cfg).map(|(m, _)| m)
}

pub fn train_svr_with_report(
    x: &FeatureMatrix,
    years: &[f64],
    cfg: &TrainConfig,
) -> Result<(LinearSvrModel, SolveReport)> {
    cfg.validate()?;
    if years.len() != x.n_samples() {
        return Err(Error::LengthMismatch {
            left: x.n_samples(),
            right: years.len(),
        });
    }
    if x.n_samples() == 0 {
        return Err(Error::Empty("training set"));
    }
    if let Some(i) = years.iter().position(|y| !y.is_finite()) {
        return Err(Error::NonFinite(format!("label {i}")));
    }
    let rows = DenseRows::new(x, cfg.normalize_rows);
    let mut dual = SvrDual::new(&rows, years.to_vec(), cfg.c_svr, cfg.epsilon, cfg.rng_seed);
    let (w, b, report) = solve_with_bias(&mut dual, cfg);
    Ok((
        LinearSvrModel::from_parts(w, b, cfg.normalize_rows)?,
        report,
    ))
}

/// Mean absolute error in years.
pub fn evaluate_mae(pred_years: &[f64], true_years: &[f64]) -> Result<f64> {
    if pred_years.len() != true_years.len() {
        return Err(Error::LengthMismatch {
            left: pred_years.len(),
            right: true_years.len(),
        });
    }
    if pred_years.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let total: f64 = pred_years
        .iter()
        .zip(true_years)
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(total / pred_years.len() as f64)
}

/// Class predictions converted through bin midpoints, then MAE.
pub fn evaluate_class_mae(
    predicted: &[BinIndex],
    true_years: &[f64],
    binning: &TemporalBinning,
) -> Result<f64> {
    let pred: Vec<f64> = predicted
        .iter()
        .map(|&b| binning.representative_year(b) as f64)
        .collect();
    evaluate_mae(&pred, true_years)
}

/// Primal SVM objective of one binary problem.
pub fn svm_objective(
    x: &FeatureMatrix,
    signs: &[f64],
    w: &[f64],
    b: f64,
    c: f64,
    normalize: bool,
) -> f64 {
    let rows = DenseRows::new(x, normalize);
    svm_primal(&rows, signs, w, b, c)
}

/// Primal SVR objective.
pub fn svr_objective(
    x: &FeatureMatrix,
    y: &[f64],
    w: &[f64],
    b: f64,
    c: f64,
    epsilon: f64,
    normalize: bool,
) -> f64 {
    let rows = DenseRows::new(x, normalize);
    svr_primal(&rows, y, w, b, c, epsilon)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn prepare_row(x: &[f32], normalize: bool) -> Vec<f64> {
    let mut v: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    if normalize {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|a| *a /= norm);
        }
    }
    v
}

/// Training rows widened to f64 once.
struct DenseRows {
    dim: usize,
    values: Vec<f64>,
    sq_norms: Vec<f64>,
}

impl DenseRows {
    fn new(x: &FeatureMatrix, normalize: bool) -> Self {
        let mut values = Vec::with_capacity(x.values().len());
        for r in x.rows() {
            values.extend(prepare_row(r, normalize));
        }
        let dim = x.dim();
        let sq_norms = (0..x.n_samples())
            .map(|i| {
                let r = &values[i * dim..(i + 1) * dim];
                dot(r, r)
            })
            .collect();
        DenseRows {
            dim,
            values,
            sq_norms,
        }
    }

    fn len(&self) -> usize {
        self.sq_norms.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

fn axpy(w: &mut [f64], a: f64, x: &[f64]) {
    for (wi, xi) in w.iter_mut().zip(x) {
        *wi += a * xi;
    }
}

fn svm_primal(rows: &DenseRows, signs: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    let hinge: f64 = (0..rows.len())
        .map(|i| (1.0 - signs[i] * (dot(w, rows.row(i)) + b)).max(0.0))
        .sum();
    0.5 * dot(w, w) + c * hinge
}

fn svr_primal(rows: &DenseRows, y: &[f64], w: &[f64], b: f64, c: f64, eps: f64) -> f64 {
    let loss: f64 = (0..rows.len())
        .map(|i| ((dot(w, rows.row(i)) + b - y[i]).abs() - eps).max(0.0))
        .sum();
    0.5 * dot(w, w) + c * loss
}

/// A bias-free dual problem solved by coordinate descent for a given bias.
trait FixedBiasDual {
    fn rows(&self) -> &DenseRows;
    fn c(&self) -> f64;
    /// One pass of exact coordinate maximisations at bias `b`.
    fn epoch(&mut self, b: f64);
    /// Sum of signed dual variables: the negated derivative of the optimal
    /// primal value with respect to the bias.
    fn dual_sum(&self) -> f64;
    fn weights(&self) -> &[f64];
    fn dual(&self, b: f64) -> f64;
    /// Loss of sample `i` at prediction `f`.
    fn loss(&self, i: usize, f: f64) -> f64;
    /// Initial bias guess and bracket step scale.
    fn bias_hint(&self) -> (f64, f64);
}

struct SvmDual<'a> {
    rows: &'a DenseRows,
    signs: Vec<f64>,
    c: f64,
    alpha: Vec<f64>,
    w: Vec<f64>,
    order: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<'a> SvmDual<'a> {
    fn new(rows: &'a DenseRows, signs: Vec<f64>, c: f64, seed: u64) -> Self {
        let n = rows.len();
        SvmDual {
            rows,
            signs,
            c,
            alpha: vec![0.0; n],
            w: vec![0.0; rows.dim],
            order: (0..n).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl FixedBiasDual for SvmDual<'_> {
    fn rows(&self) -> &DenseRows {
        self.rows
    }

    fn c(&self) -> f64 {
        self.c
    }

    fn epoch(&mut self, b: f64) {
        self.order.shuffle(&mut self.rng);
        for &i in &self.order {
            let x = self.rows.row(i);
            let s = self.signs[i];
            let g = s * (dot(&self.w, x) + b) - 1.0;
            let a = self.alpha[i];
            let q = self.rows.sq_norms[i];
            let new = if q > 0.0 {
                (a - g / q).clamp(0.0, self.c)
            } else if g < 0.0 {
                self.c
            } else {
                0.0
            };
            if new != a {
                axpy(&mut self.w, (new - a) * s, x);
                self.alpha[i] = new;
            }
        }
    }

    fn dual_sum(&self) -> f64 {
        self.alpha.iter().zip(&self.signs).map(|(a, s)| a * s).sum()
    }

    fn weights(&self) -> &[f64] {
        &self.w
    }

    fn dual(&self, b: f64) -> f64 {
        let linear: f64 = self
            .alpha
            .iter()
            .zip(&self.signs)
            .map(|(a, s)| a * (1.0 - s * b))
            .sum();
        linear - 0.5 * dot(&self.w, &self.w)
    }

    fn loss(&self, i: usize, f: f64) -> f64 {
        (1.0 - self.signs[i] * f).max(0.0)
    }

    fn bias_hint(&self) -> (f64, f64) {
        (0.0, 1.0)
    }
}

struct SvrDual<'a> {
    rows: &'a DenseRows,
    y: Vec<f64>,
    c: f64,
    eps: f64,
    beta: Vec<f64>,
    w: Vec<f64>,
    order: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<'a> SvrDual<'a> {
    fn new(rows: &'a DenseRows, y: Vec<f64>, c: f64, eps: f64, seed: u64) -> Self {
        let n = rows.len();
        SvrDual {
            rows,
            y,
            c,
            eps,
            beta: vec![0.0; n],
            w: vec![0.0; rows.dim],
            order: (0..n).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl FixedBiasDual for SvrDual<'_> {
    fn rows(&self) -> &DenseRows {
        self.rows
    }

    fn c(&self) -> f64 {
        self.c
    }

    fn epoch(&mut self, b: f64) {
        self.order.shuffle(&mut self.rng);
        for &i in &self.order {
            let x = self.rows.row(i);
            // gradient of the smooth part is the current residual
            let g = dot(&self.w, x) + b - self.y[i];
            let beta = self.beta[i];
            let q = self.rows.sq_norms[i];
            let new = if q > 0.0 {
                let z = if g + self.eps < q * beta {
                    beta - (g + self.eps) / q
                } else if g - self.eps > q * beta {
                    beta - (g - self.eps) / q
                } else {
                    0.0
                };
                z.clamp(-self.c, self.c)
            } else if g + self.eps < 0.0 {
                self.c
            } else if g - self.eps > 0.0 {
                -self.c
            } else {
                0.0
            };
            if new != beta {
                axpy(&mut self.w, new - beta, x);
                self.beta[i] = new;
            }
        }
    }

    fn dual_sum(&self) -> f64 {
        self.beta.iter().sum()
    }

    fn weights(&self) -> &[f64] {
        &self.w
    }

    fn dual(&self, b: f64) -> f64 {
        let linear: f64 = self
            .beta
            .iter()
            .zip(&self.y)
            .map(|(beta, y)| beta * (y - b) - self.eps * beta.abs())
            .sum();
        linear - 0.5 * dot(&self.w, &self.w)
    }

    fn loss(&self, i: usize, f: f64) -> f64 {
        ((f - self.y[i]).abs() - self.eps).max(0.0)
    }

    fn bias_hint(&self) -> (f64, f64) {
        let mut sorted = self.y.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let spread = sorted[sorted.len() - 1] - sorted[0];
        (median, spread.max(self.eps).max(1.0))
    }
}

/// Primal point returned by the solver.
///
/// Dual coordinate descent does not decrease the primal objective
/// monotonically, so after every epoch the incumbent moves to the best point
/// on the segment towards the current dual-induced `(w, b)` (exact convex
/// line search), and only if that does not increase the objective. The
/// recorded objective is therefore non-increasing and never worse than the
/// plain dual iterate at the end.
struct Incumbent {
    w: Vec<f64>,
    b: f64,
    /// `w . x_i` for every row.
    scores: Vec<f64>,
    objective: f64,
    trace: Vec<f64>,
}

const LINE_SEARCH_STEPS: usize = 40;

impl Incumbent {
    fn new<D: FixedBiasDual>(dual: &D, b: f64) -> Self {
        let n = dual.rows().len();
        let w = vec![0.0; dual.rows().dim];
        let scores = vec![0.0; n];
        let objective = Self::objective_of(dual, &w, &scores, b);
        Incumbent {
            w,
            b,
            scores,
            objective,
            trace: vec![objective],
        }
    }

    fn objective_of<D: FixedBiasDual>(dual: &D, w: &[f64], scores: &[f64], b: f64) -> f64 {
        let loss: f64 = scores
            .iter()
            .enumerate()
            .map(|(i, s)| dual.loss(i, s + b))
            .sum();
        0.5 * dot(w, w) + dual.c() * loss
    }

    fn absorb<D: FixedBiasDual>(&mut self, dual: &D, b: f64) {
        let rows = dual.rows();
        let target = dual.weights();
        let target_scores: Vec<f64> = (0..rows.len()).map(|i| dot(target, rows.row(i))).collect();
        let dir: Vec<f64> = target.iter().zip(&self.w).map(|(t, u)| t - u).collect();
        let (uu, ud, dd) = (dot(&self.w, &self.w), dot(&self.w, &dir), dot(&dir, &dir));
        let db = b - self.b;
        let phi = |t: f64| {
            let loss: f64 = (0..rows.len())
                .map(|i| {
                    let s = self.scores[i] + t * (target_scores[i] - self.scores[i]);
                    dual.loss(i, s + self.b + t * db)
                })
                .sum();
            0.5 * (uu + 2.0 * t * ud + t * t * dd) + dual.c() * loss
        };
        // golden section on the convex restriction to [0, 1]
        let ratio = 0.5 * (5f64.sqrt() - 1.0);
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut x1 = hi - ratio * (hi - lo);
        let mut x2 = lo + ratio * (hi - lo);
        let (mut f1, mut f2) = (phi(x1), phi(x2));
        for _ in 0..LINE_SEARCH_STEPS {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - ratio * (hi - lo);
                f1 = phi(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + ratio * (hi - lo);
                f2 = phi(x2);
            }
        }
        let interior = if f1 <= f2 { x1 } else { x2 };
        let mut best: Option<(Vec<f64>, Vec<f64>, f64, f64)> = None;
        for t in [1.0, interior] {
            let w: Vec<f64> = self.w.iter().zip(&dir).map(|(u, d)| u + t * d).collect();
            let scores: Vec<f64> = self
                .scores
                .iter()
                .zip(&target_scores)
                .map(|(s, ts)| s + t * (ts - s))
                .collect();
            let bias = self.b + t * db;
            let obj = Self::objective_of(dual, &w, &scores, bias);
            if best.as_ref().is_none_or(|(_, _, _, o)| obj < *o) {
                best = Some((w, scores, bias, obj));
            }
        }
        if let Some((w, scores, bias, obj)) = best {
            if obj <= self.objective {
                self.w = w;
                self.scores = scores;
                self.b = bias;
                self.objective = obj;
            }
        }
        self.trace.push(self.objective);
    }
}

/// Epochs at a fixed bias until the dual objective stalls.
fn run_stage<D: FixedBiasDual>(
    dual: &mut D,
    b: f64,
    cfg: &TrainConfig,
    inc: &mut Incumbent,
) -> usize {
    let mut prev = dual.dual(b);
    for epoch in 1..=cfg.max_epochs {
        dual.epoch(b);
        inc.absorb(dual, b);
        let cur = dual.dual(b);
        if (cur - prev).abs() <= cfg.tolerance * cur.abs().max(1.0) {
            return epoch;
        }
        prev = cur;
    }
    cfg.max_epochs
}

const MAX_BRACKET_DOUBLINGS: usize = 64;
const MAX_BISECTIONS: usize = 100;

/// Minimise the convex optimal-value function of the bias by bracketing the
/// sign change of the dual sum and bisecting.
fn solve_with_bias<D: FixedBiasDual>(
    dual: &mut D,
    cfg: &TrainConfig,
) -> (Vec<f64>, f64, SolveReport) {
    let (start, scale) = dual.bias_hint();
    let mut inc = Incumbent::new(dual, start);
    let mut epochs = run_stage(dual, start, cfg, &mut inc);
    let mut steps = 1;
    let h0 = dual.dual_sum();
    let mut b = start;
    if h0 != 0.0 {
        // h is non-increasing in b: positive means the bias should grow.
        let dir = h0.signum();
        let mut inner = start;
        let mut step = scale;
        let mut bracket = None;
        for _ in 0..MAX_BRACKET_DOUBLINGS {
            let outer = inner + dir * step;
            epochs += run_stage(dual, outer, cfg, &mut inc);
            steps += 1;
            let h = dual.dual_sum();
            if h == 0.0 {
                b = outer;
                break;
            }
            if h.signum() != dir {
                bracket = Some((inner, outer));
                break;
            }
            inner = outer;
            b = inner;
            step *= 2.0;
        }
        if let Some((inner, outer)) = bracket {
            // h(lo) > 0 > h(hi)
            let (mut lo, mut hi) = if dir > 0.0 {
                (inner, outer)
            } else {
                (outer, inner)
            };
            for _ in 0..MAX_BISECTIONS {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                epochs += run_stage(dual, mid, cfg, &mut inc);
                steps += 1;
                b = mid;
                let h = dual.dual_sum();
                if h == 0.0 {
                    break;
                } else if h > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-10 * lo.abs().max(hi.abs()).max(1.0) {
                    break;
                }
            }
        }
        epochs += run_stage(dual, b, cfg, &mut inc);
        steps += 1;
    }
    let rows = dual.rows();
    let exact_scores: Vec<f64> = (0..rows.len()).map(|i| dot(&inc.w, rows.row(i))).collect();
    let report = SolveReport {
        bias_steps: steps,
        epochs,
        primal_objective: Incumbent::objective_of(dual, &inc.w, &exact_scores, inc.b),
        dual_objective: dual.dual(b),
        objective_trace: inc.trace,
    };
    (inc.w, inc.b, report)
}
