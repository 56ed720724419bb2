//! Model specification, learned basis frame, parameter layout, joint design
//! and prediction.
//!
//! Every partial transformation is stored as `sign * a(y) ⊗ b(x)`: a
//! response-direction basis `a` (constant, count spline, ordinal unit vector
//! or zero indicator) times a covariate basis `b`. Blocks flagged monotone
//! use the cumulative exponential map along `a`.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{self, KnotVector, ResponseTransform};
use crate::data::{ColumnSpec, Dataset, Schema};
use crate::error::{Error, Result};
use crate::monotone::MonotoneMap;
use crate::penalty::{self, AnisotropyGrid};
use crate::refdist::{raw, ReferenceDistribution};

pub const SPLINE_DEGREE: usize = 3;

fn default_response_dim() -> usize {
    8
}
fn default_smooth_dim() -> usize {
    10
}
fn default_tensor_dim() -> TensorDimension {
    TensorDimension::Same(6)
}
fn default_category_dim() -> usize {
    6
}
fn default_grid_size() -> usize {
    penalty::DEFAULT_OMEGA_GRID
}
fn default_jitter() -> f64 {
    penalty::DEFAULT_JITTER
}
fn default_reference() -> ReferenceDistribution {
    ReferenceDistribution::StandardLogistic
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Count,
    Ordinal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseSpec {
    pub kind: ResponseKind,
    pub column: String,
    #[serde(default = "default_reference")]
    pub reference: ReferenceDistribution,
    /// Ordinal levels in increasing order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
    /// Number of ordinal categories when levels are the integers `1..=k`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    pub a: f64,
    pub b: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            a: penalty::DEFAULT_IG_A,
            b: penalty::DEFAULT_IG_B,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TensorDimension {
    Same(usize),
    Each([usize; 2]),
}

impl TensorDimension {
    pub fn pair(self) -> [usize; 2] {
        match self {
            TensorDimension::Same(d) => [d, d],
            TensorDimension::Each(p) => p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TermSpec {
    /// Monotone B-spline in the transformed count response.
    BaselineCount {
        #[serde(default = "default_response_dim")]
        dimension: usize,
        #[serde(default)]
        transform: ResponseTransform,
        #[serde(default)]
        hyperparameters: Hyperparameters,
    },
    /// Monotone ordinal thresholds.
    BaselineOrdinal,
    /// Linear shift `-z^T beta` on standardized columns.
    Linear { columns: Vec<String> },
    /// Centered P-spline shift.
    Smooth {
        columns: Vec<String>,
        #[serde(default = "default_smooth_dim")]
        dimension: usize,
        #[serde(default)]
        hyperparameters: Hyperparameters,
    },
    /// i.i.d. Gaussian group effects.
    Random {
        columns: Vec<String>,
        #[serde(default)]
        hyperparameters: Hyperparameters,
    },
    /// Centered anisotropic tensor P-spline of two covariates.
    TensorSmooth {
        columns: Vec<String>,
        #[serde(default = "default_tensor_dim")]
        dimension: TensorDimension,
        #[serde(default)]
        hyperparameters: Hyperparameters,
        #[serde(default = "default_grid_size")]
        grid_size: usize,
    },
    /// Ordinal category-specific smooth `e_c(y) ⊗ b(x)`, monotone in `y`.
    CategorySpecificSmooth {
        columns: Vec<String>,
        #[serde(default = "default_category_dim")]
        dimension: usize,
        #[serde(default)]
        hyperparameters: Hyperparameters,
        #[serde(default = "default_jitter")]
        jitter: f64,
    },
    /// Excess-zero component `1(y=0) (beta_0 - z^T beta_h)`.
    HurdleZero {
        #[serde(default)]
        columns: Vec<String>,
    },
}

impl TermSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            TermSpec::BaselineCount { .. } => "baseline_count",
            TermSpec::BaselineOrdinal => "baseline_ordinal",
            TermSpec::Linear { .. } => "linear",
            TermSpec::Smooth { .. } => "smooth",
            TermSpec::Random { .. } => "random",
            TermSpec::TensorSmooth { .. } => "tensor_smooth",
            TermSpec::CategorySpecificSmooth { .. } => "category_specific_smooth",
            TermSpec::HurdleZero { .. } => "hurdle_zero",
        }
    }

    pub fn columns(&self) -> &[String] {
        match self {
            TermSpec::BaselineCount { .. } | TermSpec::BaselineOrdinal => &[],
            TermSpec::Linear { columns }
            | TermSpec::Smooth { columns, .. }
            | TermSpec::Random { columns, .. }
            | TermSpec::TensorSmooth { columns, .. }
            | TermSpec::CategorySpecificSmooth { columns, .. }
            | TermSpec::HurdleZero { columns } => columns,
        }
    }

    fn is_baseline(&self) -> bool {
        matches!(self, TermSpec::BaselineCount { .. } | TermSpec::BaselineOrdinal)
    }

    /// Display label used to prefix coefficient names.
    pub fn label(&self) -> String {
        let cols = self.columns().join(",");
        match self {
            TermSpec::BaselineCount { .. } | TermSpec::BaselineOrdinal => "baseline".into(),
            TermSpec::Linear { .. } => "linear".into(),
            TermSpec::Smooth { .. } => format!("smooth({cols})"),
            TermSpec::Random { .. } => format!("random({cols})"),
            TermSpec::TensorSmooth { .. } => format!("tensor({cols})"),
            TermSpec::CategorySpecificSmooth { .. } => format!("category_smooth({cols})"),
            TermSpec::HurdleZero { .. } => "hurdle".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub response: ResponseSpec,
    pub terms: Vec<TermSpec>,
}

impl ModelSpec {
    /// Number of ordinal categories `c + 1`.
    pub fn ordinal_categories(&self) -> Option<usize> {
        match self.response.kind {
            ResponseKind::Count => None,
            ResponseKind::Ordinal => self
                .response
                .levels
                .as_ref()
                .map(Vec::len)
                .or(self.response.categories),
        }
    }

    pub fn ordinal_levels(&self) -> Option<Vec<String>> {
        self.response.levels.clone().or_else(|| {
            self.ordinal_categories()
                .map(|k| (1..=k).map(|r| r.to_string()).collect())
        })
    }

    pub fn validate(&self) -> Result<()> {
        let count = self.response.kind == ResponseKind::Count;
        if self.response.column.is_empty() {
            return Err(Error::config("response.column", "must name a column"));
        }
        if !count {
            if let (Some(levels), Some(k)) = (&self.response.levels, self.response.categories) {
                if levels.len() != k {
                    return Err(Error::config("response.categories", "disagrees with the number of levels"));
                }
            }
            match self.ordinal_categories() {
                None => {
                    return Err(Error::config(
                        "response",
                        "ordinal responses need `levels` or `categories`",
                    ))
                }
                Some(k) if k < 2 => return Err(Error::config("response.categories", "need at least 2 categories")),
                _ => {}
            }
            if let Some(levels) = &self.response.levels {
                let unique: BTreeSet<_> = levels.iter().collect();
                if unique.len() != levels.len() {
                    return Err(Error::config("response.levels", "levels must be distinct"));
                }
            }
        }
        let baselines = self.terms.iter().filter(|t| t.is_baseline()).count();
        if baselines != 1 {
            return Err(Error::config(
                "terms",
                format!("exactly one baseline term is required, found {baselines}"),
            ));
        }
        let hurdles = self
            .terms
            .iter()
            .filter(|t| matches!(t, TermSpec::HurdleZero { .. }))
            .count();
        if hurdles > 1 {
            return Err(Error::config("terms", "at most one hurdle_zero term is allowed"));
        }
        for (j, term) in self.terms.iter().enumerate() {
            let at = |field: &str| format!("terms[{j}].{field}");
            let ncols = term.columns().len();
            let hyper_ok = |h: &Hyperparameters| h.a > 0.0 && h.b > 0.0 && h.a.is_finite() && h.b.is_finite();
            match term {
                TermSpec::BaselineCount {
                    dimension,
                    hyperparameters,
                    ..
                } => {
                    if !count {
                        return Err(Error::config(at("kind"), "baseline_count needs a count response"));
                    }
                    if *dimension < SPLINE_DEGREE + 1 {
                        return Err(Error::config(at("dimension"), "must be at least 4"));
                    }
                    if !hyper_ok(hyperparameters) {
                        return Err(Error::config(at("hyperparameters"), "a and b must be positive"));
                    }
                }
                TermSpec::BaselineOrdinal => {
                    if count {
                        return Err(Error::config(at("kind"), "baseline_ordinal needs an ordinal response"));
                    }
                }
                TermSpec::Linear { .. } => {
                    if ncols == 0 {
                        return Err(Error::config(at("columns"), "needs at least one column"));
                    }
                }
                TermSpec::Smooth {
                    dimension,
                    hyperparameters,
                    ..
                }
                | TermSpec::CategorySpecificSmooth {
                    dimension,
                    hyperparameters,
                    ..
                } => {
                    if ncols != 1 {
                        return Err(Error::config(at("columns"), "needs exactly one column"));
                    }
                    if *dimension < SPLINE_DEGREE + 1 {
                        return Err(Error::config(at("dimension"), "must be at least 4"));
                    }
                    if !hyper_ok(hyperparameters) {
                        return Err(Error::config(at("hyperparameters"), "a and b must be positive"));
                    }
                    if let TermSpec::CategorySpecificSmooth { jitter, .. } = term {
                        if count {
                            return Err(Error::config(
                                at("kind"),
                                "category_specific_smooth needs an ordinal response",
                            ));
                        }
                        if !(*jitter >= 0.0 && jitter.is_finite()) {
                            return Err(Error::config(at("jitter"), "must be nonnegative"));
                        }
                    }
                }
                TermSpec::Random { hyperparameters, .. } => {
                    if ncols != 1 {
                        return Err(Error::config(at("columns"), "needs exactly one column"));
                    }
                    if !hyper_ok(hyperparameters) {
                        return Err(Error::config(at("hyperparameters"), "a and b must be positive"));
                    }
                }
                TermSpec::TensorSmooth {
                    dimension,
                    hyperparameters,
                    grid_size,
                    ..
                } => {
                    if ncols != 2 {
                        return Err(Error::config(at("columns"), "needs exactly two columns"));
                    }
                    if dimension.pair().iter().any(|&d| d < SPLINE_DEGREE + 1) {
                        return Err(Error::config(at("dimension"), "must be at least 4 per direction"));
                    }
                    if *grid_size == 0 {
                        return Err(Error::config(at("grid_size"), "must be positive"));
                    }
                    if !hyper_ok(hyperparameters) {
                        return Err(Error::config(at("hyperparameters"), "a and b must be positive"));
                    }
                }
                TermSpec::HurdleZero { .. } => {
                    if !count {
                        return Err(Error::config(at("kind"), "hurdle_zero needs a count response"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Columns and kinds the model reads from a dataset.
    pub fn schema(&self) -> Result<Schema> {
        self.validate()?;
        let mut schema = Schema::default();
        let response = match self.response.kind {
            ResponseKind::Count => ColumnSpec::Count,
            ResponseKind::Ordinal => ColumnSpec::Ordinal {
                levels: self.ordinal_levels().unwrap_or_default(),
            },
        };
        schema.push(self.response.column.clone(), response)?;
        for term in &self.terms {
            let kind = match term {
                TermSpec::Random { .. } => ColumnSpec::Group,
                _ => ColumnSpec::Continuous,
            };
            for c in term.columns() {
                schema.push(c.clone(), kind.clone())?;
            }
        }
        Ok(schema)
    }
}

/// Response-direction basis of a term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "basis", rename_all = "snake_case")]
pub enum ResponseBasis {
    Constant,
    CountSpline {
        knots: KnotVector,
        transform: ResponseTransform,
    },
    Ordinal {
        thresholds: usize,
    },
    ZeroIndicator,
}

impl ResponseBasis {
    pub fn dim(&self) -> usize {
        match self {
            ResponseBasis::Constant | ResponseBasis::ZeroIndicator => 1,
            ResponseBasis::CountSpline { knots, .. } => knots.dim(),
            ResponseBasis::Ordinal { thresholds } => *thresholds,
        }
    }

    /// Evaluates at an in-support response value. Count splines extend
    /// linearly beyond the training domain; returns whether that happened.
    fn eval_into(&self, y: i64, out: &mut [f64]) -> bool {
        match self {
            ResponseBasis::Constant => {
                out[0] = 1.0;
                false
            }
            ResponseBasis::ZeroIndicator => {
                out[0] = if y == 0 { 1.0 } else { 0.0 };
                false
            }
            ResponseBasis::CountSpline { knots, transform } => {
                let v = transform.apply(y as f64);
                let row = knots.eval_linear_extrapolated(v);
                out.copy_from_slice(&row);
                !knots.contains(v)
            }
            ResponseBasis::Ordinal { .. } => {
                out.iter_mut().for_each(|x| *x = 0.0);
                out[(y - 1) as usize] = 1.0;
                false
            }
        }
    }
}

/// Covariate-direction basis of a term, with everything learned from
/// training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "basis", rename_all = "snake_case")]
pub enum CovariateBasis {
    Constant,
    Linear {
        columns: Vec<String>,
        means: Vec<f64>,
        scales: Vec<f64>,
    },
    Spline {
        column: String,
        knots: KnotVector,
        offsets: Vec<f64>,
    },
    Tensor {
        columns: [String; 2],
        knots: [KnotVector; 2],
        offsets: Vec<f64>,
    },
    Group {
        column: String,
        levels: Vec<String>,
    },
    /// `(1, -z_1, ..., -z_p)` on standardized columns.
    HurdleShift {
        columns: Vec<String>,
        means: Vec<f64>,
        scales: Vec<f64>,
    },
}

impl CovariateBasis {
    pub fn dim(&self) -> usize {
        match self {
            CovariateBasis::Constant => 1,
            CovariateBasis::Linear { columns, .. } => columns.len(),
            CovariateBasis::Spline { knots, .. } => knots.dim(),
            CovariateBasis::Tensor { knots, .. } => knots[0].dim() * knots[1].dim(),
            CovariateBasis::Group { levels, .. } => levels.len(),
            CovariateBasis::HurdleShift { columns, .. } => columns.len() + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownLevels {
    #[default]
    Error,
    /// Unseen group levels get a zero effect and are recorded.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTerm {
    pub label: String,
    pub response: ResponseBasis,
    pub covariate: CovariateBasis,
    pub sign: f64,
    pub monotone: bool,
}

impl FittedTerm {
    pub fn dim(&self) -> usize {
        self.response.dim() * self.covariate.dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResponseFrame {
    /// Smallest supported count; 1 under the log transform, 0 otherwise.
    Count { min_support: i64 },
    Ordinal { levels: Vec<String> },
}

/// Everything learned from the training data: knots, centering offsets,
/// standardization constants and group levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFrame {
    pub response: ResponseFrame,
    pub terms: Vec<FittedTerm>,
}

fn mean_and_scale(values: &[f64], column: &str) -> Result<(f64, f64)> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::data(0, column, "constant covariate cannot be standardized"));
    }
    Ok((mean, var.sqrt()))
}

impl ModelFrame {
    pub fn learn(spec: &ModelSpec, data: &Dataset) -> Result<ModelFrame> {
        spec.validate()?;
        if data.n() == 0 {
            return Err(Error::data(0, spec.response.column.as_str(), "no observations"));
        }
        let response = match spec.response.kind {
            ResponseKind::Count => {
                let transform = spec
                    .terms
                    .iter()
                    .find_map(|t| match t {
                        TermSpec::BaselineCount { transform, .. } => Some(*transform),
                        _ => None,
                    })
                    .unwrap_or_default();
                let min_support = if transform == ResponseTransform::Log { 1 } else { 0 };
                ResponseFrame::Count { min_support }
            }
            ResponseKind::Ordinal => ResponseFrame::Ordinal {
                levels: spec.ordinal_levels().unwrap_or_default(),
            },
        };
        let mut terms = Vec::with_capacity(spec.terms.len());
        for term in &spec.terms {
            let label = term.label();
            let fitted = match term {
                TermSpec::BaselineCount {
                    dimension, transform, ..
                } => {
                    let counts = data.counts(&spec.response.column)?;
                    let mut values = Vec::with_capacity(counts.len());
                    for (i, &y) in counts.iter().enumerate() {
                        let v = transform.apply(y as f64);
                        if !v.is_finite() {
                            return Err(Error::data(
                                i + 1,
                                spec.response.column.as_str(),
                                "count outside the support of the response transform",
                            ));
                        }
                        values.push(v);
                    }
                    let knots = basis::make_knots(&values, *dimension, SPLINE_DEGREE)?;
                    FittedTerm {
                        label,
                        response: ResponseBasis::CountSpline {
                            knots,
                            transform: *transform,
                        },
                        covariate: CovariateBasis::Constant,
                        sign: 1.0,
                        monotone: true,
                    }
                }
                TermSpec::BaselineOrdinal => FittedTerm {
                    label,
                    response: ResponseBasis::Ordinal {
                        thresholds: spec.ordinal_categories().unwrap_or(2) - 1,
                    },
                    covariate: CovariateBasis::Constant,
                    sign: 1.0,
                    monotone: true,
                },
                TermSpec::Linear { columns } | TermSpec::HurdleZero { columns } => {
                    let mut means = Vec::new();
                    let mut scales = Vec::new();
                    for c in columns {
                        let (m, s) = mean_and_scale(data.continuous(c)?, c)?;
                        means.push(m);
                        scales.push(s);
                    }
                    let columns = columns.clone();
                    if matches!(term, TermSpec::Linear { .. }) {
                        FittedTerm {
                            label,
                            response: ResponseBasis::Constant,
                            covariate: CovariateBasis::Linear { columns, means, scales },
                            sign: -1.0,
                            monotone: false,
                        }
                    } else {
                        FittedTerm {
                            label,
                            response: ResponseBasis::ZeroIndicator,
                            covariate: CovariateBasis::HurdleShift { columns, means, scales },
                            sign: 1.0,
                            monotone: false,
                        }
                    }
                }
                TermSpec::Smooth { columns, dimension, .. } => {
                    let x = data.continuous(&columns[0])?;
                    let knots = basis::make_knots(x, *dimension, SPLINE_DEGREE)?;
                    let rows: Vec<Vec<f64>> = x.iter().map(|&v| knots.eval(v)).collect();
                    let centered = basis::center(&basis::EvaluatedBasis::from_rows(&rows, knots.dim()));
                    FittedTerm {
                        label,
                        response: ResponseBasis::Constant,
                        covariate: CovariateBasis::Spline {
                            column: columns[0].clone(),
                            knots,
                            offsets: centered.offsets,
                        },
                        sign: -1.0,
                        monotone: false,
                    }
                }
                TermSpec::CategorySpecificSmooth { columns, dimension, .. } => {
                    let x = data.continuous(&columns[0])?;
                    let knots = basis::make_knots(x, *dimension, SPLINE_DEGREE)?;
                    let offsets = vec![0.0; knots.dim()];
                    FittedTerm {
                        label,
                        response: ResponseBasis::Ordinal {
                            thresholds: spec.ordinal_categories().unwrap_or(2) - 1,
                        },
                        covariate: CovariateBasis::Spline {
                            column: columns[0].clone(),
                            knots,
                            offsets,
                        },
                        sign: 1.0,
                        monotone: true,
                    }
                }
                TermSpec::Random { columns, .. } => {
                    let g = data.groups(&columns[0])?;
                    let levels: BTreeSet<&String> = g.iter().collect();
                    FittedTerm {
                        label,
                        response: ResponseBasis::Constant,
                        covariate: CovariateBasis::Group {
                            column: columns[0].clone(),
                            levels: levels.into_iter().cloned().collect(),
                        },
                        sign: -1.0,
                        monotone: false,
                    }
                }
                TermSpec::TensorSmooth { columns, dimension, .. } => {
                    let [d1, d2] = dimension.pair();
                    let x1 = data.continuous(&columns[0])?;
                    let x2 = data.continuous(&columns[1])?;
                    let k1 = basis::make_knots(x1, d1, SPLINE_DEGREE)?;
                    let k2 = basis::make_knots(x2, d2, SPLINE_DEGREE)?;
                    let rows: Vec<Vec<f64>> = x1
                        .iter()
                        .zip(x2)
                        .map(|(&a, &b)| basis::tensor_row(&k1.eval(a), &k2.eval(b)))
                        .collect();
                    let centered = basis::center(&basis::EvaluatedBasis::from_rows(&rows, d1 * d2));
                    FittedTerm {
                        label,
                        response: ResponseBasis::Constant,
                        covariate: CovariateBasis::Tensor {
                            columns: [columns[0].clone(), columns[1].clone()],
                            knots: [k1, k2],
                            offsets: centered.offsets,
                        },
                        sign: -1.0,
                        monotone: false,
                    }
                }
            };
            terms.push(fitted);
        }
        Ok(ModelFrame { response, terms })
    }
}

/// Prior on one coefficient block.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockPrior {
    Flat,
    /// `beta^T K beta / tau^2` with one smoothing variance.
    Scaled {
        penalty: DMatrix<f64>,
        rank: usize,
        a: f64,
        b: f64,
        variance: usize,
    },
    /// `beta^T [omega (K1 ⊗ I) + (1 - omega) (I ⊗ K2)] beta / tau^2`.
    Anisotropic {
        first: DMatrix<f64>,
        second: DMatrix<f64>,
        grid: AnisotropyGrid,
        a: f64,
        b: f64,
        variance: usize,
        anisotropy: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock {
    pub label: String,
    pub offset: usize,
    pub size: usize,
    pub monotone: Option<MonotoneMap>,
    pub prior: BlockPrior,
    /// Precision added outside the variance scaling (pins and jitter).
    pub fixed_precision: Option<DMatrix<f64>>,
    pub coefficient_names: Vec<String>,
}

impl ParameterBlock {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterLayout {
    pub blocks: Vec<ParameterBlock>,
    pub dim: usize,
    pub variance_labels: Vec<String>,
    pub anisotropy_labels: Vec<String>,
}

/// Rank-one precision `u u^T`, `u = 1/sqrt(D)`, on the constant direction.
fn constant_pin(size: usize) -> DMatrix<f64> {
    DMatrix::from_element(size, size, 1.0 / size as f64)
}

impl ParameterLayout {
    pub fn new(spec: &ModelSpec, frame: &ModelFrame) -> Result<ParameterLayout> {
        let mut blocks = Vec::with_capacity(frame.terms.len());
        let mut variance_labels = Vec::new();
        let mut anisotropy_labels = Vec::new();
        let mut offset = 0;
        for (term, fitted) in spec.terms.iter().zip(&frame.terms) {
            let size = fitted.dim();
            let d1 = fitted.response.dim();
            let d2 = fitted.covariate.dim();
            let label = fitted.label.clone();
            let mut scaled = |penalty: DMatrix<f64>, rank: usize, h: &Hyperparameters| {
                variance_labels.push(label.clone());
                BlockPrior::Scaled {
                    penalty,
                    rank,
                    a: h.a,
                    b: h.b,
                    variance: variance_labels.len() - 1,
                }
            };
            let (prior, fixed) = match term {
                TermSpec::BaselineCount { hyperparameters, .. } => {
                    (scaled(penalty::monotone_first_diff(size)?, size - 2, hyperparameters), None)
                }
                TermSpec::BaselineOrdinal | TermSpec::Linear { .. } | TermSpec::HurdleZero { .. } => {
                    (BlockPrior::Flat, None)
                }
                TermSpec::Smooth { hyperparameters, .. } => (
                    scaled(penalty::rw2_penalty(size)?, size - 2, hyperparameters),
                    Some(constant_pin(size)),
                ),
                TermSpec::Random { hyperparameters, .. } => {
                    (scaled(penalty::identity_penalty(size), size, hyperparameters), None)
                }
                TermSpec::CategorySpecificSmooth {
                    hyperparameters, jitter, ..
                } => {
                    let k = penalty::identity_penalty(d1).kronecker(&penalty::rw2_penalty(d2)?);
                    let fixed = (*jitter > 0.0).then(|| DMatrix::identity(size, size) * *jitter);
                    (scaled(k, d1 * (d2 - 2), hyperparameters), fixed)
                }
                TermSpec::TensorSmooth {
                    dimension,
                    hyperparameters,
                    grid_size,
                    ..
                } => {
                    let [da, db] = dimension.pair();
                    let k1 = penalty::rw2_penalty(da)?;
                    let k2 = penalty::rw2_penalty(db)?;
                    let grid = penalty::build_anisotropy_grid(&k1, &k2, *grid_size)?;
                    let first = k1.kronecker(&DMatrix::identity(db, db));
                    let second = DMatrix::identity(da, da).kronecker(&k2);
                    variance_labels.push(label.clone());
                    anisotropy_labels.push(label.clone());
                    (
                        BlockPrior::Anisotropic {
                            first,
                            second,
                            grid,
                            a: hyperparameters.a,
                            b: hyperparameters.b,
                            variance: variance_labels.len() - 1,
                            anisotropy: anisotropy_labels.len() - 1,
                        },
                        Some(constant_pin(size)),
                    )
                }
            };
            blocks.push(ParameterBlock {
                coefficient_names: coefficient_names(fitted),
                label,
                offset,
                size,
                monotone: fitted.monotone.then(|| MonotoneMap::new(d1, d2)),
                prior,
                fixed_precision: fixed,
            });
            offset += size;
        }
        Ok(ParameterLayout {
            blocks,
            dim: offset,
            variance_labels,
            anisotropy_labels,
        })
    }

    pub fn coefficient_names(&self) -> Vec<String> {
        self.blocks.iter().flat_map(|b| b.coefficient_names.iter().cloned()).collect()
    }

    pub fn n_variances(&self) -> usize {
        self.variance_labels.len()
    }

    pub fn n_anisotropy(&self) -> usize {
        self.anisotropy_labels.len()
    }

    pub fn gamma_into(&self, beta: &[f64], gamma: &mut [f64]) {
        for b in &self.blocks {
            let r = b.range();
            match &b.monotone {
                Some(m) => m.gamma_into(&beta[r.clone()], &mut gamma[r]),
                None => gamma[r.clone()].copy_from_slice(&beta[r]),
            }
        }
    }

    pub fn gamma_from_beta(&self, beta: &[f64]) -> Vec<f64> {
        let mut gamma = vec![0.0; self.dim];
        self.gamma_into(beta, &mut gamma);
        gamma
    }

    /// `grad_beta = C Sigma^T grad_gamma`, blockwise.
    pub fn pullback_into(&self, beta: &[f64], grad_gamma: &[f64], grad_beta: &mut [f64]) {
        for b in &self.blocks {
            let r = b.range();
            match &b.monotone {
                Some(m) => m.pullback_into(&beta[r.clone()], &grad_gamma[r.clone()], &mut grad_beta[r]),
                None => grad_beta[r.clone()].copy_from_slice(&grad_gamma[r]),
            }
        }
    }

    pub fn overflows(&self, beta: &[f64]) -> bool {
        self.blocks
            .iter()
            .any(|b| b.monotone.is_some_and(|m| m.overflows(&beta[b.range()])))
    }

    pub fn unpack(&self, beta: &[f64]) -> Result<Vec<Vec<f64>>> {
        if beta.len() != self.dim {
            return Err(Error::Dimension(format!(
                "coefficient vector has length {}, layout expects {}",
                beta.len(),
                self.dim
            )));
        }
        Ok(self.blocks.iter().map(|b| beta[b.range()].to_vec()).collect())
    }

    pub fn pack(&self, blocks: &[Vec<f64>]) -> Result<Vec<f64>> {
        if blocks.len() != self.blocks.len() {
            return Err(Error::Dimension(format!(
                "{} blocks given, layout has {}",
                blocks.len(),
                self.blocks.len()
            )));
        }
        let mut beta = Vec::with_capacity(self.dim);
        for (b, v) in self.blocks.iter().zip(blocks) {
            if v.len() != b.size {
                return Err(Error::Dimension(format!(
                    "block {} has length {}, expected {}",
                    b.label,
                    v.len(),
                    b.size
                )));
            }
            beta.extend_from_slice(v);
        }
        Ok(beta)
    }

    /// Starting state: zero coefficients, unit variances, middle grid points.
    pub fn initial_state(&self) -> ModelState {
        let mut anisotropy = vec![0; self.n_anisotropy()];
        for b in &self.blocks {
            if let BlockPrior::Anisotropic { grid, anisotropy: k, .. } = &b.prior {
                anisotropy[*k] = grid.midpoint();
            }
        }
        ModelState {
            beta: vec![0.0; self.dim],
            variances: vec![1.0; self.n_variances()],
            anisotropy,
        }
    }

    /// Anisotropy values (not grid indices) for a state.
    pub fn omega_values(&self, state: &ModelState) -> Vec<f64> {
        let mut out = vec![0.0; self.n_anisotropy()];
        for b in &self.blocks {
            if let BlockPrior::Anisotropic { grid, anisotropy, .. } = &b.prior {
                out[*anisotropy] = grid.omega[state.anisotropy[*anisotropy]];
            }
        }
        out
    }

    /// Coefficients on the scale of the original covariates: linear slopes
    /// are divided by the column standard deviation and the hurdle intercept
    /// absorbs the centering.
    pub fn to_reporting_scale(&self, frame: &ModelFrame, beta: &[f64]) -> Vec<f64> {
        let mut out = beta.to_vec();
        for (b, term) in self.blocks.iter().zip(&frame.terms) {
            match &term.covariate {
                CovariateBasis::Linear { means: _, scales, .. } => {
                    for (k, s) in scales.iter().enumerate() {
                        out[b.offset + k] = beta[b.offset + k] / s;
                    }
                }
                CovariateBasis::HurdleShift { means, scales, .. } => {
                    let mut intercept = beta[b.offset];
                    for (k, (m, s)) in means.iter().zip(scales).enumerate() {
                        let slope = beta[b.offset + 1 + k];
                        intercept += slope * m / s;
                        out[b.offset + 1 + k] = slope / s;
                    }
                    out[b.offset] = intercept;
                }
                _ => {}
            }
        }
        out
    }
}

fn coefficient_names(term: &FittedTerm) -> Vec<String> {
    let l = &term.label;
    match (&term.response, &term.covariate) {
        (_, CovariateBasis::Linear { columns, .. }) => columns.iter().map(|c| format!("{l}:{c}")).collect(),
        (_, CovariateBasis::HurdleShift { columns, .. }) => std::iter::once(format!("{l}:(intercept)"))
            .chain(columns.iter().map(|c| format!("{l}:{c}")))
            .collect(),
        (_, CovariateBasis::Group { levels, .. }) => levels.iter().map(|g| format!("{l}[{g}]")).collect(),
        (ResponseBasis::Ordinal { thresholds }, CovariateBasis::Spline { knots, .. }) => (1..=*thresholds)
            .flat_map(|r| (1..=knots.dim()).map(move |d| format!("{l}[{r},{d}]")))
            .collect(),
        (_, CovariateBasis::Tensor { knots, .. }) => (1..=knots[0].dim())
            .flat_map(|i| (1..=knots[1].dim()).map(move |j| format!("{l}[{i},{j}]")))
            .collect(),
        _ => (1..=term.dim()).map(|d| format!("{l}[{d}]")).collect(),
    }
}

/// Coefficients plus the smoothing variances and anisotropy grid indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub beta: Vec<f64>,
    pub variances: Vec<f64>,
    pub anisotropy: Vec<usize>,
}

/// A nonzero diagonal block of the prior precision.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPrecision {
    pub offset: usize,
    pub matrix: DMatrix<f64>,
}

/// Block-diagonal prior precision for a fixed `(tau^2, omega)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PriorPrecision {
    pub blocks: Vec<BlockPrecision>,
}

impl PriorPrecision {
    /// Adds `-K beta` to `grad` and returns `-beta^T K beta / 2`.
    pub fn log_kernel_and_grad(&self, beta: &[f64], grad: &mut [f64]) -> f64 {
        let mut value = 0.0;
        for blk in &self.blocks {
            let size = blk.matrix.nrows();
            let x = &beta[blk.offset..blk.offset + size];
            for j in 0..size {
                let col = blk.matrix.column(j);
                let kx: f64 = col.iter().zip(x).map(|(k, v)| k * v).sum();
                grad[blk.offset + j] -= kx;
                value -= 0.5 * kx * x[j];
            }
        }
        value
    }

    pub fn log_kernel(&self, beta: &[f64]) -> f64 {
        let mut scratch = vec![0.0; beta.len()];
        self.log_kernel_and_grad(beta, &mut scratch)
    }

    pub fn dense(&self, dim: usize) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(dim, dim);
        for blk in &self.blocks {
            let s = blk.matrix.nrows();
            k.view_mut((blk.offset, blk.offset), (s, s)).copy_from(&blk.matrix);
        }
        k
    }
}

pub fn assemble_block_precisions(layout: &ParameterLayout, state: &ModelState) -> Result<PriorPrecision> {
    if let Some(bad) = state.variances.iter().find(|&&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::Domain(format!("smoothing variance must be positive, got {bad}")));
    }
    let mut blocks = Vec::new();
    for b in &layout.blocks {
        let scaled = match &b.prior {
            BlockPrior::Flat => None,
            BlockPrior::Scaled { penalty, variance, .. } => Some(penalty / state.variances[*variance]),
            BlockPrior::Anisotropic {
                first,
                second,
                grid,
                variance,
                anisotropy,
                ..
            } => {
                let w = grid.omega[state.anisotropy[*anisotropy]];
                Some((first * w + second * (1.0 - w)) / state.variances[*variance])
            }
        };
        let matrix = match (scaled, &b.fixed_precision) {
            (Some(s), Some(f)) => s + f,
            (Some(s), None) => s,
            (None, Some(f)) => f.clone(),
            (None, None) => continue,
        };
        blocks.push(BlockPrecision {
            offset: b.offset,
            matrix,
        });
    }
    Ok(PriorPrecision { blocks })
}

/// Dense block-diagonal `K(tau^2, omega)`.
pub fn assemble_precision(layout: &ParameterLayout, state: &ModelState) -> Result<DMatrix<f64>> {
    Ok(assemble_block_precisions(layout, state)?.dense(layout.dim))
}

/// A specification together with its learned frame and parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub frame: ModelFrame,
    pub layout: ParameterLayout,
}

/// Serializable form of a [`Model`]; the layout is rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub spec: ModelSpec,
    pub frame: ModelFrame,
}

/// Which side of the CDF a response value falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Below the support: CDF is 0.
    Lower,
    /// At or above the reference category: CDF is 1.
    Upper,
    Value,
}

/// Covariate-direction basis rows for a dataset, reusable across `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateRows {
    n: usize,
    stride: usize,
    offsets: Vec<usize>,
    values: Vec<f64>,
    pub warnings: Vec<String>,
    pub unknown_levels: Vec<(usize, String, String)>,
}

impl CovariateRows {
    pub fn n(&self) -> usize {
        self.n
    }

    fn term(&self, i: usize, t: usize, len: usize) -> &[f64] {
        let s = i * self.stride + self.offsets[t];
        &self.values[s..s + len]
    }
}

impl Model {
    pub fn new(spec: ModelSpec, frame: ModelFrame) -> Result<Model> {
        spec.validate()?;
        if frame.terms.len() != spec.terms.len() {
            return Err(Error::StaleArtifact("frame does not match the specification".into()));
        }
        let layout = ParameterLayout::new(&spec, &frame)?;
        Ok(Model { spec, frame, layout })
    }

    pub fn from_training(spec: &ModelSpec, data: &Dataset) -> Result<Model> {
        let frame = ModelFrame::learn(spec, data)?;
        Model::new(spec.clone(), frame)
    }

    pub fn from_artifact(artifact: ModelArtifact) -> Result<Model> {
        Model::new(artifact.spec, artifact.frame)
    }

    pub fn artifact(&self) -> ModelArtifact {
        ModelArtifact {
            spec: self.spec.clone(),
            frame: self.frame.clone(),
        }
    }

    pub fn reference(&self) -> ReferenceDistribution {
        self.spec.response.reference
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn is_count(&self) -> bool {
        matches!(self.frame.response, ResponseFrame::Count { .. })
    }

    /// Number of ordinal categories `c + 1`.
    pub fn categories(&self) -> Option<usize> {
        match &self.frame.response {
            ResponseFrame::Ordinal { levels } => Some(levels.len()),
            ResponseFrame::Count { .. } => None,
        }
    }

    pub fn side(&self, y: i64) -> Side {
        match &self.frame.response {
            ResponseFrame::Count { min_support } => {
                if y < *min_support {
                    Side::Lower
                } else {
                    Side::Value
                }
            }
            ResponseFrame::Ordinal { levels } => {
                if y < 1 {
                    Side::Lower
                } else if y >= levels.len() as i64 {
                    Side::Upper
                } else {
                    Side::Value
                }
            }
        }
    }

    /// Response values as integers: counts, or 1-based ordinal categories.
    pub fn response_values(&self, data: &Dataset) -> Result<Vec<i64>> {
        let col = &self.spec.response.column;
        match &self.frame.response {
            ResponseFrame::Count { min_support } => data
                .counts(col)?
                .iter()
                .enumerate()
                .map(|(i, &y)| {
                    let y = i64::try_from(y).map_err(|_| Error::data(i + 1, col.as_str(), "count too large"))?;
                    if y < *min_support {
                        return Err(Error::data(i + 1, col.as_str(), "count outside the response support"));
                    }
                    Ok(y)
                })
                .collect(),
            ResponseFrame::Ordinal { levels } => data
                .ordinal(col)?
                .iter()
                .enumerate()
                .map(|(i, &r)| {
                    if r == 0 || r > levels.len() {
                        Err(Error::data(i + 1, col.as_str(), format!("unknown category {r}")))
                    } else {
                        Ok(r as i64)
                    }
                })
                .collect(),
        }
    }

    pub fn covariate_rows(&self, data: &Dataset, policy: UnknownLevels) -> Result<CovariateRows> {
        let n = data.n();
        let mut offsets = Vec::with_capacity(self.frame.terms.len());
        let mut stride = 0;
        for t in &self.frame.terms {
            offsets.push(stride);
            stride += t.covariate.dim();
        }
        let mut values = vec![0.0; n * stride];
        let mut warnings = Vec::new();
        let mut unknown_levels = Vec::new();
        for (t, term) in self.frame.terms.iter().enumerate() {
            let d = term.covariate.dim();
            let at = |i: usize| i * stride + offsets[t];
            match &term.covariate {
                CovariateBasis::Constant => {
                    for i in 0..n {
                        values[at(i)] = 1.0;
                    }
                }
                CovariateBasis::Linear { columns, means, scales }
                | CovariateBasis::HurdleShift { columns, means, scales } => {
                    let hurdle = matches!(term.covariate, CovariateBasis::HurdleShift { .. });
                    let shift = usize::from(hurdle);
                    let sign = if hurdle { -1.0 } else { 1.0 };
                    for (k, c) in columns.iter().enumerate() {
                        let x = data.continuous(c)?;
                        for i in 0..n {
                            values[at(i) + shift + k] = sign * (x[i] - means[k]) / scales[k];
                        }
                    }
                    if hurdle {
                        for i in 0..n {
                            values[at(i)] = 1.0;
                        }
                    }
                }
                CovariateBasis::Spline { column, knots, offsets: centre } => {
                    let x = data.continuous(column)?;
                    let mut outside = 0;
                    for i in 0..n {
                        outside += usize::from(!knots.contains(x[i]));
                        let row = &mut values[at(i)..at(i) + d];
                        knots.eval_into(x[i], row);
                        basis::apply_offsets(row, centre);
                    }
                    if outside > 0 {
                        warnings.push(clamp_warning(&term.label, outside, knots));
                    }
                }
                CovariateBasis::Tensor {
                    columns,
                    knots,
                    offsets: centre,
                } => {
                    let x1 = data.continuous(&columns[0])?;
                    let x2 = data.continuous(&columns[1])?;
                    let mut outside = [0, 0];
                    for i in 0..n {
                        outside[0] += usize::from(!knots[0].contains(x1[i]));
                        outside[1] += usize::from(!knots[1].contains(x2[i]));
                        let mut row = basis::tensor_row(&knots[0].eval(x1[i]), &knots[1].eval(x2[i]));
                        basis::apply_offsets(&mut row, centre);
                        values[at(i)..at(i) + d].copy_from_slice(&row);
                    }
                    for k in 0..2 {
                        if outside[k] > 0 {
                            warnings.push(clamp_warning(&term.label, outside[k], &knots[k]));
                        }
                    }
                }
                CovariateBasis::Group { column, levels } => {
                    let g = data.groups(column)?;
                    for i in 0..n {
                        match levels.binary_search(&g[i]) {
                            Ok(k) => values[at(i) + k] = 1.0,
                            Err(_) => match policy {
                                UnknownLevels::Error => {
                                    return Err(Error::UnknownLevel {
                                        column: column.clone(),
                                        level: g[i].clone(),
                                    })
                                }
                                UnknownLevels::Zero => {
                                    unknown_levels.push((i, column.clone(), g[i].clone()));
                                }
                            },
                        }
                    }
                }
            }
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(CovariateRows {
            n,
            stride,
            offsets,
            values,
            warnings,
            unknown_levels,
        })
    }

    /// Joint basis row `c(y, x_i)`; returns the side and whether a count
    /// spline was extrapolated. The row is untouched for sentinel sides.
    pub fn row_into(&self, cov: &CovariateRows, i: usize, y: i64, out: &mut [f64]) -> (Side, bool) {
        let side = self.side(y);
        if side != Side::Value {
            return (side, false);
        }
        let mut extrapolated = false;
        let mut a = [0.0; 64];
        let mut a_heap = Vec::new();
        for (t, (term, block)) in self.frame.terms.iter().zip(&self.layout.blocks).enumerate() {
            let d1 = term.response.dim();
            let d2 = term.covariate.dim();
            let a_row: &mut [f64] = if d1 <= a.len() {
                &mut a[..d1]
            } else {
                a_heap.resize(d1, 0.0);
                &mut a_heap[..]
            };
            extrapolated |= term.response.eval_into(y, a_row);
            let b = cov.term(i, t, d2);
            let dst = &mut out[block.offset..block.offset + block.size];
            for (k1, &av) in a_row.iter().enumerate() {
                let s = term.sign * av;
                for (k2, &bv) in b.iter().enumerate() {
                    dst[k1 * d2 + k2] = s * bv;
                }
            }
        }
        (side, extrapolated)
    }

    /// Transformation `h(y | x_i) = c(y, x_i)^T gamma`, with `-inf`/`+inf`
    /// for the sentinel sides.
    pub fn transformation(&self, cov: &CovariateRows, i: usize, y: i64, gamma: &[f64], scratch: &mut [f64]) -> f64 {
        match self.row_into(cov, i, y, scratch).0 {
            Side::Lower => f64::NEG_INFINITY,
            Side::Upper => f64::INFINITY,
            Side::Value => dot(scratch, gamma),
        }
    }

    pub fn design(&self, data: &Dataset, policy: UnknownLevels) -> Result<Design> {
        let y = self.response_values(data)?;
        let cov = self.covariate_rows(data, policy)?;
        let n = data.n();
        let dim = self.dim();
        let mut current = vec![0.0; n * dim];
        let mut lagged = vec![0.0; n * dim];
        let mut upper = vec![false; n];
        let mut lower = vec![false; n];
        let mut extrapolated = 0;
        for i in 0..n {
            let (side, ex) = self.row_into(&cov, i, y[i], &mut current[i * dim..(i + 1) * dim]);
            upper[i] = side == Side::Upper;
            extrapolated += usize::from(ex);
            let (side, ex) = self.row_into(&cov, i, y[i] - 1, &mut lagged[i * dim..(i + 1) * dim]);
            lower[i] = side == Side::Lower;
            extrapolated += usize::from(ex);
        }
        let mut warnings = cov.warnings;
        if extrapolated > 0 {
            let w = format!("{extrapolated} response evaluations beyond the training range were extrapolated linearly");
            log::warn!("{w}");
            warnings.push(w);
        }
        Ok(Design {
            n,
            dim,
            current,
            lagged,
            upper,
            lower,
            response: y,
            warnings,
            unknown_levels: cov.unknown_levels,
        })
    }
}

fn clamp_warning(label: &str, count: usize, knots: &KnotVector) -> String {
    let (lo, hi) = knots.domain();
    format!("{label}: {count} value(s) outside [{lo}, {hi}] clamped to the boundary")
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Current and lagged joint basis rows, row-major `n x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub n: usize,
    pub dim: usize,
    pub current: Vec<f64>,
    pub lagged: Vec<f64>,
    /// Current side is the reference category (CDF 1).
    pub upper: Vec<bool>,
    /// Lagged side lies below the support (CDF 0).
    pub lower: Vec<bool>,
    pub response: Vec<i64>,
    pub warnings: Vec<String>,
    pub unknown_levels: Vec<(usize, String, String)>,
}

impl Design {
    pub fn current_row(&self, i: usize) -> &[f64] {
        &self.current[i * self.dim..(i + 1) * self.dim]
    }

    pub fn lagged_row(&self, i: usize) -> &[f64] {
        &self.lagged[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, rows: &[usize]) -> Design {
        let take = |m: &[f64]| -> Vec<f64> {
            rows.iter()
                .flat_map(|&i| m[i * self.dim..(i + 1) * self.dim].iter().copied())
                .collect()
        };
        Design {
            n: rows.len(),
            dim: self.dim,
            current: take(&self.current),
            lagged: take(&self.lagged),
            upper: rows.iter().map(|&i| self.upper[i]).collect(),
            lower: rows.iter().map(|&i| self.lower[i]).collect(),
            response: rows.iter().map(|&i| self.response[i]).collect(),
            warnings: self.warnings.clone(),
            unknown_levels: Vec::new(),
        }
    }
}

/// A model whose frame was learned from the same data as its design.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDesign {
    pub model: Model,
    pub design: Design,
}

pub fn build_design(spec: &ModelSpec, data: &Dataset) -> Result<ModelDesign> {
    let model = Model::from_training(spec, data)?;
    let design = model.design(data, UnknownLevels::Error)?;
    Ok(ModelDesign { model, design })
}

/// Conditional CDF/PMF evaluation averaged over coefficient draws.
#[derive(Debug, Clone)]
pub struct Predictor<'a> {
    model: &'a Model,
    covariates: CovariateRows,
    gammas: Vec<Vec<f64>>,
}

impl<'a> Predictor<'a> {
    /// From unconstrained coefficient draws.
    pub fn from_draws(model: &'a Model, data: &Dataset, betas: &[Vec<f64>], policy: UnknownLevels) -> Result<Self> {
        let gammas = betas.iter().map(|b| model.layout.gamma_from_beta(b)).collect();
        Self::from_gammas(model, data, gammas, policy)
    }

    /// From reparameterized coefficients; a single vector gives plug-in
    /// predictions.
    pub fn from_gammas(model: &'a Model, data: &Dataset, gammas: Vec<Vec<f64>>, policy: UnknownLevels) -> Result<Self> {
        if gammas.is_empty() {
            return Err(Error::Dimension("prediction needs at least one coefficient vector".into()));
        }
        if let Some(g) = gammas.iter().find(|g| g.len() != model.dim()) {
            return Err(Error::Dimension(format!(
                "coefficient vector has length {}, model expects {}",
                g.len(),
                model.dim()
            )));
        }
        let covariates = model.covariate_rows(data, policy)?;
        Ok(Predictor {
            model,
            covariates,
            gammas,
        })
    }

    pub fn n(&self) -> usize {
        self.covariates.n()
    }

    pub fn n_draws(&self) -> usize {
        self.gammas.len()
    }

    pub fn covariates(&self) -> &CovariateRows {
        &self.covariates
    }

    /// Per-draw CDF at integer `y` for row `i`.
    pub fn cdf_draws_int(&self, i: usize, y: i64) -> Vec<f64> {
        let mut row = vec![0.0; self.model.dim()];
        let dist = self.model.reference();
        match self.model.row_into(&self.covariates, i, y, &mut row).0 {
            Side::Lower => vec![0.0; self.gammas.len()],
            Side::Upper => vec![1.0; self.gammas.len()],
            Side::Value => self.gammas.iter().map(|g| raw::cdf(dist, dot(&row, g))).collect(),
        }
    }

    /// Draw-averaged CDF at real `y` (floored).
    pub fn cdf(&self, i: usize, y: f64) -> f64 {
        let v = self.cdf_draws_int(i, y.floor() as i64);
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Draw-averaged PMF at integer `y`.
    pub fn pmf(&self, i: usize, y: i64) -> f64 {
        let hi = self.cdf_draws_int(i, y);
        let lo = self.cdf_draws_int(i, y - 1);
        hi.iter().zip(&lo).map(|(a, b)| (a - b).max(0.0)).sum::<f64>() / hi.len() as f64
    }

    /// Draw-averaged PMF over `first..=last`.
    pub fn pmf_range(&self, i: usize, first: i64, last: i64) -> Vec<f64> {
        let draws = self.gammas.len();
        let mut prev = self.cdf_draws_int(i, first - 1);
        let mut out = Vec::with_capacity((last - first + 1).max(0) as usize);
        for y in first..=last {
            let cur = self.cdf_draws_int(i, y);
            let p: f64 = cur.iter().zip(&prev).map(|(a, b)| (a - b).max(0.0)).sum();
            out.push(p / draws as f64);
            prev = cur;
        }
        out
    }

    /// Draw-averaged survivor `1 - F(y)`.
    pub fn tail(&self, i: usize, y: i64) -> f64 {
        let mut row = vec![0.0; self.model.dim()];
        let dist = self.model.reference();
        let s: f64 = match self.model.row_into(&self.covariates, i, y, &mut row).0 {
            Side::Lower => self.gammas.len() as f64,
            Side::Upper => 0.0,
            Side::Value => self.gammas.iter().map(|g| raw::sf(dist, dot(&row, g))).sum(),
        };
        s / self.gammas.len() as f64
    }

    /// Log of the draw-averaged PMF at `y`, computed in log space.
    pub fn log_pmf(&self, i: usize, y: i64) -> f64 {
        let dist = self.model.reference();
        let mut hi = vec![0.0; self.model.dim()];
        let mut lo = vec![0.0; self.model.dim()];
        let hs = self.model.row_into(&self.covariates, i, y, &mut hi).0;
        let ls = self.model.row_into(&self.covariates, i, y - 1, &mut lo).0;
        let terms: Vec<f64> = self
            .gammas
            .iter()
            .map(|g| {
                let u = match hs {
                    Side::Lower => f64::NEG_INFINITY,
                    Side::Upper => f64::INFINITY,
                    Side::Value => dot(&hi, g),
                };
                let l = match ls {
                    Side::Lower => f64::NEG_INFINITY,
                    Side::Upper => f64::INFINITY,
                    Side::Value => dot(&lo, g),
                };
                raw::log_diff_cdf(dist, u, l)
            })
            .collect();
        log_mean_exp(&terms)
    }
}

/// `log(mean(exp(x)))`, stable.
pub fn log_mean_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = x.iter().map(|v| (v - m).exp()).sum();
    m + (s / x.len() as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Column;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn count_spec(extra: Vec<TermSpec>) -> ModelSpec {
        let mut terms = vec![TermSpec::BaselineCount {
            dimension: 8,
            transform: ResponseTransform::Log1p,
            hyperparameters: Hyperparameters::default(),
        }];
        terms.extend(extra);
        ModelSpec {
            response: ResponseSpec {
                kind: ResponseKind::Count,
                column: "y".into(),
                reference: ReferenceDistribution::StandardLogistic,
                levels: None,
                categories: None,
            },
            terms,
        }
    }

    fn ordinal_spec(categories: usize, extra: Vec<TermSpec>) -> ModelSpec {
        let mut terms = vec![TermSpec::BaselineOrdinal];
        terms.extend(extra);
        ModelSpec {
            response: ResponseSpec {
                kind: ResponseKind::Ordinal,
                column: "y".into(),
                reference: ReferenceDistribution::StandardLogistic,
                levels: None,
                categories: Some(categories),
            },
            terms,
        }
    }

    fn linear(cols: &[&str]) -> TermSpec {
        TermSpec::Linear {
            columns: cols.iter().map(|c| c.to_string()).collect(),
        }
    }

    fn count_data(y: Vec<u64>, z: Vec<f64>) -> Dataset {
        Dataset::new()
            .with("y", Column::Count(y))
            .unwrap()
            .with("z", Column::Continuous(z))
            .unwrap()
    }

    #[test]
    fn shift_model_design_structure() {
        let data = count_data(vec![0, 3, 7], vec![0.1, 0.5, 0.9]);
        let md = build_design(&count_spec(vec![linear(&["z"])]), &data).unwrap();
        let d = &md.design;
        assert_eq!(d.dim, 9);
        assert_eq!(d.current.len(), 3 * 9);
        assert_eq!(d.lower, vec![true, false, false]);
        assert_eq!(d.upper, vec![false; 3]);
        // y = 0 sits on the left boundary of the response spline
        assert_eq!(&d.current_row(0)[..8], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        // shift enters negatively on standardized z
        let sd = (((0.1f64 - 0.5).powi(2) + (0.9f64 - 0.5).powi(2)) / 3.0).sqrt();
        assert_abs_diff_eq!(d.current_row(2)[8], -(0.9 - 0.5) / sd, epsilon = 1e-12);
        assert_eq!(d.current_row(2)[8], d.lagged_row(2)[8]);
    }

    #[test]
    fn ordinal_design_sentinels() {
        let data = Dataset::new().with("y", Column::Ordinal(vec![1, 2, 3, 3])).unwrap();
        let md = build_design(&ordinal_spec(3, vec![]), &data).unwrap();
        let d = &md.design;
        assert_eq!(d.dim, 2);
        assert_eq!(d.upper, vec![false, false, true, true]);
        assert_eq!(d.lower, vec![true, false, false, false]);
        assert_eq!(d.current_row(1), &[0.0, 1.0]);
        assert_eq!(d.lagged_row(1), &[1.0, 0.0]);
        assert_eq!(d.lagged_row(2), &[0.0, 1.0]);
    }

    #[test]
    fn unknown_category_is_a_data_error() {
        let data = Dataset::new().with("y", Column::Ordinal(vec![1, 4])).unwrap();
        assert!(matches!(build_design(&ordinal_spec(3, vec![]), &data), Err(Error::Data { row: 2, .. })));
    }

    #[test]
    fn hurdle_indicator_on_zero_side() {
        let data = count_data(vec![0, 1, 4], vec![0.2, 0.4, 0.6]);
        let spec = count_spec(vec![TermSpec::HurdleZero {
            columns: vec!["z".into()],
        }]);
        let md = build_design(&spec, &data).unwrap();
        let d = &md.design;
        let h = md.model.layout.blocks[1].offset;
        assert_eq!(d.dim, 10);
        // y = 0: current row active
        assert_eq!(d.current_row(0)[h], 1.0);
        // y = 1: lagged row c(0, x) active, current row c(1, x) not
        assert_eq!(d.lagged_row(1)[h], 1.0);
        assert_eq!(d.current_row(1)[h], 0.0);
        assert_eq!(d.current_row(1)[h + 1], 0.0);
        // the covariate part enters as -z
        let z = d.lagged_row(1)[h + 1];
        assert!(z.abs() < 1e-12, "z at the mean standardizes to 0, got {z}");
        assert!(d.lagged_row(0).iter().all(|&v| v == 0.0));
        assert_eq!(d.current_row(2)[h], 0.0);
        assert_eq!(d.lagged_row(2)[h], 0.0);
    }

    #[test]
    fn precision_examples() {
        let data = Dataset::new()
            .with("y", Column::Count(vec![0, 1, 2, 5, 3]))
            .unwrap()
            .with("x", Column::Continuous(vec![0.0, 0.2, 0.5, 0.7, 1.0]))
            .unwrap()
            .with("g", Column::Group(vec!["a".into(), "b".into(), "a".into(), "c".into(), "b".into()]))
            .unwrap();
        let spec = count_spec(vec![
            linear(&["x"]),
            TermSpec::Smooth {
                columns: vec!["x".into()],
                dimension: 6,
                hyperparameters: Hyperparameters::default(),
            },
            TermSpec::Random {
                columns: vec!["g".into()],
                hyperparameters: Hyperparameters::default(),
            },
        ]);
        let model = Model::from_training(&spec, &data).unwrap();
        let mut state = model.layout.initial_state();
        state.variances = vec![1.0, 2.0, 2.0];
        let k = assemble_precision(&model.layout, &state).unwrap();
        let blocks = &model.layout.blocks;
        // linear block is zero
        let lin = &blocks[1];
        assert!(k.view((lin.offset, lin.offset), (1, 1)).iter().all(|&v| v == 0.0));
        // rw2 block at tau^2 = 2 is K/2 plus the fixed pin
        let sm = &blocks[2];
        let want = penalty::rw2_penalty(6).unwrap() / 2.0 + constant_pin(6);
        assert_abs_diff_eq!(k.view((sm.offset, sm.offset), (6, 6)).clone_owned(), want, epsilon = 1e-15);
        // identity block at tau^2 = 2
        let re = &blocks[3];
        assert_eq!(k.view((re.offset, re.offset), (3, 3)).clone_owned(), DMatrix::identity(3, 3) / 2.0);
        // off-diagonal blocks are zero
        assert_eq!(k[(lin.offset, sm.offset)], 0.0);
        state.variances[1] = 0.0;
        assert!(matches!(assemble_precision(&model.layout, &state), Err(Error::Domain(_))));
    }

    #[test]
    fn tensor_precision_at_midpoint() {
        let x1: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let x2: Vec<f64> = (0..20).map(|i| ((i * 7) % 20) as f64 / 19.0).collect();
        let data = count_data((0..20).map(|i| i % 5).collect(), x1)
            .with("w", Column::Continuous(x2))
            .unwrap();
        let spec = count_spec(vec![TermSpec::TensorSmooth {
            columns: vec!["z".into(), "w".into()],
            dimension: TensorDimension::Same(4),
            hyperparameters: Hyperparameters::default(),
            grid_size: 17,
        }]);
        let model = Model::from_training(&spec, &data).unwrap();
        let state = model.layout.initial_state();
        assert_eq!(model.layout.omega_values(&state), vec![0.5]);
        let k = assemble_precision(&model.layout, &state).unwrap();
        let b = &model.layout.blocks[1];
        let r4 = penalty::rw2_penalty(4).unwrap();
        let want = penalty::tensor_precision(&r4, &r4, 0.5).unwrap() + constant_pin(16);
        assert_abs_diff_eq!(k.view((b.offset, b.offset), (16, 16)).clone_owned(), want, epsilon = 1e-12);
        // centered tensor columns
        let d = model.design(&data, UnknownLevels::Error).unwrap();
        for j in 0..16 {
            let m: f64 = (0..20).map(|i| d.current_row(i)[b.offset + j]).sum::<f64>() / 20.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn predict_examples() {
        let data = count_data(vec![0, 1, 2, 3, 4, 6], vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        let model = Model::from_training(&count_spec(vec![]), &data).unwrap();
        // gamma_1 = h(0) = 0
        let beta = vec![0.0, -0.3, 0.1, 0.2, -0.1, 0.0, 0.3, 0.1];
        let p = Predictor::from_draws(&model, &data, &[beta.clone()], UnknownLevels::Error).unwrap();
        assert_abs_diff_eq!(p.cdf(0, 0.0), 0.5, epsilon = 1e-15);
        assert_eq!(p.cdf(3, 2.7), p.cdf(3, 2.0));
        assert_eq!(p.cdf(3, -0.5), 0.0);
        let total: f64 = p.pmf_range(2, 0, 50).iter().sum::<f64>() + p.tail(2, 50);
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.log_pmf(1, 3), p.pmf(1, 3).ln(), epsilon = 1e-12);
    }

    #[test]
    fn ordinal_pmf_sums_to_one() {
        let data = Dataset::new()
            .with("y", Column::Ordinal(vec![1, 2, 3, 4, 2]))
            .unwrap()
            .with("x", Column::Continuous(vec![0.0, 0.3, 0.5, 0.8, 1.0]))
            .unwrap();
        let spec = ordinal_spec(
            4,
            vec![TermSpec::CategorySpecificSmooth {
                columns: vec!["x".into()],
                dimension: 5,
                hyperparameters: Hyperparameters::default(),
                jitter: 1e-6,
            }],
        );
        let model = Model::from_training(&spec, &data).unwrap();
        let draws: Vec<Vec<f64>> = (0..4)
            .map(|s| (0..model.dim()).map(|j| ((j * 7 + s * 3) % 11) as f64 / 10.0 - 0.5).collect())
            .collect();
        let p = Predictor::from_draws(&model, &data, &draws, UnknownLevels::Error).unwrap();
        for i in 0..5 {
            let s: f64 = (1..=4).map(|r| p.pmf(i, r)).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(p.cdf(i, 4.0), 1.0);
        }
    }

    #[test]
    fn unknown_group_levels() {
        let train = Dataset::new()
            .with("y", Column::Count(vec![0, 2, 1]))
            .unwrap()
            .with("g", Column::Group(vec!["b".into(), "a".into(), "b".into()]))
            .unwrap();
        let spec = count_spec(vec![TermSpec::Random {
            columns: vec!["g".into()],
            hyperparameters: Hyperparameters::default(),
        }]);
        let model = Model::from_training(&spec, &train).unwrap();
        assert_eq!(model.layout.blocks[1].coefficient_names, vec!["random(g)[a]", "random(g)[b]"]);
        let test = Dataset::new()
            .with("y", Column::Count(vec![1]))
            .unwrap()
            .with("g", Column::Group(vec!["z".into()]))
            .unwrap();
        assert!(matches!(model.design(&test, UnknownLevels::Error), Err(Error::UnknownLevel { .. })));
        let d = model.design(&test, UnknownLevels::Zero).unwrap();
        assert_eq!(d.unknown_levels.len(), 1);
        assert_eq!(&d.current_row(0)[8..], &[0.0, 0.0]);
    }

    #[test]
    fn spec_validation() {
        let mut s = count_spec(vec![]);
        s.terms.push(TermSpec::BaselineOrdinal);
        assert!(matches!(s.validate(), Err(Error::Config { .. })));
        let s = ordinal_spec(3, vec![TermSpec::HurdleZero { columns: vec![] }]);
        assert!(matches!(s.validate(), Err(Error::Config { .. })));
        let s = count_spec(vec![
            TermSpec::HurdleZero { columns: vec![] },
            TermSpec::HurdleZero { columns: vec![] },
        ]);
        assert!(s.validate().is_err());
        let s = count_spec(vec![TermSpec::CategorySpecificSmooth {
            columns: vec!["x".into()],
            dimension: 5,
            hyperparameters: Hyperparameters::default(),
            jitter: 1e-6,
        }]);
        assert!(s.validate().is_err());
        assert!(ordinal_spec(1, vec![]).validate().is_err());
    }

    #[test]
    fn config_document_round_trip() {
        let doc = r#"{
            "response": {"kind": "ordinal", "column": "grade", "reference": "probit",
                         "levels": ["no", "weak", "severe"]},
            "terms": [
                {"kind": "baseline_ordinal"},
                {"kind": "linear", "columns": ["age"]},
                {"kind": "tensor_smooth", "columns": ["lon", "lat"], "dimension": [5, 6]},
                {"kind": "random", "columns": ["plot"], "hyperparameters": {"a": 1.0, "b": 0.01}}
            ]
        }"#;
        let spec: ModelSpec = serde_json::from_str(doc).unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.ordinal_categories(), Some(3));
        assert_eq!(spec.response.reference, ReferenceDistribution::StandardNormal);
        let again: ModelSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(again, spec);
        let schema = spec.schema().unwrap();
        assert_eq!(schema.columns.len(), 5);
        let bad = r#"{"response": {"kind": "count", "column": "y"},
                      "terms": [{"kind": "baseline_count", "dimnesion": 8}]}"#;
        assert!(serde_json::from_str::<ModelSpec>(bad).is_err());
    }

    #[test]
    fn artifact_round_trip() {
        let data = count_data(vec![0, 3, 7, 2], vec![0.1, 0.5, 0.9, 0.3]);
        let model = Model::from_training(&count_spec(vec![linear(&["z"])]), &data).unwrap();
        let json = serde_json::to_string(&model.artifact()).unwrap();
        let back = Model::from_artifact(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn reporting_scale() {
        let data = count_data(vec![0, 3, 7, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let spec = count_spec(vec![linear(&["z"]), TermSpec::HurdleZero { columns: vec!["z".into()] }]);
        let model = Model::from_training(&spec, &data).unwrap();
        let mut beta = vec![0.0; model.dim()];
        beta[8] = 2.0;
        beta[9] = 0.5;
        beta[10] = 1.5;
        let sd = 1.25f64.sqrt();
        let r = model.layout.to_reporting_scale(&model.frame, &beta);
        assert_abs_diff_eq!(r[8], 2.0 / sd, epsilon = 1e-12);
        assert_abs_diff_eq!(r[10], 1.5 / sd, epsilon = 1e-12);
        assert_abs_diff_eq!(r[9], 0.5 + 1.5 * 2.5 / sd, epsilon = 1e-12);
        // same linear predictor on the original scale
        let z = 3.7;
        let internal = beta[9] - beta[10] * (z - 2.5) / sd;
        assert_abs_diff_eq!(r[9] - r[10] * z, internal, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn pack_unpack_identity(v in proptest::collection::vec(-5.0f64..5.0, 11)) {
            let data = count_data(vec![0, 3, 7, 2], vec![1.0, 2.0, 3.0, 4.0]);
            let spec = count_spec(vec![linear(&["z"]), TermSpec::HurdleZero { columns: vec!["z".into()] }]);
            let model = Model::from_training(&spec, &data).unwrap();
            let blocks = model.layout.unpack(&v).unwrap();
            prop_assert_eq!(model.layout.pack(&blocks).unwrap(), v);
        }

        #[test]
        fn cdf_nondecreasing_in_y(beta in proptest::collection::vec(-3.0f64..3.0, 9), x in 0.0f64..1.0) {
            let data = count_data(vec![0, 3, 9, 2, 5], vec![0.0, 0.25, 0.5, 0.75, 1.0]);
            let model = Model::from_training(&count_spec(vec![linear(&["z"])]), &data).unwrap();
            let newdata = count_data(vec![0], vec![x]);
            let p = Predictor::from_draws(&model, &newdata, &[beta], UnknownLevels::Error).unwrap();
            let mut prev = 0.0;
            for y in 0..40 {
                let c = p.cdf(0, y as f64);
                prop_assert!((0.0..=1.0).contains(&c));
                prop_assert!(c >= prev);
                prev = c;
            }
        }
    }
}
