//! Basis evaluation: B-splines (Cox–de Boor), ordinal unit vectors, group
//! indicators, Kronecker tensor rows and training-data centering.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transformation applied to a count response before the B-spline basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseTransform {
    Identity,
    Log,
    #[default]
    Log1p,
}

impl ResponseTransform {
    pub fn apply(self, y: f64) -> f64 {
        match self {
            ResponseTransform::Identity => y,
            ResponseTransform::Log => y.ln(),
            ResponseTransform::Log1p => y.ln_1p(),
        }
    }
}

/// Clamped knot vector for B-splines of a fixed degree on `[lower, upper]`.
///
/// Boundary knots are replicated `degree + 1` times, interior knots are
/// equidistant, so `dim = knots.len() - degree - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    degree: usize,
    knots: Vec<f64>,
    lower: f64,
    upper: f64,
}

impl KnotVector {
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn dim(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.lower && value <= self.upper
    }

    /// Index `k` of the knot span `[t_k, t_{k+1})` holding `value`, which
    /// must already lie in the domain. The right boundary maps to the last
    /// non-empty span.
    fn span(&self, value: f64) -> usize {
        let p = self.degree;
        let last = self.dim() - 1;
        if value >= self.upper {
            return last;
        }
        // knots[p..=last+1] are increasing and bracket the domain
        let interior = &self.knots[p + 1..=last + 1];
        p + interior.partition_point(|&t| t <= value)
    }

    /// Nonzero basis values of degree `q <= degree` at `value`, i.e.
    /// `N_{k-q..=k, q}` where `k` is the span index (Piegl & Tiller A2.2).
    fn nonzero(&self, k: usize, value: f64, q: usize) -> Vec<f64> {
        let t = &self.knots;
        let mut n = vec![0.0; q + 1];
        let mut left = vec![0.0; q + 1];
        let mut right = vec![0.0; q + 1];
        n[0] = 1.0;
        for j in 1..=q {
            left[j] = value - t[k + 1 - j];
            right[j] = t[k + j] - value;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        n
    }

    /// Basis values at `value`, clamped to the domain.
    pub fn eval(&self, value: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(value, &mut out);
        out
    }

    pub fn eval_into(&self, value: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        let v = value.clamp(self.lower, self.upper);
        let k = self.span(v);
        let p = self.degree;
        out.iter_mut().for_each(|x| *x = 0.0);
        for (j, b) in self.nonzero(k, v, p).into_iter().enumerate() {
            out[k - p + j] = b;
        }
    }

    /// First derivative of every basis function at `value` (clamped).
    pub fn derivative(&self, value: f64) -> Vec<f64> {
        let p = self.degree;
        let mut out = vec![0.0; self.dim()];
        if p == 0 {
            return out;
        }
        let v = value.clamp(self.lower, self.upper);
        let k = self.span(v);
        let t = &self.knots;
        let lower = self.nonzero(k, v, p - 1);
        // N'_{i,p} = p N_{i,p-1}/(t_{i+p}-t_i) - p N_{i+1,p-1}/(t_{i+p+1}-t_{i+1})
        // lower[j] holds N_{k-p+1+j, p-1}
        let get = |i: usize| -> f64 {
            if i + p < k + 1 || i > k {
                0.0
            } else {
                lower[i + p - 1 - k]
            }
        };
        for i in k - p..=k {
            let mut d = 0.0;
            let a = t[i + p] - t[i];
            if a > 0.0 {
                d += p as f64 * get(i) / a;
            }
            let b = t[i + p + 1] - t[i + 1];
            if b > 0.0 {
                d -= p as f64 * get(i + 1) / b;
            }
            out[i] = d;
        }
        out
    }

    /// Basis row extended linearly outside the domain:
    /// `B(v) = B(edge) + (v - edge) B'(edge)`. Inside the domain this is
    /// [`KnotVector::eval`].
    pub fn eval_linear_extrapolated(&self, value: f64) -> Vec<f64> {
        if self.contains(value) {
            return self.eval(value);
        }
        let edge = value.clamp(self.lower, self.upper);
        let mut row = self.eval(edge);
        let d = self.derivative(edge);
        for (r, dv) in row.iter_mut().zip(d) {
            *r += (value - edge) * dv;
        }
        row
    }
}

/// Equidistant clamped knots over the range of `values` yielding `dim`
/// basis functions of the given degree.
pub fn make_knots(values: &[f64], dim: usize, degree: usize) -> Result<KnotVector> {
    if dim < degree + 1 {
        return Err(Error::Dimension(format!(
            "B-spline dimension {dim} is below degree + 1 = {}",
            degree + 1
        )));
    }
    let (lower, upper) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if values.is_empty() || !lower.is_finite() || !upper.is_finite() {
        return Err(Error::Domain("knot placement needs finite values".into()));
    }
    if lower >= upper {
        return Err(Error::Domain(format!(
            "degenerate domain: all values equal {lower}"
        )));
    }
    Ok(knots_on_domain(lower, upper, dim, degree))
}

/// Equidistant clamped knots on an explicit domain.
pub fn knots_on_domain(lower: f64, upper: f64, dim: usize, degree: usize) -> KnotVector {
    let segments = dim - degree;
    let width = (upper - lower) / segments as f64;
    let mut knots = Vec::with_capacity(dim + degree + 1);
    knots.extend(std::iter::repeat(lower).take(degree + 1));
    knots.extend((1..segments).map(|j| lower + j as f64 * width));
    knots.extend(std::iter::repeat(upper).take(degree + 1));
    KnotVector {
        degree,
        knots,
        lower,
        upper,
    }
}

pub fn eval_bspline(knots: &KnotVector, value: f64) -> Result<Vec<f64>> {
    if !value.is_finite() {
        return Err(Error::Domain(format!("cannot evaluate basis at {value}")));
    }
    Ok(knots.eval(value))
}

/// Ordinal unit-vector row `e_c(r)` for category `r` in `1..=c+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrdinalRow {
    pub values: Vec<f64>,
    /// Set for the reference category `c + 1`, whose CDF is fixed at one.
    pub reference: bool,
}

pub fn eval_ordinal(r: usize, c: usize) -> Result<OrdinalRow> {
    if r == 0 || r > c + 1 {
        return Err(Error::Index(format!(
            "ordinal category {r} outside 1..={}",
            c + 1
        )));
    }
    let mut values = vec![0.0; c];
    if r <= c {
        values[r - 1] = 1.0;
    }
    Ok(OrdinalRow {
        values,
        reference: r == c + 1,
    })
}

/// Indicator row of length `groups` for the 1-based group `g`.
pub fn eval_group(g: usize, groups: usize) -> Result<Vec<f64>> {
    if g == 0 || g > groups {
        return Err(Error::UnknownLevel {
            column: String::new(),
            level: g.to_string(),
        });
    }
    let mut row = vec![0.0; groups];
    row[g - 1] = 1.0;
    Ok(row)
}

/// Kronecker product `a ⊗ b`; entry `(d1, d2)` lands at `d1 * b.len() + d2`.
pub fn tensor_row(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &x in a {
        out.extend(b.iter().map(|&y| x * y));
    }
    out
}

/// A dense evaluated basis with optional column-centering offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatedBasis {
    pub values: DMatrix<f64>,
    pub offsets: Vec<f64>,
}

impl EvaluatedBasis {
    pub fn new(values: DMatrix<f64>) -> Self {
        let offsets = vec![0.0; values.ncols()];
        EvaluatedBasis { values, offsets }
    }

    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Self {
        let values = DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]);
        Self::new(values)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

/// Subtracts training column means and records them as offsets.
pub fn center(basis: &EvaluatedBasis) -> EvaluatedBasis {
    let n = basis.nrows().max(1) as f64;
    let mut values = basis.values.clone();
    let mut offsets = basis.offsets.clone();
    for (j, mut col) in values.column_iter_mut().enumerate() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        offsets[j] += mean;
    }
    EvaluatedBasis { values, offsets }
}

/// Applies stored training offsets to a freshly evaluated (uncentered) row.
pub fn apply_offsets(row: &mut [f64], offsets: &[f64]) {
    for (r, o) in row.iter_mut().zip(offsets) {
        *r -= o;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Textbook recursive definition, written independently of the
    /// span-based evaluation above.
    fn naive(t: &[f64], i: usize, p: usize, x: f64, last: usize) -> f64 {
        if p == 0 {
            let inside = t[i] <= x && x < t[i + 1];
            // right endpoint belongs to the last non-empty interval
            let right_end = x == t[t.len() - 1] && i == last;
            return if inside || right_end { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let a = t[i + p] - t[i];
        if a > 0.0 {
            v += (x - t[i]) / a * naive(t, i, p - 1, x, last);
        }
        let b = t[i + p + 1] - t[i + 1];
        if b > 0.0 {
            v += (t[i + p + 1] - x) / b * naive(t, i + 1, p - 1, x, last);
        }
        v
    }

    fn unit_knots(dim: usize) -> KnotVector {
        make_knots(&[0.0, 1.0], dim, 3).unwrap()
    }

    #[test]
    fn knot_count_and_domain() {
        let k = unit_knots(8);
        assert_eq!(k.knots().len(), 12);
        assert_eq!(k.dim(), 8);
        assert_eq!(k.domain(), (0.0, 1.0));
        assert!(matches!(make_knots(&[0.0, 1.0], 3, 3), Err(Error::Dimension(_))));
        assert!(matches!(make_knots(&[2.0, 2.0], 8, 3), Err(Error::Domain(_))));
    }

    #[test]
    fn log1p_count_domain() {
        let values: Vec<f64> = (0..=40).map(|y| ResponseTransform::Log1p.apply(y as f64)).collect();
        let k = make_knots(&values, 8, 3).unwrap();
        let (lo, hi) = k.domain();
        assert_eq!(lo, 0.0);
        assert_abs_diff_eq!(hi, 41f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn left_boundary_is_first_unit_vector() {
        let k = unit_knots(8);
        let row = k.eval(0.0);
        assert_eq!(row[0], 1.0);
        assert!(row[1..].iter().all(|&v| v == 0.0));
        let right = k.eval(1.0);
        assert_abs_diff_eq!(right[7], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn matches_naive_recursion() {
        let k = unit_knots(8);
        let last = k.dim() - 1;
        for x in [0.0, 0.13, 0.37, 0.5, 0.61, 0.999, 1.0] {
            let row = k.eval(x);
            for (i, v) in row.iter().enumerate() {
                let want = naive(k.knots(), i, 3, x, last);
                assert_abs_diff_eq!(*v, want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let k = make_knots(&[0.0, 3.7], 8, 3).unwrap();
        let h = 1e-6;
        for x in [0.2, 1.0, 1.9, 3.0] {
            let d = k.derivative(x);
            let up = k.eval(x + h);
            let dn = k.eval(x - h);
            for i in 0..8 {
                assert_abs_diff_eq!(d[i], (up[i] - dn[i]) / (2.0 * h), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn linear_extrapolation_continues_monotone_spline() {
        let k = make_knots(&[0.0, 2.0], 6, 3).unwrap();
        let gamma = [-1.0, -0.5, 0.2, 0.4, 1.0, 1.3];
        let h = |v: f64| -> f64 {
            k.eval_linear_extrapolated(v).iter().zip(&gamma).map(|(a, b)| a * b).sum()
        };
        assert_abs_diff_eq!(h(2.0), 1.3, epsilon = 1e-12);
        assert!(h(2.5) > h(2.0));
        assert!(h(4.0) > h(2.5));
        // slope at the edge: 3 (gamma_D - gamma_{D-1}) / spacing
        let slope = 3.0 * (1.3 - 1.0) / (2.0 / 3.0);
        assert_abs_diff_eq!(h(3.0) - h(2.0), slope, epsilon = 1e-12);
        assert!(h(-0.5) < h(0.0));
    }

    #[test]
    fn out_of_domain_values_clamp() {
        let k = unit_knots(6);
        assert_eq!(k.eval(-3.0), k.eval(0.0));
        assert_eq!(k.eval(7.0), k.eval(1.0));
        assert!(eval_bspline(&k, f64::NAN).is_err());
    }

    #[test]
    fn ordinal_rows() {
        assert_eq!(eval_ordinal(2, 3).unwrap().values, vec![0.0, 1.0, 0.0]);
        assert_eq!(eval_ordinal(1, 3).unwrap().values, vec![1.0, 0.0, 0.0]);
        let reference = eval_ordinal(4, 3).unwrap();
        assert_eq!(reference.values, vec![0.0; 3]);
        assert!(reference.reference);
        assert!(!eval_ordinal(3, 3).unwrap().reference);
        assert!(matches!(eval_ordinal(5, 3), Err(Error::Index(_))));
        assert!(eval_ordinal(0, 3).is_err());
    }

    #[test]
    fn group_rows() {
        assert_eq!(eval_group(3, 5).unwrap(), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(eval_group(1, 1).unwrap(), vec![1.0]);
        assert!(matches!(eval_group(6, 5), Err(Error::UnknownLevel { .. })));
    }

    #[test]
    fn tensor_rows() {
        assert_eq!(tensor_row(&[1.0, 2.0], &[3.0, 4.0]), vec![3.0, 4.0, 6.0, 8.0]);
        assert_eq!(tensor_row(&[0.5, 1.5, 2.0], &[1.0]), vec![0.5, 1.5, 2.0]);
        let k = unit_knots(5);
        let t = tensor_row(&k.eval(0.3), &k.eval(0.8));
        assert_abs_diff_eq!(t.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn centering() {
        let basis = EvaluatedBasis::from_rows(&[vec![1.0], vec![2.0], vec![3.0]], 1);
        let c = center(&basis);
        assert_eq!(c.values.column(0).as_slice(), &[-1.0, 0.0, 1.0]);
        assert_eq!(c.offsets, vec![2.0]);

        let again = center(&EvaluatedBasis::new(c.values.clone()));
        assert_eq!(again.values, c.values);
        assert_eq!(again.offsets, vec![0.0]);

        // prediction rows reuse the training offsets
        let mut row = vec![10.0];
        apply_offsets(&mut row, &c.offsets);
        assert_eq!(row, vec![8.0]);
    }

    #[test]
    fn centered_training_columns_have_zero_mean() {
        let k = make_knots(&[0.0, 5.0], 7, 3).unwrap();
        let rows: Vec<Vec<f64>> = (0..57).map(|i| k.eval(i as f64 * 5.0 / 56.0)).collect();
        let c = center(&EvaluatedBasis::from_rows(&rows, 7));
        for col in c.values.column_iter() {
            assert!(col.mean().abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity(x in 0.0f64..=1.0, dim in 4usize..15) {
            let row = unit_knots(dim).eval(x);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!(row.iter().filter(|&&v| v != 0.0).count() <= 4);
        }

        #[test]
        fn continuity(x in 0.0f64..0.999) {
            let k = unit_knots(9);
            let a = k.eval(x);
            let b = k.eval(x + 1e-9);
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-6);
            }
        }

        #[test]
        fn kronecker_ordering(a in proptest::collection::vec(-3.0f64..3.0, 1..6),
                              b in proptest::collection::vec(-3.0f64..3.0, 1..6)) {
            let t = tensor_row(&a, &b);
            for (d1, x) in a.iter().enumerate() {
                for (d2, y) in b.iter().enumerate() {
                    prop_assert_eq!(t[d1 * b.len() + d2], x * y);
                }
            }
        }
    }
}
