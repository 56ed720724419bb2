//! Reference distributions linking the transformation function to the
//! conditional distribution function, `F(y | x) = F_Z(h(y | x))`.
//!
//! All three distributions are log-concave. The `raw` functions skip the
//! finiteness check and accept `±inf` (used by the likelihood for the
//! sentinel sides); the checked methods on [`ReferenceDistribution`] reject
//! non-finite input.

use std::f64::consts::{LN_2, PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReferenceDistribution {
    /// Standard logistic, `F(z) = 1 / (1 + exp(-z))`.
    #[serde(rename = "logit")]
    StandardLogistic,
    /// Standard normal, `Φ(z)`.
    #[serde(rename = "probit")]
    StandardNormal,
    /// Minimum extreme value, `F(z) = 1 - exp(-exp(z))`.
    #[serde(rename = "cloglog")]
    MinimumExtremeValue,
}

impl ReferenceDistribution {
    pub const ALL: [ReferenceDistribution; 3] = [
        ReferenceDistribution::StandardLogistic,
        ReferenceDistribution::StandardNormal,
        ReferenceDistribution::MinimumExtremeValue,
    ];

    /// Config name: `"logit"`, `"probit"` or `"cloglog"`.
    pub fn name(self) -> &'static str {
        match self {
            ReferenceDistribution::StandardLogistic => "logit",
            ReferenceDistribution::StandardNormal => "probit",
            ReferenceDistribution::MinimumExtremeValue => "cloglog",
        }
    }

    pub fn cdf(self, z: f64) -> Result<f64> {
        check_finite(z)?;
        Ok(raw::cdf(self, z))
    }

    pub fn pdf(self, z: f64) -> Result<f64> {
        check_finite(z)?;
        Ok(raw::pdf(self, z))
    }

    pub fn log_pdf(self, z: f64) -> Result<f64> {
        check_finite(z)?;
        Ok(raw::log_pdf(self, z))
    }

    pub fn log_cdf(self, z: f64) -> Result<f64> {
        check_finite(z)?;
        Ok(raw::log_cdf(self, z))
    }

    /// Survival function `1 - F(z)`, accurate in the upper tail.
    pub fn sf(self, z: f64) -> Result<f64> {
        check_finite(z)?;
        Ok(raw::sf(self, z))
    }

    pub fn log_sf(self, z: f64) -> Result<f64> {
        check_finite(z)?;
        Ok(raw::log_sf(self, z))
    }

    pub fn quantile(self, p: f64) -> Result<f64> {
        check_probability(p)?;
        Ok(raw::quantile(self, p))
    }

    /// Inverse of the survival function: the `z` with `1 - F(z) = q`.
    pub fn inverse_sf(self, q: f64) -> Result<f64> {
        check_probability(q)?;
        Ok(raw::inverse_sf(self, q))
    }
}

impl fmt::Display for ReferenceDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReferenceDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(ReferenceDistribution::StandardLogistic),
            "probit" => Ok(ReferenceDistribution::StandardNormal),
            "cloglog" => Ok(ReferenceDistribution::MinimumExtremeValue),
            other => Err(Error::Domain(format!(
                "unknown reference distribution {other:?} (expected logit, probit or cloglog)"
            ))),
        }
    }
}

fn check_finite(z: f64) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("argument must be finite, got {z}")))
    }
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("probability must lie in (0, 1), got {p}")))
    }
}

/// Unchecked evaluations. Infinite arguments map to the limits.
pub mod raw {
    use super::*;
    use ReferenceDistribution::*;

    #[inline]
    pub fn cdf(dist: ReferenceDistribution, z: f64) -> f64 {
        match dist {
            StandardLogistic => {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            }
            StandardNormal => 0.5 * erfc(-z / SQRT_2),
            MinimumExtremeValue => -(-z.exp()).exp_m1(),
        }
    }

    #[inline]
    pub fn sf(dist: ReferenceDistribution, z: f64) -> f64 {
        match dist {
            StandardLogistic | StandardNormal => cdf(dist, -z),
            MinimumExtremeValue => (-z.exp()).exp(),
        }
    }

    #[inline]
    pub fn pdf(dist: ReferenceDistribution, z: f64) -> f64 {
        if z.is_infinite() {
            return 0.0;
        }
        log_pdf(dist, z).exp()
    }

    #[inline]
    pub fn log_pdf(dist: ReferenceDistribution, z: f64) -> f64 {
        if z.is_infinite() {
            return f64::NEG_INFINITY;
        }
        match dist {
            StandardLogistic => {
                let a = -z.abs();
                a - 2.0 * a.exp().ln_1p()
            }
            StandardNormal => -0.5 * z * z - LN_SQRT_2PI,
            MinimumExtremeValue => z - z.exp(),
        }
    }

    #[inline]
    pub fn log_cdf(dist: ReferenceDistribution, z: f64) -> f64 {
        match dist {
            StandardLogistic => {
                if z > 0.0 {
                    -(-z).exp().ln_1p()
                } else {
                    z - z.exp().ln_1p()
                }
            }
            StandardNormal => normal_log_cdf(z),
            MinimumExtremeValue => {
                if z < -30.0 {
                    // log(1 - exp(-t)) = log t - t/2 + O(t^2), t = e^z
                    z - 0.5 * z.exp()
                } else {
                    (-(-z.exp()).exp_m1()).ln()
                }
            }
        }
    }

    #[inline]
    pub fn log_sf(dist: ReferenceDistribution, z: f64) -> f64 {
        match dist {
            StandardLogistic | StandardNormal => log_cdf(dist, -z),
            MinimumExtremeValue => -z.exp(),
        }
    }

    pub fn quantile(dist: ReferenceDistribution, p: f64) -> f64 {
        match dist {
            StandardLogistic => p.ln() - (-p).ln_1p(),
            StandardNormal => {
                if p < 0.5 {
                    normal_lower_quantile(p)
                } else {
                    // 1 - p is exact for p >= 0.5
                    -normal_lower_quantile(1.0 - p)
                }
            }
            MinimumExtremeValue => (-(-p).ln_1p()).ln(),
        }
    }

    pub fn inverse_sf(dist: ReferenceDistribution, q: f64) -> f64 {
        match dist {
            StandardLogistic => -quantile(dist, q),
            StandardNormal => -quantile(dist, q),
            MinimumExtremeValue => (-q.ln()).ln(),
        }
    }

    fn normal_log_cdf(z: f64) -> f64 {
        if z > 5.0 {
            (-0.5 * erfc(z / SQRT_2)).ln_1p()
        } else if z > -37.0 {
            (0.5 * erfc(-z / SQRT_2)).ln()
        } else if z == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            // Mills-ratio asymptotic expansion; erfc underflows below here.
            let z2 = z * z;
            let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2)
                + 105.0 / (z2 * z2 * z2 * z2);
            -0.5 * z2 - LN_SQRT_2PI - (-z).ln() + series.ln()
        }
    }

    /// Acklam's rational approximation refined by two Halley steps on erfc.
    fn normal_lower_quantile(p: f64) -> f64 {
        debug_assert!(p > 0.0 && p <= 0.5);
        const A: [f64; 6] = [
            -3.969_683_028_665_376e1,
            2.209_460_984_245_205e2,
            -2.759_285_104_469_687e2,
            1.383_577_518_672_69e2,
            -3.066_479_806_614_716e1,
            2.506_628_277_459_239,
        ];
        const B: [f64; 5] = [
            -5.447_609_879_822_406e1,
            1.615_858_368_580_409e2,
            -1.556_989_798_598_866e2,
            6.680_131_188_771_972e1,
            -1.328_068_155_288_572e1,
        ];
        const C: [f64; 6] = [
            -7.784_894_002_430_293e-3,
            -3.223_964_580_411_365e-1,
            -2.400_758_277_161_838,
            -2.549_732_539_343_734,
            4.374_664_141_464_968,
            2.938_163_982_698_783,
        ];
        const D: [f64; 4] = [
            7.784_695_709_041_462e-3,
            3.224_671_290_700_398e-1,
            2.445_134_137_142_996,
            3.754_408_661_907_416,
        ];
        let mut x = if p < 0.024_25 {
            let q = (-2.0 * p.ln()).sqrt();
            (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
                / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
        } else {
            let q = p - 0.5;
            let r = q * q;
            (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
                / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
        };
        for _ in 0..2 {
            // Relative residual keeps the step accurate deep in the tail.
            let f = 0.5 * erfc(-x / SQRT_2);
            let e = f - p;
            let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
            if !u.is_finite() {
                break;
            }
            x -= u / (1.0 + 0.5 * x * u);
        }
        x
    }

    /// `log(F(upper) - F(lower))` for `lower < upper`, either possibly infinite.
    ///
    /// Chooses the tail in which the difference is computed so that both
    /// far-left and far-right cells keep their relative precision.
    pub fn log_diff_cdf(dist: ReferenceDistribution, upper: f64, lower: f64) -> f64 {
        if upper.is_nan() || lower.is_nan() || upper <= lower {
            return f64::NEG_INFINITY;
        }
        if lower == f64::NEG_INFINITY {
            return log_cdf(dist, upper);
        }
        if upper == f64::INFINITY {
            return log_sf(dist, lower);
        }
        if lower > median(dist) {
            // Both in the upper half: S(lower) - S(upper).
            let a = log_sf(dist, lower);
            let b = log_sf(dist, upper);
            a + log1m_exp(b - a)
        } else {
            let a = log_cdf(dist, upper);
            let b = log_cdf(dist, lower);
            a + log1m_exp(b - a)
        }
    }

    #[inline]
    fn median(dist: ReferenceDistribution) -> f64 {
        match dist {
            StandardLogistic | StandardNormal => 0.0,
            // log(log 2)
            MinimumExtremeValue => LN_2.ln(),
        }
    }

    /// `log(1 - exp(x))` for `x <= 0`.
    #[inline]
    pub fn log1m_exp(x: f64) -> f64 {
        if x >= 0.0 {
            f64::NEG_INFINITY
        } else if x > -LN_2 {
            (-x.exp_m1()).ln()
        } else {
            (-x.exp()).ln_1p()
        }
    }
}
