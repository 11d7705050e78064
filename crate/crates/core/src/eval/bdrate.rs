//! Bjontegaard delta rate.
//!
//! Each curve is fit with a cubic least-squares polynomial
//! `log10(bitrate) = P(quality)`; the difference of the two polynomials is
//! integrated analytically over the shared quality range.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub bitrate_kbps: f64,
    pub quality_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RDCurve {
    pub policy: String,
    pub video_id: String,
    /// Ascending bitrate.
    pub points: Vec<RDPoint>,
}

impl RDCurve {
    pub fn new(policy: impl Into<String>, video_id: impl Into<String>, mut points: Vec<RDPoint>) -> Result<Self> {
        for p in &points {
            ensure_finite("bitrate", p.bitrate_kbps)?;
            ensure_finite("quality", p.quality_db)?;
            if p.bitrate_kbps <= 0.0 {
                return Err(Error::InputDomain(format!("bitrate {} kbps", p.bitrate_kbps)));
            }
        }
        points.sort_by(|a, b| a.bitrate_kbps.total_cmp(&b.bitrate_kbps));
        Ok(RDCurve {
            policy: policy.into(),
            video_id: video_id.into(),
            points,
        })
    }

    /// Quality rises with bitrate and bitrates are distinct.
    pub fn is_monotone(&self) -> bool {
        self.points
            .windows(2)
            .all(|w| w[1].bitrate_kbps > w[0].bitrate_kbps && w[1].quality_db > w[0].quality_db)
    }

    fn quality_range(&self) -> (f64, f64) {
        self.points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.quality_db), hi.max(p.quality_db))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BdRate {
    /// Average bitrate change of `test` relative to `reference`, percent.
    /// Negative means `test` needs fewer bits for the same quality.
    pub percent: f64,
    /// Set when either curve is not monotone; the fit still applies.
    pub non_monotone: bool,
}

/// Cubic `c0 + c1·u + c2·u² + c3·u³` in the normalized variable
/// `u = (q − center) / scale`.
struct Cubic {
    coef: [f64; 4],
    center: f64,
    scale: f64,
}

impl Cubic {
    fn fit(curve: &RDCurve) -> Result<Self> {
        let (lo, hi) = curve.quality_range();
        let center = 0.5 * (lo + hi);
        let scale = (0.5 * (hi - lo)).max(f64::MIN_POSITIVE);
        let n = curve.points.len();
        let a = DMatrix::from_fn(n, 4, |r, c| ((curve.points[r].quality_db - center) / scale).powi(c as i32));
        let b = DVector::from_iterator(n, curve.points.iter().map(|p| p.bitrate_kbps.log10()));
        let svd = a.svd(true, true);
        let max_sv = svd.singular_values.max();
        let rank = svd.rank(max_sv * 1e-10);
        if rank < 4 {
            return Err(Error::InputDomain(format!(
                "curve {}/{} has too few distinct quality values for a cubic fit",
                curve.policy, curve.video_id
            )));
        }
        let x = svd
            .solve(&b, max_sv * 1e-12)
            .map_err(|e| Error::InputDomain(e.to_string()))?;
        Ok(Cubic {
            coef: [x[0], x[1], x[2], x[3]],
            center,
            scale,
        })
    }

    /// Definite integral over quality in [lo, hi].
    fn integrate(&self, lo: f64, hi: f64) -> f64 {
        let anti = |q: f64| {
            let u = (q - self.center) / self.scale;
            self.coef
                .iter()
                .enumerate()
                .map(|(k, c)| c * u.powi(k as i32 + 1) / (k as f64 + 1.0))
                .sum::<f64>()
        };
        self.scale * (anti(hi) - anti(lo))
    }
}

pub fn bd_rate(reference: &RDCurve, test: &RDCurve) -> Result<BdRate> {
    for c in [reference, test] {
        if c.points.len() < 4 {
            return Err(Error::InputDomain(format!(
                "curve {}/{} has {} points; BD-rate needs at least 4",
                c.policy,
                c.video_id,
                c.points.len()
            )));
        }
    }
    let (ref_lo, ref_hi) = reference.quality_range();
    let (test_lo, test_hi) = test.quality_range();
    let lo = ref_lo.max(test_lo);
    let hi = ref_hi.min(test_hi);
    if !(hi > lo) {
        return Err(Error::NoOverlap {
            ref_lo,
            ref_hi,
            test_lo,
            test_hi,
        });
    }
    let p_ref = Cubic::fit(reference)?;
    let p_test = Cubic::fit(test)?;
    let d = (p_test.integrate(lo, hi) - p_ref.integrate(lo, hi)) / (hi - lo);
    Ok(BdRate {
        percent: 100.0 * (10f64.powf(d) - 1.0),
        non_monotone: !(reference.is_monotone() && test.is_monotone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(points: &[(f64, f64)]) -> RDCurve {
        RDCurve::new(
            "p",
            "v",
            points
                .iter()
                .map(|&(bitrate_kbps, quality_db)| RDPoint { bitrate_kbps, quality_db })
                .collect(),
        )
        .unwrap()
    }

    const REF: [(f64, f64); 4] = [(300.0, 30.0), (400.0, 32.0), (550.0, 34.0), (700.0, 35.5)];
    const TEST: [(f64, f64); 4] = [(280.0, 30.0), (380.0, 32.2), (500.0, 34.1), (650.0, 35.6)];

    #[test]
    fn identity_is_zero() {
        let r = bd_rate(&curve(&REF), &curve(&REF)).unwrap();
        assert!(r.percent.abs() <= 1e-9);
        assert!(!r.non_monotone);
    }

    #[test]
    fn uniform_scaling() {
        let scaled: Vec<(f64, f64)> = REF.iter().map(|&(r, q)| (0.9 * r, q)).collect();
        let r = bd_rate(&curve(&REF), &curve(&scaled)).unwrap();
        assert!((r.percent + 10.0).abs() < 1e-6, "{}", r.percent);
    }

    /// Normal equations solved by Gaussian elimination, integrated by the
    /// trapezoid rule on 10^5 intervals.
    fn oracle(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
        #[allow(clippy::needless_range_loop)]
        fn fit(pts: &[(f64, f64)]) -> [f64; 4] {
            let mut m = [[0.0f64; 5]; 4];
            for &(r, q) in pts {
                let y = r.log10();
                let pw = [1.0, q, q * q, q * q * q];
                for i in 0..4 {
                    for j in 0..4 {
                        m[i][j] += pw[i] * pw[j];
                    }
                    m[i][4] += pw[i] * y;
                }
            }
            for col in 0..4 {
                let piv = (col..4).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
                m.swap(col, piv);
                for row in 0..4 {
                    if row != col {
                        let f = m[row][col] / m[col][col];
                        for k in col..5 {
                            m[row][k] -= f * m[col][k];
                        }
                    }
                }
            }
            [m[0][4] / m[0][0], m[1][4] / m[1][1], m[2][4] / m[2][2], m[3][4] / m[3][3]]
        }
        let (pa, pb) = (fit(a), fit(b));
        let eval = |c: &[f64; 4], q: f64| c[0] + c[1] * q + c[2] * q * q + c[3] * q * q * q;
        let lo = a[0].1.max(b[0].1);
        let hi = a[3].1.min(b[3].1);
        let n = 100_000;
        let h = (hi - lo) / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let q = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            s += w * (eval(&pb, q) - eval(&pa, q));
        }
        let d = s * h / (hi - lo);
        100.0 * (10f64.powf(d) - 1.0)
    }

    #[test]
    fn golden_case_matches_numerical_integration() {
        let expected = oracle(&REF, &TEST);
        let got = bd_rate(&curve(&REF), &curve(&TEST)).unwrap().percent;
        assert!((got - expected).abs() < 0.01, "{got} vs {expected}");
        assert!(got < 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(bd_rate(&curve(&REF[..3]), &curve(&REF)), Err(Error::InputDomain(_))));
        let far: Vec<(f64, f64)> = REF.iter().map(|&(r, q)| (r, q + 20.0)).collect();
        assert!(matches!(bd_rate(&curve(&REF), &curve(&far)), Err(Error::NoOverlap { .. })));
    }

    #[test]
    fn non_monotone_flagged() {
        let wobbly = [(300.0, 30.0), (400.0, 33.0), (550.0, 32.5), (700.0, 35.5)];
        let r = bd_rate(&curve(&REF), &curve(&wobbly)).unwrap();
        assert!(r.non_monotone);
        assert!(r.percent.is_finite());
    }
}
