//! Exact tests behind the experiment reports: the hypergeometric overlap test,
//! the one-sided paired t-test and type-7 quantiles.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, LabError, Result};

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Support `[lo, hi]` of the number of marked items among `n` draws without
/// replacement from `N` items of which `K` are marked.
pub fn hypergeom_support(population: u64, successes: u64, draws: u64) -> Result<(u64, u64)> {
    if successes > population || draws > population {
        return Err(invalid(format!(
            "hypergeometric parameters need K <= N and n <= N (N={population}, K={successes}, n={draws})"
        )));
    }
    let lo = (draws + successes).saturating_sub(population);
    let hi = draws.min(successes);
    Ok((lo, hi))
}

/// `P(X = k)` via log-gamma arithmetic; zero outside the support.
pub fn hypergeom_pmf(population: u64, successes: u64, draws: u64, k: u64) -> Result<f64> {
    let (lo, hi) = hypergeom_support(population, successes, draws)?;
    if k < lo || k > hi {
        return Ok(0.0);
    }
    Ok((ln_choose(successes, k) + ln_choose(population - successes, draws - k)
        - ln_choose(population, draws))
    .exp())
}

/// Upper tail `P(X >= k)`, summed exactly term by term from the top of the
/// support so small terms accumulate first.
pub fn hypergeom_sf(population: u64, successes: u64, draws: u64, k: u64) -> Result<f64> {
    let (lo, hi) = hypergeom_support(population, successes, draws)?;
    if k < lo || k > hi {
        return Err(invalid(format!("k = {k} outside support [{lo}, {hi}]")));
    }
    if k == lo {
        return Ok(1.0);
    }
    let mut p = 0.0;
    for j in (k..=hi).rev() {
        p += hypergeom_pmf(population, successes, draws, j)?;
    }
    Ok(p.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypergeomTest {
    pub population: u64,
    pub successes: u64,
    pub draws: u64,
    pub observed: u64,
    pub p_value: f64,
}

/// Overlap test: of `population` questions, `successes` were answered by one
/// system and `draws` by another; `observed` by both.
pub fn hypergeom_test(population: u64, successes: u64, draws: u64, observed: u64) -> Result<HypergeomTest> {
    Ok(HypergeomTest {
        population,
        successes,
        draws,
        observed,
        p_value: hypergeom_sf(population, successes, draws, observed)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alternative {
    /// `H1: mean(x - y) < 0`.
    Less,
    /// `H1: mean(x - y) > 0`.
    Greater,
}

impl std::str::FromStr for Alternative {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "less" => Ok(Alternative::Less),
            "greater" => Ok(Alternative::Greater),
            other => Err(invalid(format!("unknown alternative '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub n_pairs: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub t_stat: f64,
    pub df: f64,
    pub p_one_sided: f64,
    pub alternative: Alternative,
}

/// `P(T > |t|)` for Student's t with `df` degrees of freedom.
fn student_t_tail(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    0.5 * beta_reg(df / 2.0, 0.5, x)
}

/// CDF of Student's t distribution.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = student_t_tail(t, df);
    if t < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// One-sided paired t-test on `d = x - y`.
///
/// Zero-variance differences are reported as [`LabError::Degenerate`]; no
/// p-value is produced for them.
pub fn paired_t(x: &[f64], y: &[f64], alternative: Alternative) -> Result<PairedTTest> {
    if x.len() != y.len() {
        return Err(invalid(format!(
            "paired samples have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(invalid("paired t-test needs at least two pairs"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid("paired t-test input is not finite"));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(LabError::Degenerate(
            "paired differences have zero variance; t statistic undefined".into(),
        ));
    }
    let sd = var.sqrt();
    let t = mean / (sd / (n as f64).sqrt());
    let df = (n - 1) as f64;
    let tail = student_t_tail(t, df);
    // `tail` is the probability beyond |t| on the side t lies on.
    let p = match (alternative, t < 0.0) {
        (Alternative::Less, true) | (Alternative::Greater, false) => tail,
        (Alternative::Less, false) | (Alternative::Greater, true) => 1.0 - tail,
    };
    Ok(PairedTTest {
        n_pairs: n,
        mean_diff: mean,
        sd_diff: sd,
        t_stat: t,
        df,
        p_one_sided: p,
        alternative,
    })
}

/// Type-7 (linear interpolation) quantile of already sorted samples.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedianIqr {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

pub fn median_iqr(samples: &[f64]) -> Result<MedianIqr> {
    if samples.is_empty() {
        return Err(invalid("median of an empty sample"));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(MedianIqr {
        median: quantile_sorted(&s, 0.5),
        q25: quantile_sorted(&s, 0.25),
        q75: quantile_sorted(&s, 0.75),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_support_is_one() {
        assert_eq!(hypergeom_sf(200, 76, 68, 0).unwrap(), 1.0);
        // n + K - N = 10
        assert_eq!(hypergeom_sf(100, 60, 50, 10).unwrap(), 1.0);
    }

    #[test]
    fn out_of_support_is_rejected() {
        assert!(hypergeom_sf(100, 60, 50, 9).is_err());
        assert!(hypergeom_sf(100, 60, 50, 51).is_err());
        assert!(hypergeom_sf(10, 11, 5, 1).is_err());
    }

    #[test]
    fn pmf_sums_to_one() {
        for &(n_pop, k_pop, draws) in &[(200u64, 76u64, 68u64), (50, 20, 15), (30, 29, 3)] {
            let (lo, hi) = hypergeom_support(n_pop, k_pop, draws).unwrap();
            let s: f64 = (lo..=hi).map(|k| hypergeom_pmf(n_pop, k_pop, draws, k).unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn table_rows() {
        // Exact upper tails for the three reported overlaps.
        let p1 = hypergeom_sf(200, 76, 68, 34).unwrap();
        let p2 = hypergeom_sf(200, 60, 57, 28).unwrap();
        let p3 = hypergeom_sf(200, 71, 57, 40).unwrap();
        assert!((p1 - 0.009_508_471_355_378).abs() < 1e-10, "{p1}");
        assert!((p2 - 0.000_244_807_149_651).abs() < 1e-12, "{p2}");
        assert!(p3 < 1e-4);
    }

    #[test]
    fn t_test_null_and_degenerate() {
        let x = [1.0, 2.0, 3.5, 4.0];
        let r = paired_t(&x, &x, Alternative::Less);
        // identical samples have zero-variance (all-zero) differences
        assert!(matches!(r, Err(LabError::Degenerate(_))));

        let y: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        assert!(matches!(paired_t(&x, &y, Alternative::Less), Err(LabError::Degenerate(_))));
        assert!(paired_t(&[1.0], &[2.0], Alternative::Less).is_err());
        assert!(paired_t(&[1.0, 2.0], &[2.0], Alternative::Less).is_err());
    }

    #[test]
    fn t_test_zero_mean_gives_half() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [2.0, 1.0, 4.0, 3.0];
        let r = paired_t(&x, &y, Alternative::Less).unwrap();
        assert_eq!(r.t_stat, 0.0);
        assert_eq!(r.p_one_sided, 0.5);
    }

    #[test]
    fn t_test_reference_value() {
        let x = [10., 12., 9., 11., 10., 13., 10., 12., 11., 10.];
        let inc = [2., 1., 3., 2., 2., 1., 2., 3., 1., 2.];
        let y: Vec<f64> = x.iter().zip(&inc).map(|(a, b)| a + b).collect();
        let r = paired_t(&x, &y, Alternative::Less).unwrap();
        assert!((r.t_stat + 8.142_857_142_857_142).abs() < 1e-9);
        assert!((r.p_one_sided - 9.605_350_541_137_188e-6).abs() < 1e-10);
    }

    #[test]
    fn median_iqr_examples() {
        let m = median_iqr(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((m.median, m.q25, m.q75), (2.0, 1.5, 2.5));
        let c = median_iqr(&[4.2; 7]).unwrap();
        assert_eq!((c.median, c.q25, c.q75), (4.2, 4.2, 4.2));
        assert!(median_iqr(&[]).is_err());
    }

    proptest! {
        #[test]
        fn sf_monotone_in_k(n_pop in 2u64..120, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let k_pop = (a * n_pop as f64) as u64;
            let draws = (b * n_pop as f64) as u64;
            let (lo, hi) = hypergeom_support(n_pop, k_pop, draws).unwrap();
            let mut prev = 1.0;
            for k in lo..=hi {
                let p = hypergeom_sf(n_pop, k_pop, draws, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&p));
                prop_assert!(p <= prev + 1e-15);
                prev = p;
            }
        }

        #[test]
        fn t_test_antisymmetry(d in proptest::collection::vec(-5.0f64..5.0, 3..12)) {
            let y = vec![0.0; d.len()];
            if let Ok(less) = paired_t(&d, &y, Alternative::Less) {
                let greater = paired_t(&y, &d, Alternative::Greater).unwrap();
                prop_assert_eq!(less.t_stat, -greater.t_stat);
                if less.t_stat != 0.0 {
                    let other = paired_t(&d, &y, Alternative::Greater).unwrap();
                    prop_assert_eq!(less.p_one_sided + other.p_one_sided, 1.0);
                }
            }
        }

        #[test]
        fn quantiles_follow_monotone_maps(s in proptest::collection::vec(-100.0f64..100.0, 1..40)) {
            let m = median_iqr(&s).unwrap();
            prop_assert!(m.q25 <= m.median && m.median <= m.q75);
            let mapped: Vec<f64> = s.iter().map(|v| v * 3.0 + 1.0).collect();
            let mm = median_iqr(&mapped).unwrap();
            prop_assert!((mm.median - (m.median * 3.0 + 1.0)).abs() < 1e-9);
            prop_assert!((mm.q25 - (m.q25 * 3.0 + 1.0)).abs() < 1e-9);
        }
    }
}
