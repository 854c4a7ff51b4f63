use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::regional::{RegionalVolumes, Structure};
use crate::error::{Error, Result};
use crate::rng::NoiseRng;

/// Below this sample size the asymptotic p-value is unreliable and
/// results are flagged.
pub const SMALL_SAMPLE: usize = 30;

/// Largest gap between the two empirical CDFs. Both inputs must be sorted
/// ascending.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    debug_assert!(a.windows(2).all(|w| w[0] <= w[1]), "first sample not sorted");
    debug_assert!(b.windows(2).all(|w| w[0] <= w[1]), "second sample not sorted");
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        // Step past every copy of the smallest remaining value in both
        // samples before comparing, so ties do not open a false gap.
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(d)
}

/// Kolmogorov survival function `Q(l) = P(K > l)`.
///
/// For `l < 1.18` the theta-function form
/// `1 - sqrt(2 pi)/l * sum exp(-(2k-1)^2 pi^2 / (8 l^2))` converges fast;
/// above it the alternating series `2 sum (-1)^(k-1) exp(-2 k^2 l^2)` does.
/// Terms are summed until they stop changing the total.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let q = if lambda < 1.18 {
        let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let mut sum = 0.0;
        for k in 1..200 {
            let term = (c * ((2 * k - 1) as f64).powi(2)).exp();
            sum += term;
            if term <= f64::EPSILON * sum {
                break;
            }
        }
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * sum
    } else {
        let mut sum = 0.0;
        let mut sign = 1.0;
        for k in 1..200 {
            let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
            sum += sign * term;
            if term <= f64::EPSILON * sum.abs() {
                break;
            }
            sign = -sign;
        }
        2.0 * sum
    };
    q.clamp(0.0, 1.0)
}

/// Asymptotic two-sided p-value `Q(sqrt(nm/(n+m)) * D)`.
pub fn ks_pvalue(d: f64, n: usize, m: usize) -> f64 {
    assert!(n >= 1 && m >= 1, "sample sizes must be positive");
    let (n, m) = (n as f64, m as f64);
    kolmogorov_q((n * m / (n + m)).sqrt() * d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsTest {
    pub d: f64,
    pub p: f64,
    /// Set when either sample is smaller than [`SMALL_SAMPLE`].
    pub small_sample: bool,
}

/// Sorts copies of both samples and runs the test.
pub fn ks_test(a: &[f64], b: &[f64]) -> Result<KsTest> {
    let sorted = |x: &[f64]| {
        let mut v = x.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let d = ks_statistic(&sorted(a), &sorted(b))?;
    Ok(KsTest {
        d,
        p: ks_pvalue(d, a.len(), b.len()),
        small_sample: a.len().min(b.len()) < SMALL_SAMPLE,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationConfig {
    pub reps: usize,
    pub subsample: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        Self {
            reps: 1000,
            subsample: 1000,
            alpha: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureResult {
    pub structure: Structure,
    /// Fraction of repetitions with `p >= alpha`.
    pub fraction: f64,
    pub median_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsReport {
    pub reps: usize,
    pub subsample: usize,
    pub alpha: f64,
    pub seed: u64,
    pub n_real: usize,
    pub n_synth: usize,
    pub small_sample: bool,
    pub structures: Vec<StructureResult>,
}

impl KsReport {
    pub fn get(&self, s: Structure) -> Option<&StructureResult> {
        self.structures.iter().find(|r| r.structure == s)
    }

    /// `structure,fraction,median_p` lines under a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("structure,fraction,median_p\n");
        for r in &self.structures {
            out.push_str(&format!("{},{:.6},{:.6e}\n", r.structure, r.fraction, r.median_p));
        }
        out
    }
}

/// Repeated KS testing of a real subsample against the full synthetic set.
///
/// Each repetition draws `subsample` real volumes without replacement
/// (shared by all six structures) and tests each structure's values against
/// every synthetic volume. Repetition `r` draws from its own stream derived
/// from `(seed, r)`, so the report does not depend on thread scheduling.
pub fn permutation_protocol(
    real: &[RegionalVolumes],
    synth: &[RegionalVolumes],
    cfg: &PermutationConfig,
) -> Result<KsReport> {
    if cfg.reps == 0 || cfg.subsample == 0 || !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("bad permutation settings {cfg:?}")));
    }
    if real.len() < cfg.subsample {
        return Err(Error::InsufficientRealData {
            needed: cfg.subsample,
            got: real.len(),
        });
    }
    if synth.is_empty() {
        return Err(Error::EmptySample);
    }
    let column = |set: &[RegionalVolumes], s: Structure| -> Vec<f64> { set.iter().map(|v| v.get(s)).collect() };
    let real_cols: Vec<Vec<f64>> = Structure::ALL.iter().map(|&s| column(real, s)).collect();
    let synth_sorted: Vec<Vec<f64>> = Structure::ALL
        .iter()
        .map(|&s| {
            let mut v = column(synth, s);
            v.sort_by(f64::total_cmp);
            v
        })
        .collect();

    let pvalues: Vec<Result<[f64; 6]>> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = NoiseRng::derive(cfg.seed, r as u64);
            let pick = rng.sample_without_replacement(real.len(), cfg.subsample);
            let mut out = [0.0; 6];
            let mut sample = vec![0.0; cfg.subsample];
            for (k, p) in out.iter_mut().enumerate() {
                for (dst, &i) in sample.iter_mut().zip(&pick) {
                    *dst = real_cols[k][i];
                }
                sample.sort_by(f64::total_cmp);
                let d = ks_statistic(&sample, &synth_sorted[k])?;
                *p = ks_pvalue(d, cfg.subsample, synth.len());
            }
            Ok(out)
        })
        .collect();
    let pvalues = pvalues.into_iter().collect::<Result<Vec<_>>>()?;

    let structures = Structure::ALL
        .iter()
        .enumerate()
        .map(|(k, &structure)| {
            let mut ps: Vec<f64> = pvalues.iter().map(|p| p[k]).collect();
            let kept = ps.iter().filter(|&&p| p >= cfg.alpha).count();
            ps.sort_by(f64::total_cmp);
            let mid = ps.len() / 2;
            let median_p = if ps.len() % 2 == 1 {
                ps[mid]
            } else {
                0.5 * (ps[mid - 1] + ps[mid])
            };
            StructureResult {
                structure,
                fraction: kept as f64 / cfg.reps as f64,
                median_p,
            }
        })
        .collect();

    Ok(KsReport {
        reps: cfg.reps,
        subsample: cfg.subsample,
        alpha: cfg.alpha,
        seed: cfg.seed,
        n_real: real.len(),
        n_synth: synth.len(),
        small_sample: cfg.subsample.min(synth.len()) < SMALL_SAMPLE,
        structures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Evaluates both ECDFs at every pooled point by counting.
    fn brute_force_d(a: &[f64], b: &[f64]) -> f64 {
        let ecdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        a.iter()
            .chain(b)
            .map(|&x| (ecdf(a, x) - ecdf(b, x)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn statistic_examples() {
        assert_eq!(ks_statistic(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 1.0);
        let a = [1.0, 2.0, 3.0];
        let b = [1.5, 2.5];
        let d = ks_statistic(&a, &b).unwrap();
        assert!((d - brute_force_d(&a, &b)).abs() < 1e-15);
        assert!((d - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(ks_statistic(&[], &[1.0]), Err(Error::EmptySample)));
    }

    #[test]
    fn statistic_with_heavy_ties() {
        let a = [0.0, 0.0, 1.0, 1.0, 1.0];
        let b = [0.0, 1.0, 1.0, 2.0];
        let d = ks_statistic(&a, &b).unwrap();
        assert!((d - brute_force_d(&a, &b)).abs() < 1e-15);
    }

    /// Alternating series truncated at 20 terms.
    fn q_series20(l: f64) -> f64 {
        2.0 * (1..=20)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (k * k) as f64 * l * l).exp()
            })
            .sum::<f64>()
    }

    #[test]
    fn q_at_one() {
        let q = kolmogorov_q(1.0);
        assert!((q - q_series20(1.0)).abs() < 1e-14);
        assert!((q - 0.269999671677355).abs() < 1e-12);
        assert!((ks_pvalue(1.0 / (500.0f64).sqrt(), 1000, 1000) - q).abs() < 1e-12);
    }

    #[test]
    fn q_branches_agree_with_series() {
        for l in [0.5, 0.8, 1.0, 1.17, 1.19, 1.5, 2.0, 3.0] {
            assert!((kolmogorov_q(l) - q_series20(l)).abs() < 1e-12, "l={l}");
        }
        assert_eq!(kolmogorov_q(0.0), 1.0);
        assert!(kolmogorov_q(0.05) > 1.0 - 1e-15);
    }

    #[test]
    fn pvalue_extremes() {
        assert_eq!(ks_pvalue(0.0, 10, 10), 1.0);
        assert!(ks_pvalue(1.0, 1000, 1000) < 1e-12);
        assert!(ks_test(&[1.0, 2.0], &[1.5]).unwrap().small_sample);
    }

    fn gaussian_set(n: usize, shift: f64, seed: u64, prefix: &str) -> Vec<RegionalVolumes> {
        let mut rng = NoiseRng::new(seed);
        (0..n)
            .map(|i| {
                let v: [f64; 6] = std::array::from_fn(|k| 1000.0 * (k + 1) as f64 + 50.0 * (rng.gaussian() + shift));
                RegionalVolumes::new(format!("{prefix}{i}"), v).unwrap()
            })
            .collect()
    }

    #[test]
    fn separated_sets_never_pass() {
        let real = gaussian_set(300, 0.0, 1, "r");
        let synth = gaussian_set(100, 5.0, 2, "s");
        let cfg = PermutationConfig {
            reps: 50,
            subsample: 100,
            alpha: 0.05,
            seed: 3,
        };
        let report = permutation_protocol(&real, &synth, &cfg).unwrap();
        assert_eq!(report.structures.len(), 6);
        for r in &report.structures {
            assert_eq!(r.fraction, 0.0);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let real = gaussian_set(400, 0.0, 4, "r");
        let synth = gaussian_set(200, 0.0, 5, "s");
        let cfg = PermutationConfig {
            reps: 40,
            subsample: 150,
            alpha: 0.05,
            seed: 6,
        };
        let a = permutation_protocol(&real, &synth, &cfg).unwrap();
        let b = permutation_protocol(&real, &synth, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.structures.iter().all(|r| (0.0..=1.0).contains(&r.fraction)));
    }

    #[test]
    fn protocol_errors() {
        let real = gaussian_set(10, 0.0, 1, "r");
        let synth = gaussian_set(10, 0.0, 2, "s");
        let cfg = PermutationConfig {
            reps: 5,
            subsample: 20,
            alpha: 0.05,
            seed: 0,
        };
        assert!(matches!(
            permutation_protocol(&real, &synth, &cfg),
            Err(Error::InsufficientRealData { needed: 20, got: 10 })
        ));
        let cfg = PermutationConfig { subsample: 5, ..cfg };
        assert!(matches!(
            permutation_protocol(&real, &[], &cfg),
            Err(Error::EmptySample)
        ));
    }

    proptest! {
        #[test]
        fn statistic_matches_brute_force(seed in 0u64..2000, n in 1usize..40, m in 1usize..40) {
            let mut rng = NoiseRng::new(seed);
            // Rounded values so ties occur.
            let mut a: Vec<f64> = (0..n).map(|_| (rng.gaussian() * 4.0).round()).collect();
            let mut b: Vec<f64> = (0..m).map(|_| (rng.gaussian() * 4.0 + 0.5).round()).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            let d = ks_statistic(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!((d - brute_force_d(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn statistic_invariant_under_monotone_maps(seed in 0u64..1000) {
            let mut rng = NoiseRng::new(seed);
            let mut a = rng.gaussian_vec(25);
            let mut b = rng.gaussian_vec(17);
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            let f = |x: &f64| (x * 0.7).exp() * 3.0 - 1.0;
            let fa: Vec<f64> = a.iter().map(f).collect();
            let fb: Vec<f64> = b.iter().map(f).collect();
            prop_assert_eq!(ks_statistic(&a, &b).unwrap(), ks_statistic(&fa, &fb).unwrap());
        }
    }
}
