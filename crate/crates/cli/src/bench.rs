//! Wall-clock timing of generation per DDIM step count.

use std::time::Instant;

use serde::Serialize;
use voxdiff::denoiser::Denoiser;
use voxdiff::sampler::{generate_values, SamplerConfig};
use voxdiff::{NoiseSchedule, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub steps: usize,
    /// Median over repetitions of the time to generate `batch` samples.
    pub median_s: f64,
    pub mmss: String,
    pub reps: Vec<f64>,
}

/// `m:ss`, rounding to the nearest second.
pub fn format_mmss(seconds: f64) -> String {
    let total = seconds.max(0.0).round() as u64;
    format!("{}:{:02}", total / 60, total % 60)
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Times `batch` sequential generations for every entry of `steps`,
/// `reps` times each. Runs strictly serially so cells do not compete.
pub fn run_bench(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    shape: [usize; 3],
    steps: &[usize],
    reps: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(steps.len());
    for &s in steps {
        let mut times = Vec::with_capacity(reps);
        for r in 0..reps {
            let start = Instant::now();
            for b in 0..batch {
                let cfg = SamplerConfig {
                    steps: s,
                    eta: 0.0,
                    seed: seed + (r * batch + b) as u64,
                    shape,
                };
                std::hint::black_box(generate_values(denoiser, schedule, &cfg)?);
            }
            times.push(start.elapsed().as_secs_f64());
        }
        let median_s = median(&times);
        rows.push(BenchRow {
            steps: s,
            median_s,
            mmss: format_mmss(median_s),
            reps: times,
        });
    }
    Ok(rows)
}

/// Plain-text table in the style of an inference-time table.
pub fn format_table(rows: &[BenchRow]) -> String {
    let mut out = format!("{:>6}  {:>8}  {:>10}\n", "Steps", "Time", "Seconds");
    for r in rows {
        out.push_str(&format!("{:>6}  {:>8}  {:>10.4}\n", r.steps, r.mmss, r.median_s));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use voxdiff::denoiser::GaussianOracle;
    use voxdiff::PredictionKind;

    #[test]
    fn mmss_matches_table_notation() {
        assert_eq!(format_mmss(6.0), "0:06");
        assert_eq!(format_mmss(92.4), "1:32");
        assert_eq!(format_mmss(5784.0), "96:24");
        assert_eq!(format_mmss(59.6), "1:00");
    }

    #[test]
    fn median_rule() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn one_row_per_step_count() {
        let s = NoiseSchedule::default();
        let o = GaussianOracle::constant(0.0, 1.0, s.clone(), PredictionKind::Velocity);
        let rows = run_bench(&o, &s, [4, 4, 4], &[2, 4, 8], 3, 1, 0).unwrap();
        assert_eq!(rows.iter().map(|r| r.steps).collect::<Vec<_>>(), [2, 4, 8]);
        for r in &rows {
            assert_eq!(r.reps.len(), 3);
            assert_eq!(r.median_s, median(&r.reps));
        }
    }
}
