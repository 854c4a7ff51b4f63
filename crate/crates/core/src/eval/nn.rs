use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    /// Position of the candidate in the input sequence.
    pub index: usize,
    pub mse: f64,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Inserts into a list kept sorted by `(mse, index)`, capped at `k`.
fn offer(best: &mut Vec<Neighbor>, k: usize, cand: Neighbor) {
    let pos = best
        .iter()
        .position(|b| cand.mse < b.mse || (cand.mse == b.mse && cand.index < b.index))
        .unwrap_or(best.len());
    if pos < k {
        best.insert(pos, cand);
        best.truncate(k);
    }
}

/// The `k` candidates closest to `query` in mean squared error, nearest
/// first, with ties going to the lower index. Candidates are consumed one at
/// a time, so only `k` results and the current candidate are held in memory.
pub fn nn_search_values<I>(query: &[f64], candidates: I, k: usize) -> Result<Vec<Neighbor>>
where
    I: IntoIterator<Item = Result<Vec<f64>>>,
{
    let mut best = Vec::with_capacity(k + 1);
    let mut seen = 0;
    for (index, cand) in candidates.into_iter().enumerate() {
        let cand = cand?;
        if cand.len() != query.len() {
            return Err(Error::shape(&[query.len()], &[cand.len()]));
        }
        offer(
            &mut best,
            k,
            Neighbor {
                index,
                mse: mse(query, &cand),
            },
        );
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::EmptyCandidates);
    }
    Ok(best)
}

/// [`nn_search_values`] over volumes, which must all share `query`'s grid.
pub fn nn_search<I>(query: &Volume, candidates: I, k: usize) -> Result<Vec<Neighbor>>
where
    I: IntoIterator<Item = Result<Volume>>,
{
    let dims = query.dims();
    let values = candidates.into_iter().map(|v| {
        let v = v?;
        if v.dims() != dims {
            return Err(Error::shape(&dims, &v.dims()));
        }
        Ok(v.to_f64())
    });
    nn_search_values(&query.to_f64(), values, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseRng;
    use proptest::prelude::*;

    fn brute_force(query: &[f64], cands: &[Vec<f64>], k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = cands
            .iter()
            .enumerate()
            .map(|(index, c)| Neighbor {
                index,
                mse: mse(query, c),
            })
            .collect();
        all.sort_by(|a, b| a.mse.total_cmp(&b.mse).then(a.index.cmp(&b.index)));
        all.truncate(k);
        all
    }

    #[test]
    fn self_query_is_exact() {
        let mut rng = NoiseRng::new(1);
        let cands: Vec<Vec<f64>> = (0..5).map(|_| rng.gaussian_vec(27)).collect();
        let got = nn_search_values(&cands[3], cands.iter().cloned().map(Ok), 2).unwrap();
        assert_eq!(got[0], Neighbor { index: 3, mse: 0.0 });
    }

    #[test]
    fn constant_offsets_order_by_square() {
        let q = vec![0.5; 8];
        let cands = [3.0, -1.0, 2.0].map(|c| q.iter().map(|x| x + c).collect::<Vec<f64>>());
        let got = nn_search_values(&q, cands.into_iter().map(Ok), 2).unwrap();
        assert_eq!(
            got,
            vec![Neighbor { index: 1, mse: 1.0 }, Neighbor { index: 2, mse: 4.0 }]
        );
    }

    #[test]
    fn ties_prefer_lower_index() {
        let q = vec![0.0; 4];
        let cands = vec![vec![1.0; 4], vec![-1.0; 4], vec![1.0; 4]];
        let got = nn_search_values(&q, cands.into_iter().map(Ok), 2).unwrap();
        assert_eq!(got.iter().map(|n| n.index).collect::<Vec<_>>(), [0, 1]);
    }

    #[test]
    fn fifty_random_volumes_match_brute_force() {
        let mut rng = NoiseRng::new(8);
        let dims = [8, 8, 8];
        let vols: Vec<Volume> = (0..50)
            .map(|_| Volume::from_f64(dims, [1.0; 3], &rng.gaussian_vec(512)).unwrap())
            .collect();
        let values: Vec<Vec<f64>> = vols.iter().map(|v| v.to_f64()).collect();
        for q in 0..50 {
            let got = nn_search(&vols[q], vols.iter().cloned().map(Ok), 2).unwrap();
            assert_eq!(got, brute_force(&values[q], &values, 2));
            assert_eq!(got[0], Neighbor { index: q, mse: 0.0 });
        }
    }

    #[test]
    fn errors() {
        let q = Volume::from_f64([2, 2, 2], [1.0; 3], &[0.0; 8]).unwrap();
        let other = Volume::from_f64([2, 2, 1], [1.0; 3], &[0.0; 4]).unwrap();
        assert!(matches!(
            nn_search(&q, vec![Ok(other)], 2),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(nn_search(&q, Vec::new(), 2), Err(Error::EmptyCandidates)));
    }

    proptest! {
        #[test]
        fn streaming_equals_sort(seed in 0u64..500, n in 1usize..30, k in 1usize..5) {
            let mut rng = NoiseRng::new(seed);
            let q: Vec<f64> = (0..6).map(|_| rng.below(3) as f64).collect();
            let cands: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| rng.below(3) as f64).collect()).collect();
            let got = nn_search_values(&q, cands.iter().cloned().map(Ok), k).unwrap();
            prop_assert_eq!(got, brute_force(&q, &cands, k));
        }
    }
}
