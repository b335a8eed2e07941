use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Key steps of one granularity. Indices are 1-based future steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyStepGroup {
    pub granularity: usize,
    pub indices: Vec<usize>,
    pub covered_until: usize,
    /// Finer granularity whose trajectory supplies the steps past `covered_until`.
    pub inherits_tail_from: Option<usize>,
}

impl KeyStepGroup {
    /// Position of each key inside the fine key vector.
    pub fn fine_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().map(|i| (i - 1) / 2)
    }
}

/// Smallest N with `1 + 2N >= t_f`.
pub fn fine_key_count(t_f: usize) -> usize {
    t_f / 2
}

/// Build the doubling chain of key groups for horizon `t_f`.
/// `granularities` must be exactly `{2, 4, .., L_max}` (any order).
pub fn build_key_groups(t_f: usize, granularities: &[usize]) -> Result<Vec<KeyStepGroup>> {
    if t_f < 2 {
        return Err(Error::Config(format!("horizon must be at least 2, got {t_f}")));
    }
    let mut chain = granularities.to_vec();
    chain.sort_unstable();
    let is_chain = !chain.is_empty() && chain.iter().enumerate().all(|(i, &l)| l == 2 << i);
    if !is_chain {
        return Err(Error::Config(format!(
            "granularities must form a doubling chain starting at 2, got {granularities:?}"
        )));
    }
    let n = fine_key_count(t_f);
    let last = 1 + 2 * n;
    let mut groups: Vec<KeyStepGroup> = Vec::with_capacity(chain.len());
    for &l in &chain {
        let indices: Vec<usize> = match groups.last() {
            None => (0..=n).map(|k| 1 + 2 * k).collect(),
            Some(finer) => finer.indices.iter().step_by(2).copied().collect(),
        };
        if indices.len() < 2 {
            return Err(Error::Config(format!(
                "granularity {l} leaves fewer than two key steps for horizon {t_f}"
            )));
        }
        let covered_until = *indices.last().expect("non-empty");
        let inherits_tail_from = (covered_until < last).then_some(l / 2);
        groups.push(KeyStepGroup {
            granularity: l,
            indices,
            covered_until,
            inherits_tail_from,
        });
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_step_chain() {
        let g = build_key_groups(12, &[2, 4, 8]).unwrap();
        assert_eq!(g[0].indices, vec![1, 3, 5, 7, 9, 11, 13]);
        assert_eq!(g[1].indices, vec![1, 5, 9, 13]);
        assert_eq!(g[2].indices, vec![1, 9]);
        assert_eq!(g[0].inherits_tail_from, None);
        assert_eq!(g[1].inherits_tail_from, None);
        assert_eq!(g[2].inherits_tail_from, Some(4));
        assert_eq!(g[2].covered_until, 9);
    }

    #[test]
    fn short_horizons() {
        let g = build_key_groups(5, &[2]).unwrap();
        assert_eq!(g[0].indices, vec![1, 3, 5]);
        let g = build_key_groups(2, &[2]).unwrap();
        assert_eq!(g[0].indices, vec![1, 3]);
    }

    #[test]
    fn fine_count_matches_bound_by_search() {
        // N is the unique value with 1 + 2(N-1) < t_f <= 1 + 2N
        for t_f in 2..200 {
            let n = (1..t_f).find(|&n| 1 + 2 * (n - 1) < t_f && t_f <= 1 + 2 * n).unwrap();
            assert_eq!(fine_key_count(t_f), n, "t_f = {t_f}");
        }
    }

    #[test]
    fn rejects_bad_chains() {
        assert!(build_key_groups(1, &[2]).is_err());
        assert!(build_key_groups(12, &[4, 8]).is_err());
        assert!(build_key_groups(12, &[2, 8]).is_err());
        assert!(build_key_groups(12, &[2, 3]).is_err());
        assert!(build_key_groups(12, &[]).is_err());
        assert!(build_key_groups(4, &[2, 4, 8]).is_err());
    }

    #[test]
    fn coarse_groups_downsample_finer() {
        for t_f in 2..40 {
            let Ok(groups) = build_key_groups(t_f, &[2, 4, 8]) else { continue };
            for w in groups.windows(2) {
                let down: Vec<usize> = w[0].indices.iter().step_by(2).copied().collect();
                assert_eq!(w[1].indices, down);
                assert!(w[1].indices.windows(2).all(|p| p[1] - p[0] == w[1].granularity));
            }
        }
    }
}
