use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cartridge::sci_sequence;
use crate::error::{invalid, Result};
use crate::Token;

/// Distinct `n`-grams over the number of `n`-token windows.
pub fn ngram_diversity(tokens: &[Token], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(invalid("n-gram order must be >= 1"));
    }
    if tokens.len() < n {
        return Err(invalid(format!(
            "sequence of {} tokens is shorter than n = {n}",
            tokens.len()
        )));
    }
    let windows = tokens.len() - n + 1;
    let distinct: HashSet<&[Token]> = tokens.windows(n).collect();
    Ok(distinct.len() as f64 / windows as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub chunk_size: usize,
    pub mean_diversity: f64,
    pub seeds: usize,
}

/// Mean `n`-gram diversity of sampled-chunk initializer sequences of length
/// `p`, one row per chunk size.
pub fn diversity_sweep(
    corpus: &[Token],
    p: usize,
    chunk_sizes: &[usize],
    seeds: &[u64],
    n: usize,
) -> Result<Vec<DiversityRow>> {
    if seeds.is_empty() {
        return Err(invalid("diversity sweep needs at least one seed"));
    }
    chunk_sizes
        .iter()
        .map(|&c| {
            let mut sum = 0.0;
            for &seed in seeds {
                let s = sci_sequence(corpus, p, c, seed, false)?;
                sum += ngram_diversity(&s.tokens, n)?;
            }
            Ok(DiversityRow {
                chunk_size: c,
                mean_diversity: sum / seeds.len() as f64,
                seeds: seeds.len(),
            })
        })
        .collect()
}

pub fn write_diversity_csv(rows: &[DiversityRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(ngram_diversity(&[5, 5, 5, 5], 2).unwrap(), 1.0 / 3.0);
        assert_eq!(ngram_diversity(&[1, 2, 3, 4], 2).unwrap(), 1.0);
        assert!(ngram_diversity(&[1, 2], 3).is_err());
        assert!(ngram_diversity(&[1, 2], 0).is_err());
    }

    #[test]
    fn sweep_shape() {
        let corpus: Vec<Token> = (0..500).map(|i| (i * 7 % 31) as Token).collect();
        let rows = diversity_sweep(&corpus, 64, &[2, 4, 8, 16, 32, 64], &[1, 2, 3], 3).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.mean_diversity > 0.0 && r.mean_diversity <= 1.0));
    }
}
