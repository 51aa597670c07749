//! Mechanistic measurements on cartridges: normalized singular-value spectra
//! per role, rotation between checkpoints and similarity between cartridges.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cartridge::{Cartridge, Role};
use crate::distill::Checkpoint;
use crate::error::{invalid, Result};
use crate::numerics::{cosine_similarity, svd_values, Matrix, Real};
use crate::stats::median_iqr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub role: Role,
    pub k: usize,
    /// Across-layer median of the normalized top-`k` singular values.
    pub median: Vec<f64>,
    pub q25: Vec<f64>,
    pub q75: Vec<f64>,
    /// Across-layer mean, for plots that average layers instead.
    pub mean: Vec<f64>,
    /// `[L][k]` values normalized by each layer's largest singular value.
    pub per_layer: Vec<Vec<f64>>,
}

/// The `role` tensor of one layer as an `[h·p × d_head]` matrix.
pub fn flattened_layer<T: Real>(cartridge: &Cartridge<T>, layer: usize, role: Role) -> Result<Matrix> {
    let (_, h, p, dh) = cartridge.shape();
    let data = cartridge.layer_role(layer, role).iter().map(|x| x.as_f64()).collect();
    Matrix::new(h * p, dh, data)
}

/// Top-`k` singular values of every layer's flattened `role` tensor, each
/// divided by the layer's largest, aggregated across layers.
pub fn spectral_summary<T: Real>(cartridge: &Cartridge<T>, role: Role, k: usize) -> Result<SpectralSummary> {
    let (layers, _, _, dh) = cartridge.shape();
    if k == 0 || k > dh {
        return Err(invalid(format!("k = {k} must lie in 1..={dh}")));
    }
    let mut per_layer = Vec::with_capacity(layers);
    for l in 0..layers {
        let s = svd_values(&flattened_layer(cartridge, l, role)?)?;
        let top = s[0];
        if top == 0.0 {
            return Err(crate::LabError::Degenerate(format!(
                "layer {l} {role} tensor is all zeros"
            )));
        }
        per_layer.push(s[..k].iter().map(|v| v / top).collect::<Vec<f64>>());
    }
    let mut median = Vec::with_capacity(k);
    let mut q25 = Vec::with_capacity(k);
    let mut q75 = Vec::with_capacity(k);
    let mut mean = Vec::with_capacity(k);
    for i in 0..k {
        let col: Vec<f64> = per_layer.iter().map(|row| row[i]).collect();
        let m = median_iqr(&col)?;
        median.push(m.median);
        q25.push(m.q25);
        q75.push(m.q75);
        mean.push(col.iter().sum::<f64>() / col.len() as f64);
    }
    Ok(SpectralSummary {
        role,
        k,
        median,
        q25,
        q75,
        mean,
        per_layer,
    })
}

/// L2 distance between two summaries' median curves.
pub fn median_shift(a: &SpectralSummary, b: &SpectralSummary) -> Result<f64> {
    if a.k != b.k {
        return Err(invalid("spectral summaries have different k"));
    }
    Ok(a.median
        .iter()
        .zip(&b.median)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Cosines between corresponding `d_head` vectors of one layer and role,
/// ordered by `(head, slot)`.
pub fn vector_cosines<T: Real>(a: &Cartridge<T>, b: &Cartridge<T>, layer: usize, role: Role) -> Result<Vec<f64>> {
    let (_, _, _, dh) = a.shape();
    a.layer_role(layer, role)
        .chunks_exact(dh)
        .zip(b.layer_role(layer, role).chunks_exact(dh))
        .map(|(x, y)| cosine_similarity(x, y))
        .collect()
}

fn check_same_shape<T: Real>(a: &Cartridge<T>, b: &Cartridge<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!(
            "cartridge shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationRow {
    pub step_from: usize,
    pub step_to: usize,
    pub layer: usize,
    pub role: Role,
    pub mean_cosine: f64,
    pub mean_rotation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRotationRow {
    pub step_from: usize,
    pub step_to: usize,
    pub layer: usize,
    pub role: Role,
    pub head: usize,
    pub slot: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RotationSeries {
    pub rows: Vec<RotationRow>,
    pub per_slot: Vec<SlotRotationRow>,
}

impl RotationSeries {
    /// Mean rotation of `role` over all checkpoint pairs and layers.
    pub fn mean_rotation(&self, role: Role) -> f64 {
        let r: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.role == role)
            .map(|r| r.mean_rotation)
            .collect();
        r.iter().sum::<f64>() / r.len().max(1) as f64
    }
}

/// Per consecutive checkpoint pair, layer and role: mean cosine over
/// `(head, slot)` and the matching rotation `1 - cosine`.
pub fn rotation_series<T: Real>(checkpoints: &[Checkpoint<T>]) -> Result<RotationSeries> {
    if checkpoints.len() < 2 {
        return Err(invalid("rotation series needs at least two checkpoints"));
    }
    let (layers, _, p, _) = checkpoints[0].cartridge.shape();
    let mut out = RotationSeries::default();
    for pair in checkpoints.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        check_same_shape(&a.cartridge, &b.cartridge)?;
        for layer in 0..layers {
            for role in Role::BOTH {
                let cos = vector_cosines(&a.cartridge, &b.cartridge, layer, role)?;
                let mean = cos.iter().sum::<f64>() / cos.len() as f64;
                out.rows.push(RotationRow {
                    step_from: a.step,
                    step_to: b.step,
                    layer,
                    role,
                    mean_cosine: mean,
                    mean_rotation: 1.0 - mean,
                });
                out.per_slot.extend(cos.iter().enumerate().map(|(i, &c)| SlotRotationRow {
                    step_from: a.step,
                    step_to: b.step,
                    layer,
                    role,
                    head: i / p,
                    slot: i % p,
                    cosine: c,
                }));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub layer: usize,
    pub role: Role,
    pub mean_cosine: f64,
}

/// Mean cosine over `(head, slot)` between two cartridges, per layer and role.
pub fn cross_cartridge_similarity<T: Real>(a: &Cartridge<T>, b: &Cartridge<T>) -> Result<Vec<SimilarityRow>> {
    check_same_shape(a, b)?;
    let (layers, ..) = a.shape();
    let mut rows = Vec::with_capacity(layers * 2);
    for layer in 0..layers {
        for role in Role::BOTH {
            let cos = vector_cosines(a, b, layer, role)?;
            rows.push(SimilarityRow {
                layer,
                role,
                mean_cosine: cos.iter().sum::<f64>() / cos.len() as f64,
            });
        }
    }
    Ok(rows)
}

fn write_rows<S: Serialize>(rows: impl IntoIterator<Item = S>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SpectrumPoint {
    layer: usize,
    role: Role,
    index: usize,
    value: f64,
}

#[derive(Serialize)]
struct SummaryPoint {
    role: Role,
    index: usize,
    median: f64,
    q25: f64,
    q75: f64,
    mean: f64,
}

/// `spectra.csv` (layer, role, index, value).
pub fn write_spectra_csv(summaries: &[SpectralSummary], path: &Path) -> Result<()> {
    write_rows(
        summaries.iter().flat_map(|s| {
            s.per_layer.iter().enumerate().flat_map(move |(layer, vals)| {
                vals.iter().enumerate().map(move |(index, &value)| SpectrumPoint {
                    layer,
                    role: s.role,
                    index,
                    value,
                })
            })
        }),
        path,
    )
}

/// `spectra_summary.csv` (role, index, median, q25, q75, mean).
pub fn write_spectra_summary_csv(summaries: &[SpectralSummary], path: &Path) -> Result<()> {
    write_rows(
        summaries.iter().flat_map(|s| {
            (0..s.k).map(move |index| SummaryPoint {
                role: s.role,
                index,
                median: s.median[index],
                q25: s.q25[index],
                q75: s.q75[index],
                mean: s.mean[index],
            })
        }),
        path,
    )
}

#[derive(Serialize)]
struct RotationCsvRow {
    step_from: usize,
    step_to: usize,
    layer: usize,
    role: Role,
    mean_cosine: f64,
}

/// `rotations.csv` (step_from, step_to, layer, role, mean_cosine).
pub fn write_rotations_csv(series: &RotationSeries, path: &Path) -> Result<()> {
    write_rows(
        series.rows.iter().map(|r| RotationCsvRow {
            step_from: r.step_from,
            step_to: r.step_to,
            layer: r.layer,
            role: r.role,
            mean_cosine: r.mean_cosine,
        }),
        path,
    )
}

pub fn write_slot_rotations_csv(series: &RotationSeries, path: &Path) -> Result<()> {
    write_rows(&series.per_slot, path)
}

/// `similarity.csv` (layer, role, mean_cosine).
pub fn write_similarity_csv(rows: &[SimilarityRow], path: &Path) -> Result<()> {
    write_rows(rows, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cartridge::{init_rvi, swap_keys};
    use crate::model::{KvCache, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig::new(2, 2, 4, 16, 64).unwrap()
    }

    #[test]
    fn summary_is_normalized_and_ordered() {
        let c = init_rvi::<f64>(&cfg(), 6, 1).unwrap();
        for role in Role::BOTH {
            let s = spectral_summary(&c, role, 4).unwrap();
            assert_eq!(s.median[0], 1.0);
            for i in 0..4 {
                assert!(s.q25[i] <= s.median[i] && s.median[i] <= s.q75[i]);
                if i > 0 {
                    assert!(s.median[i] <= s.median[i - 1] + 1e-12);
                }
            }
        }
        assert!(spectral_summary(&c, Role::Keys, 5).is_err());
        assert!(spectral_summary(&c, Role::Keys, 0).is_err());
    }

    #[test]
    fn self_pair_and_negated_values() {
        let c = init_rvi::<f64>(&cfg(), 3, 2).unwrap();
        let mut neg = c.clone();
        let (_, values) = neg.tensors_mut();
        values.iter_mut().for_each(|v| *v = -*v);
        let cps = vec![
            Checkpoint { step: 0, cartridge: c.clone() },
            Checkpoint { step: 1, cartridge: c.clone() },
            Checkpoint { step: 2, cartridge: neg },
        ];
        let r = rotation_series(&cps).unwrap();
        for row in &r.rows {
            let want = match (row.step_from, row.role) {
                (0, _) | (1, Role::Keys) => 1.0,
                (1, Role::Values) => -1.0,
                _ => unreachable!(),
            };
            assert!((row.mean_cosine - want).abs() < 1e-12, "{row:?}");
        }
        assert!(rotation_series(&cps[..1]).is_err());
    }

    #[test]
    fn shape_drift_is_rejected() {
        let a = init_rvi::<f64>(&cfg(), 3, 2).unwrap();
        let b = init_rvi::<f64>(&cfg(), 4, 2).unwrap();
        let cps = vec![
            Checkpoint { step: 0, cartridge: a.clone() },
            Checkpoint { step: 1, cartridge: b.clone() },
        ];
        assert!(rotation_series(&cps).is_err());
        assert!(cross_cartridge_similarity(&a, &b).is_err());
    }

    #[test]
    fn swapped_keys_share_key_map() {
        let a = init_rvi::<f64>(&cfg(), 5, 3).unwrap();
        let b = init_rvi::<f64>(&cfg(), 5, 4).unwrap();
        let ab = swap_keys(&a, &b).unwrap();
        let direct = cross_cartridge_similarity(&a, &b).unwrap();
        for row in cross_cartridge_similarity(&ab, &b).unwrap() {
            match row.role {
                Role::Keys => assert!((row.mean_cosine - 1.0).abs() < 1e-12),
                Role::Values => {
                    let d = direct.iter().find(|r| r.layer == row.layer && r.role == Role::Values).unwrap();
                    assert_eq!(d.mean_cosine, row.mean_cosine);
                }
            }
        }
    }

    #[test]
    fn orthonormal_columns_give_flat_spectrum() {
        // h·p = 4 rows, d_head = 4 columns; each layer's flattened matrix is a
        // signed permutation.
        let c = cfg();
        let mut keys = vec![0.0f64; c.prefix_len(2)];
        for l in 0..2 {
            for r in 0..4 {
                keys[l * 16 + r * 4 + (r + l) % 4] = if r % 2 == 0 { 1.0 } else { -1.0 };
            }
        }
        let values = keys.clone();
        let kv = KvCache::from_tensors(2, 2, 4, 2, keys, values).unwrap();
        let base = init_rvi::<f64>(&c, 2, 0).unwrap();
        let cart = Cartridge::new(kv, base.meta().clone()).unwrap();
        let s = spectral_summary(&cart, Role::Keys, 4).unwrap();
        for i in 0..4 {
            assert!((s.median[i] - 1.0).abs() < 1e-12);
            assert!((s.q75[i] - s.q25[i]).abs() < 1e-12);
        }
    }
}
