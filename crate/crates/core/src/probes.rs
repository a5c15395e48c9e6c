//! Representation-geometry probes: value-span effective dimension, prefix
//! residual energy outside the base value subspace, and last-layer effective
//! rank with cumulative spectra.

use crate::adapters::AdaptedModel;
use crate::linalg::{svd, Matrix};
use crate::model::MaskKind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("{what} is identically zero; the probe is undefined")]
    ZeroMatrix { what: &'static str },
    #[error("requested K = {k} exceeds rank {rank} of the value matrix")]
    KTooLarge { k: usize, rank: usize },
    #[error("evaluation batch is empty")]
    EmptyBatch,
    #[error("model error: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("adapter error: {0}")]
    Adapter(#[from] crate::adapters::AdapterError),
}

/// Slack when comparing cumulative masses to the threshold, so that exact
/// ties (e.g. a flat spectrum hitting 0.9 on the nose) are not lost to
/// rounding in the normalization.
const CUM_TIE_TOL: f64 = 1e-12;

/// Normalized cumulative squared-singular-value masses with the smallest
/// index reaching the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    /// Non-decreasing, ends at 1.
    pub cumulative: Vec<f64>,
    /// 1-indexed smallest k whose cumulative mass reaches the threshold.
    pub effective_k: usize,
    pub threshold: f64,
}

impl SpectrumSummary {
    /// Summarize a sequence of per-direction masses (already >= 0, summing
    /// to anything positive; they are normalized here).
    fn from_masses(masses: &[f64], threshold: f64) -> Self {
        let total: f64 = masses.iter().sum();
        assert!(total > 0.0, "spectrum has no mass");
        let mut cumulative = Vec::with_capacity(masses.len());
        let mut acc = 0.0;
        for &m in masses {
            acc += m / total;
            cumulative.push(acc);
        }
        if let Some(last) = cumulative.last_mut() {
            // Guard the "ends at 1" invariant against rounding drift.
            debug_assert!((*last - 1.0).abs() <= 1e-10);
            *last = 1.0;
        }
        let effective_k = cumulative
            .iter()
            .position(|&c| c >= threshold - CUM_TIE_TOL)
            .map(|i| i + 1)
            .unwrap_or(cumulative.len());
        Self { cumulative, effective_k, threshold }
    }
}

/// Effective dimension of a value matrix: smallest K whose top-K squared
/// singular values hold `threshold` of the total variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueDimReport {
    pub spectrum: SpectrumSummary,
    /// effective_k / d_v.
    pub ratio: f64,
}

pub fn value_effective_dimension(v: &Matrix, threshold: f64) -> Result<ValueDimReport, ProbeError> {
    if v.frob_norm() == 0.0 {
        return Err(ProbeError::ZeroMatrix { what: "value matrix" });
    }
    let s = svd(v).expect("svd convergence").s;
    let masses: Vec<f64> = s.iter().map(|x| x * x).collect();
    let spectrum = SpectrumSummary::from_masses(&masses, threshold);
    let ratio = spectrum.effective_k as f64 / v.cols() as f64;
    Ok(ValueDimReport { spectrum, ratio })
}

/// Fraction of prefix-value energy outside the top-`k` right singular
/// subspace of `v`: `||P_V - P_V * Pi||_F / ||P_V||_F`, clamped to [0, 1].
/// Zero iff every prefix row lies in the subspace, one iff orthogonal to it.
pub fn prefix_energy_outside(p_v: &Matrix, v: &Matrix, k: usize) -> Result<f64, ProbeError> {
    if p_v.frob_norm() == 0.0 {
        return Err(ProbeError::ZeroMatrix { what: "prefix values" });
    }
    let dec = svd(v).expect("svd convergence");
    let smax = dec.s.first().copied().unwrap_or(0.0);
    let tol = v.rows().max(v.cols()) as f64 * smax * 1e-12;
    let rank = dec.s.iter().filter(|&&x| x > tol).count();
    if k > rank {
        return Err(ProbeError::KTooLarge { k, rank });
    }
    // Top-k right singular vectors as d_v x k columns.
    let basis = Matrix::from_fn(v.cols(), k, |i, j| dec.vt.get(j, i));
    let projector = basis.matmul(&basis.transpose());
    let inside = p_v.matmul(&projector);
    let residual = p_v.sub(&inside);
    Ok((residual.frob_norm() / p_v.frob_norm()).clamp(0.0, 1.0))
}

/// Effective rank of last-layer token representations. Each input's squared
/// singular-value spectrum is normalized to a distribution, the spectra are
/// averaged across the evaluation set, and the average is cumulated.
pub fn last_layer_effective_rank(reps: &[Matrix], threshold: f64) -> Result<SpectrumSummary, ProbeError> {
    if reps.is_empty() {
        return Err(ProbeError::EmptyBatch);
    }
    let max_len = reps
        .iter()
        .map(|f| f.rows().min(f.cols()))
        .max()
        .unwrap_or(0);
    let mut avg = vec![0.0; max_len];
    for f in reps {
        if f.frob_norm() == 0.0 {
            return Err(ProbeError::ZeroMatrix { what: "representation matrix" });
        }
        let s = svd(f).expect("svd convergence").s;
        let total: f64 = s.iter().map(|x| x * x).sum();
        for (i, x) in s.iter().enumerate() {
            avg[i] += x * x / total;
        }
    }
    for a in &mut avg {
        *a /= reps.len() as f64;
    }
    Ok(SpectrumSummary::from_masses(&avg, threshold))
}

/// Per-head probe measurements over one evaluation batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadProbe {
    pub head: usize,
    pub value_dim: ValueDimReport,
    /// Present only when the adapter carries prefix values.
    pub prefix_energy_outside: Option<f64>,
    /// The K used for the prefix-energy projection (the head's effective_k).
    pub k_used: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layer: usize,
    pub threshold: f64,
    pub heads: Vec<HeadProbe>,
    pub base_last_layer: SpectrumSummary,
    pub adapted_last_layer: SpectrumSummary,
}

/// Bundle all probes for an adapted model over an evaluation batch of raw
/// input rows. `layer` selects which layer's value vectors to analyze
/// (defaults to the last). Deterministic: identical inputs give an
/// identical report.
pub fn probe_report(
    adapted: &AdaptedModel,
    eval_batch: &[Matrix],
    layer: Option<usize>,
    threshold: f64,
) -> Result<ProbeReport, ProbeError> {
    if eval_batch.is_empty() {
        return Err(ProbeError::EmptyBatch);
    }
    let base = adapted.base_model();
    let cfg = &base.config;
    let layer = layer.unwrap_or(cfg.layers - 1);
    let dh = cfg.head_dim();

    // Stack base-model value rows for the chosen layer across the batch.
    let mut v_all: Option<Matrix> = None;
    let mut base_finals = Vec::with_capacity(eval_batch.len());
    for x in eval_batch {
        let trace = base.forward(x, None, MaskKind::Causal)?;
        let v = &trace.layers[layer].v;
        v_all = Some(match v_all {
            Some(acc) => acc.concat_rows(v),
            None => v.clone(),
        });
        base_finals.push(trace.final_hidden);
    }
    let v_all = v_all.expect("nonempty batch");

    let prefix = adapted.current_prefix();
    let mut heads = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let v_head = v_all.col_block(head * dh, dh);
        let value_dim = value_effective_dimension(&v_head, threshold)?;
        let (prefix_energy, k_used) = match &prefix {
            Some(p) => {
                let (_, pv) = &p.layers[layer];
                let pv_head = pv.col_block(head * dh, dh);
                let k = value_dim.spectrum.effective_k;
                (Some(prefix_energy_outside(&pv_head, &v_head, k)?), Some(k))
            }
            None => (None, None),
        };
        heads.push(HeadProbe { head, value_dim, prefix_energy_outside: prefix_energy, k_used });
    }

    let (eff_model, eff_prefix) = adapted.effective()?;
    let mut adapted_finals = Vec::with_capacity(eval_batch.len());
    for x in eval_batch {
        let trace = eff_model.forward(x, eff_prefix.as_ref(), MaskKind::Causal)?;
        adapted_finals.push(trace.final_hidden);
    }

    Ok(ProbeReport {
        layer,
        threshold,
        heads,
        base_last_layer: last_layer_effective_rank(&base_finals, threshold)?,
        adapted_last_layer: last_layer_effective_rank(&adapted_finals, threshold)?,
    })
}
