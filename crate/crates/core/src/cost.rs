//! Analytic floating-point-operation accounting for prefill and decode.
//!
//! Counting convention (multiply-add = 2 flops): per layer, QKVO projections
//! cost `8*S*d^2`, attention scores plus value mixing cost `4*S*C*d` over an
//! effective context of `C` slots, and the FFN costs `4*S*d*d_ff`; the
//! output head adds `2*S*d*vocab` once. Prefix slots are loaded from a
//! checkpoint, so they add attention width but no projection or FFN compute.
//! Weight-space adapters (merged at inference) add nothing at all.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("configs and accuracies differ in length: {configs} vs {accuracies}")]
    LengthMismatch { configs: usize, accuracies: usize },
    #[error("a scenario may use a prefix or in-context exemplars, not both (m = {m}, n_demo = {n_demo})")]
    MixedScenario { m: u64, n_demo: u64 },
}

/// One inference scenario. `m` counts learned prefix slots, `n_demo` counts
/// in-context exemplar tokens; at most one of them may be nonzero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostConfig {
    pub layers: u64,
    pub d: u64,
    pub d_ff: u64,
    pub vocab: u64,
    /// Prompt tokens processed during prefill.
    pub prompt: u64,
    /// Generated tokens.
    pub gen: u64,
    pub m: u64,
    pub n_demo: u64,
}

impl CostConfig {
    pub fn validate(&self) -> Result<(), CostError> {
        if self.m > 0 && self.n_demo > 0 {
            return Err(CostError::MixedScenario { m: self.m, n_demo: self.n_demo });
        }
        Ok(())
    }

    /// Effective attention context during prefill: prefix slots or exemplar
    /// tokens plus the prompt itself.
    pub fn context(&self) -> u64 {
        self.m + self.n_demo + self.prompt
    }

    /// Tokens that actually flow through projections and the FFN during
    /// prefill. Exemplar tokens are processed; prefix slots are not.
    fn processed(&self) -> u64 {
        self.n_demo + self.prompt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub prefill_flops: u64,
    pub decode_flops: u64,
    pub total_flops: u64,
}

/// Flops to process the prompt (and any exemplars) and populate the cache.
pub fn prefill_flops(cfg: &CostConfig) -> u64 {
    let s = cfg.processed();
    let c = cfg.context();
    let per_layer = 8 * s * cfg.d * cfg.d + 4 * s * c * cfg.d + 4 * s * cfg.d * cfg.d_ff;
    cfg.layers * per_layer + 2 * s * cfg.d * cfg.vocab
}

/// Flops to generate `gen` tokens; step `t` (1-based) attends over
/// `context + t` slots.
pub fn decode_flops(cfg: &CostConfig) -> u64 {
    let c = cfg.context();
    let mut total = 0;
    for t in 1..=cfg.gen {
        let per_layer = 8 * cfg.d * cfg.d + 4 * (c + t) * cfg.d + 4 * cfg.d * cfg.d_ff;
        total += cfg.layers * per_layer + 2 * cfg.d * cfg.vocab;
    }
    total
}

/// Closed form of the decode attention term: `4*d*L*(C*T + T*(T+1)/2)`.
/// Must agree exactly with the sum inside `decode_flops`.
pub fn decode_attention_closed_form(cfg: &CostConfig) -> u64 {
    let c = cfg.context();
    let t = cfg.gen;
    4 * cfg.d * cfg.layers * (c * t + t * (t + 1) / 2)
}

pub fn cost_report(cfg: &CostConfig) -> Result<CostReport, CostError> {
    cfg.validate()?;
    let prefill = prefill_flops(cfg);
    let decode = decode_flops(cfg);
    Ok(CostReport { prefill_flops: prefill, decode_flops: decode, total_flops: prefill + decode })
}

/// Least-squares slope of `ln(prefill)` against `ln(prompt)` over the given
/// prompt lengths. Quadratic attention scaling shows up as a slope near 2.
pub fn prefill_scaling_exponent(base: &CostConfig, prompts: &[u64]) -> f64 {
    let pts: Vec<(f64, f64)> = prompts
        .iter()
        .map(|&s| {
            let cfg = CostConfig { prompt: s, ..*base };
            ((s as f64).ln(), (prefill_flops(&cfg) as f64).ln())
        })
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    cov / var
}

/// One row of an accuracy-versus-cost frontier table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub label: String,
    pub total_flops: u64,
    pub accuracy: f64,
    pub pareto: bool,
}

/// Sort configurations by total flops and mark the Pareto-dominant rows
/// (no other row has at most the flops and strictly higher accuracy, or
/// fewer flops and at least the accuracy).
pub fn frontier_table(
    configs: &[(String, CostConfig)],
    accuracies: &[f64],
) -> Result<Vec<FrontierRow>, CostError> {
    if configs.len() != accuracies.len() {
        return Err(CostError::LengthMismatch { configs: configs.len(), accuracies: accuracies.len() });
    }
    let mut rows: Vec<FrontierRow> = configs
        .iter()
        .zip(accuracies)
        .map(|((label, cfg), &acc)| {
            cfg.validate()?;
            Ok(FrontierRow {
                label: label.clone(),
                total_flops: cost_report(cfg)?.total_flops,
                accuracy: acc,
                pareto: true,
            })
        })
        .collect::<Result<_, CostError>>()?;
    rows.sort_by(|a, b| a.total_flops.cmp(&b.total_flops).then(b.accuracy.total_cmp(&a.accuracy)));
    for i in 0..rows.len() {
        let dominated = rows.iter().enumerate().any(|(j, other)| {
            j != i
                && ((other.total_flops <= rows[i].total_flops && other.accuracy > rows[i].accuracy)
                    || (other.total_flops < rows[i].total_flops && other.accuracy >= rows[i].accuracy))
        });
        rows[i].pareto = !dominated;
    }
    Ok(rows)
}

/// Render frontier rows as CSV with a fixed column order.
pub fn frontier_csv(rows: &[FrontierRow]) -> String {
    let mut out = String::from("label,total_flops,accuracy,pareto\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.label, r.total_flops, r.accuracy, r.pareto));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> CostConfig {
        CostConfig { layers: 2, d: 8, d_ff: 16, vocab: 32, prompt: 10, gen: 5, m: 0, n_demo: 0 }
    }

    #[test]
    fn hand_counted_prefill_example() {
        // L=1, d=2, no FFN/vocab, one prompt token, no prefix:
        // 8*1*4 + 4*1*1*2 = 40.
        let cfg = CostConfig { layers: 1, d: 2, d_ff: 0, vocab: 0, prompt: 1, gen: 0, m: 0, n_demo: 0 };
        assert_eq!(prefill_flops(&cfg), 40);
        assert_eq!(decode_flops(&cfg), 0);
    }

    #[test]
    fn report_total_is_sum() {
        let r = cost_report(&base()).unwrap();
        assert_eq!(r.total_flops, r.prefill_flops + r.decode_flops);
    }

    #[test]
    fn doubling_prompt_in_attention_dominated_regime_quadruples_prefill() {
        let cfg = CostConfig { layers: 1, d: 1, d_ff: 0, vocab: 0, prompt: 1 << 14, gen: 0, m: 0, n_demo: 0 };
        let doubled = CostConfig { prompt: cfg.prompt * 2, ..cfg };
        let ratio = prefill_flops(&doubled) as f64 / prefill_flops(&cfg) as f64;
        assert!((ratio - 4.0).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn prefix_beats_icl_prefill_superlinearly() {
        // Prefix slots skip projection cost entirely, so the prefill ratio
        // drops below the context-length ratio.
        let prefix = CostConfig { m: 8, n_demo: 0, ..base() };
        let icl = CostConfig { m: 0, n_demo: 512, ..base() };
        let lhs = prefill_flops(&prefix) as f64 / prefill_flops(&icl) as f64;
        let rhs = (prefix.context() as f64) / (icl.context() as f64);
        assert!(lhs < rhs, "{lhs} !< {rhs}");
    }

    #[test]
    fn decode_attention_matches_closed_form() {
        for gen in [0, 1, 7] {
            let cfg = CostConfig { layers: 3, d: 8, d_ff: 0, vocab: 0, prompt: 5, gen, m: 4, n_demo: 0 };
            // Strip the per-step projection constant to isolate attention.
            let projections = cfg.gen * cfg.layers * 8 * cfg.d * cfg.d;
            assert_eq!(decode_flops(&cfg) - projections, decode_attention_closed_form(&cfg));
        }
    }

    #[test]
    fn shorter_context_strictly_cheaper_decode() {
        let prefix = CostConfig { m: 8, n_demo: 0, ..base() };
        let icl = CostConfig { m: 0, n_demo: 64, ..base() };
        assert!(decode_flops(&prefix) < decode_flops(&icl));
    }

    #[test]
    fn monotonicity_in_each_knob() {
        let b = base();
        assert!(prefill_flops(&CostConfig { prompt: b.prompt + 1, ..b }) > prefill_flops(&b));
        assert!(prefill_flops(&CostConfig { layers: b.layers + 1, ..b }) > prefill_flops(&b));
        assert!(prefill_flops(&CostConfig { d: b.d + 1, ..b }) > prefill_flops(&b));
        assert!(prefill_flops(&CostConfig { m: b.m + 1, ..b }) > prefill_flops(&b));
        assert!(decode_flops(&CostConfig { gen: b.gen + 1, ..b }) > decode_flops(&b));
        assert!(decode_flops(&CostConfig { m: b.m + 1, ..b }) > decode_flops(&b));
        assert!(decode_flops(&CostConfig { d: b.d + 1, ..b }) > decode_flops(&b));
    }

    #[test]
    fn prefill_exponent_near_two_for_attention_only() {
        let cfg = CostConfig { layers: 1, d: 8, d_ff: 0, vocab: 0, prompt: 0, gen: 0, m: 0, n_demo: 0 };
        let prompts: Vec<u64> = (6..=12).map(|k| 1 << k).collect();
        let slope = prefill_scaling_exponent(&cfg, &prompts);
        assert!((1.9..=2.1).contains(&slope), "slope {slope}");
    }

    #[test]
    fn mixed_scenario_is_rejected() {
        let cfg = CostConfig { m: 2, n_demo: 3, ..base() };
        assert!(matches!(cost_report(&cfg), Err(CostError::MixedScenario { .. })));
    }

    #[test]
    fn frontier_marks_dominated_rows() {
        let cheap = CostConfig { m: 2, n_demo: 0, ..base() };
        let pricey = CostConfig { m: 0, n_demo: 256, ..base() };
        let rows = frontier_table(
            &[("prefix".into(), cheap), ("icl".into(), pricey)],
            &[0.8, 0.6],
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].pareto, "cheaper and better row must be Pareto");
        assert!(!rows[1].pareto, "dominated row must be flagged");

        let single = frontier_table(&[("only".into(), cheap)], &[0.5]).unwrap();
        assert!(single[0].pareto);

        assert!(matches!(
            frontier_table(&[("a".into(), cheap)], &[]),
            Err(CostError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn synthetic_sweep_prefix_dominates_icl_at_equal_accuracy() {
        let mut configs = Vec::new();
        let mut accs = Vec::new();
        for k in 0..7 {
            configs.push((format!("prefix_m{}", 1 << k), CostConfig { m: 1 << k, n_demo: 0, ..base() }));
            accs.push(0.7);
        }
        for k in 6..13 {
            configs.push((format!("icl_n{}", 1 << k), CostConfig { m: 0, n_demo: 1 << k, ..base() }));
            accs.push(0.7);
        }
        let rows = frontier_table(&configs, &accs).unwrap();
        // At equal accuracy only the cheapest configuration survives, and the
        // cheapest is the shortest prefix.
        let pareto: Vec<&FrontierRow> = rows.iter().filter(|r| r.pareto).collect();
        assert_eq!(pareto.len(), 1);
        assert_eq!(pareto[0].label, "prefix_m1");
        // Every prefix row is cheaper than every exemplar row in this sweep.
        let max_prefix = rows.iter().filter(|r| r.label.starts_with("prefix")).map(|r| r.total_flops).max();
        let min_icl = rows.iter().filter(|r| r.label.starts_with("icl")).map(|r| r.total_flops).min();
        assert!(max_prefix < min_icl);
    }
}
