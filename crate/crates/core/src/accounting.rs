//! Parameter and FFN FLOPs budgets.
//!
//! FLOPs are forward, per token, FFN weights only, at two FLOPs per
//! multiply-accumulate. A SwiGLU FFN has three `d x d_hidden` matrices, so a
//! dense layer costs `6 * d * d_hidden`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::LayerTrace;
use crate::model::ModelConfig;

const MILLION: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub layers: usize,
    pub d: usize,
    pub d_hidden: usize,
    /// Parameters of the dense model in millions, taken as given.
    pub base_params: f64,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_expert: usize,
    pub max_loops: usize,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("layers", self.layers), ("d", self.d), ("d_hidden", self.d_hidden)] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d_expert > self.d_hidden {
            return Err(Error::config("d_expert", "must not exceed d_hidden"));
        }
        if !(self.base_params >= 0.0) {
            return Err(Error::config("base_params", "must be non-negative"));
        }
        Ok(())
    }

    fn per_layer_dense(&self) -> f64 {
        6.0 * self.d as f64 * self.d_hidden as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetReport {
    pub variant: String,
    pub params_millions: f64,
    pub ffn_flops_millions: f64,
}

pub fn ffn_flops_dense(s: &ArchSpec) -> f64 {
    s.per_layer_dense() * s.layers as f64 / MILLION
}

pub fn ffn_flops_kloop(s: &ArchSpec, k: usize) -> f64 {
    k as f64 * ffn_flops_dense(s)
}

/// Dense FFN kept always on plus `K` active experts of width `d_expert`.
pub fn ffn_flops_moe(s: &ArchSpec) -> f64 {
    let extra = 6.0 * s.d as f64 * s.d_expert as f64 * s.top_k as f64 * s.layers as f64;
    ffn_flops_dense(s) + extra / MILLION
}

/// Physical experts (three `d x d_expert` matrices each) plus router.
pub fn moe_extra_params(s: &ArchSpec) -> f64 {
    let (d, n) = (s.d as f64, s.n_experts as f64);
    (3.0 * d * s.d_expert as f64 * n + d * n) * s.layers as f64 / MILLION
}

/// Router and loop head only; experts are views of the shared weights.
pub fn versatile_extra_params(s: &ArchSpec) -> f64 {
    let d = s.d as f64;
    (d * s.n_experts as f64 + d * s.max_loops as f64) * s.layers as f64 / MILLION
}

/// `base * n_mean + (moe - base) * p_frac`.
pub fn versatile_runtime_flops(base: f64, moe: f64, n_mean: f64, p_frac: f64, max_loops: usize) -> Result<f64> {
    if !(1.0..=max_loops as f64).contains(&n_mean) {
        return Err(Error::contract(format!("n_mean {n_mean} outside [1, {max_loops}]")));
    }
    if !(0.0..=1.0).contains(&p_frac) {
        return Err(Error::contract(format!("p_frac {p_frac} outside [0, 1]")));
    }
    Ok(base * n_mean + (moe - base) * p_frac)
}

/// Mean hard loop count over all (token, layer) pairs, and the share of
/// pairs that stopped before `max_loops`.
pub fn collect_runtime_stats(traces: &[LayerTrace], max_loops: usize) -> Result<(f64, f64)> {
    let pairs: usize = traces.iter().map(LayerTrace::tokens).sum();
    if pairs == 0 {
        return Err(Error::contract("no inference traces to summarize"));
    }
    let total: usize = traces.iter().flat_map(|t| &t.loops).sum();
    let short = traces
        .iter()
        .flat_map(|t| &t.loops)
        .filter(|&&l| l != max_loops)
        .count();
    Ok((total as f64 / pairs as f64, short as f64 / pairs as f64))
}

/// Base, MoE, k-Loop (k = 2, 4, 6) and the shared-weight model. The last
/// row uses measured `(n_mean, p_frac)` when given, otherwise every token at
/// `max_loops` (where the width pathway is pruned).
pub fn budget_table(s: &ArchSpec, runtime: Option<(f64, f64)>) -> Result<Vec<BudgetReport>> {
    s.validate()?;
    let row = |variant: String, params: f64, flops: f64| BudgetReport {
        variant,
        params_millions: params,
        ffn_flops_millions: flops,
    };
    let dense = ffn_flops_dense(s);
    let moe = ffn_flops_moe(s);
    let mut rows = vec![
        row("Base".into(), s.base_params, dense),
        row("MoE".into(), s.base_params + moe_extra_params(s), moe),
    ];
    for k in [2, 4, 6] {
        rows.push(row(format!("{k}-Loop"), s.base_params, ffn_flops_kloop(s, k)));
    }
    let l = s.max_loops.max(1);
    let (label, (n_mean, p_frac)) = match runtime {
        Some(stats) => ("VersatileFFN".to_string(), stats),
        None => (format!("VersatileFFN ({l} loops)"), (l as f64, 0.0)),
    };
    rows.push(row(
        label,
        s.base_params + versatile_extra_params(s),
        versatile_runtime_flops(dense, moe, n_mean, p_frac, l)?,
    ));
    Ok(rows)
}

pub fn render_table(rows: &[BudgetReport]) -> String {
    let width = rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
    let mut out = format!("{:<width$}  {:>12}  {:>16}\n", "variant", "params (M)", "FFN FLOPs (M)");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>12.2}  {:>16.2}",
            r.variant, r.params_millions, r.ffn_flops_millions
        );
    }
    out
}

pub fn render_csv(rows: &[BudgetReport]) -> String {
    let mut out = String::from("variant,params_millions,ffn_flops_millions\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.variant, r.params_millions, r.ffn_flops_millions);
    }
    out
}

/// Exact number of trainable scalars in a [`crate::model::Model`] built
/// from `c`.
pub fn count_params(c: &ModelConfig) -> usize {
    let d = c.d_model;
    let attention = 4 * d * d + d;
    let ffn = 3 * d * c.d_hidden + d;
    let heads = d * c.n_experts + d * c.max_loops;
    let embeddings = c.vocab * d + c.max_seq * d;
    let unembed = if c.tie_embeddings { 0 } else { d * c.vocab };
    embeddings + c.n_layers * (attention + ffn + heads) + d + unembed
}

/// Dense-model scalars for `c`: the same count without router and loop head.
pub fn count_base_params(c: &ModelConfig) -> usize {
    count_params(c) - c.n_layers * c.d_model * (c.n_experts + c.max_loops)
}

/// The accounting view of a model architecture.
pub fn arch_spec(c: &ModelConfig) -> ArchSpec {
    ArchSpec {
        layers: c.n_layers,
        d: c.d_model,
        d_hidden: c.d_hidden,
        base_params: count_base_params(c) as f64 / MILLION,
        n_experts: c.n_experts,
        top_k: c.top_k,
        d_expert: c.d_expert,
        max_loops: c.max_loops,
    }
}

/// Per-token FFN FLOPs counted on the tape during the traced pass.
pub fn traced_flops_per_token(traces: &[LayerTrace]) -> f64 {
    let tokens = traces.first().map_or(0, LayerTrace::tokens);
    let total: u64 = traces.iter().map(|t| t.ffn_flops).sum();
    total as f64 / tokens.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    pub(crate) fn spec_354m() -> ArchSpec {
        ArchSpec {
            layers: 15,
            d: 1024,
            d_hidden: 4096,
            base_params: 354.71,
            n_experts: 8,
            top_k: 2,
            d_expert: 512,
            max_loops: 4,
        }
    }

    pub(crate) fn spec_720m() -> ArchSpec {
        ArchSpec {
            layers: 15,
            d: 1536,
            d_hidden: 6144,
            base_params: 720.81,
            n_experts: 8,
            top_k: 2,
            d_expert: 768,
            max_loops: 4,
        }
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn dense_and_loop_flops() {
        assert!(close(ffn_flops_dense(&spec_354m()), 377.49, 0.05));
        assert!(close(ffn_flops_dense(&spec_720m()), 849.35, 0.05));
        let unit = ArchSpec {
            layers: 1,
            d: 1,
            d_hidden: 1,
            ..spec_354m()
        };
        assert!(close(ffn_flops_dense(&unit), 6e-6, 1e-15));
        assert!(close(ffn_flops_kloop(&spec_354m(), 2), 754.98, 0.05));
        assert!(close(ffn_flops_kloop(&spec_720m(), 6), 5096.10, 0.05));
        // 6 x 377,487,360 FLOPs; the published cell reads 2264.96.
        assert!(close(ffn_flops_kloop(&spec_354m(), 6), 2264.92, 0.005));
        assert!(close(ffn_flops_kloop(&spec_354m(), 6), 2264.96, 0.05));
    }

    #[test]
    fn moe_cells() {
        assert!(close(ffn_flops_moe(&spec_354m()), 471.86, 0.05));
        assert!(close(ffn_flops_moe(&spec_720m()), 1061.69, 0.05));
        let k0 = ArchSpec { top_k: 0, ..spec_354m() };
        assert_eq!(ffn_flops_moe(&k0), ffn_flops_dense(&k0));
        let s = spec_354m();
        assert!(close(s.base_params + moe_extra_params(&s), 543.59, 0.05));
        let s = spec_720m();
        assert!(close(s.base_params + moe_extra_params(&s), 1145.69, 0.05));
        let none = ArchSpec { n_experts: 0, ..spec_354m() };
        assert_eq!(moe_extra_params(&none), 0.0);
    }

    #[test]
    fn versatile_params() {
        let s = spec_354m();
        assert!(close(s.base_params + versatile_extra_params(&s), 354.90, 0.05));
        let s = spec_720m();
        assert!(close(s.base_params + versatile_extra_params(&s), 721.09, 0.05));
        let bare = ArchSpec {
            n_experts: 0,
            max_loops: 0,
            ..spec_354m()
        };
        assert_eq!(versatile_extra_params(&bare), 0.0);
    }

    #[test]
    fn runtime_formula() {
        assert_eq!(versatile_runtime_flops(377.49, 471.86, 1.0, 0.0, 4).unwrap(), 377.49);
        let v = versatile_runtime_flops(377.49, 471.86, 3.0, 0.5, 4).unwrap();
        assert!(close(v, 1179.655, 1e-9));
        assert!(versatile_runtime_flops(377.49, 471.86, 0.5, 0.0, 4).is_err());
        assert!(versatile_runtime_flops(377.49, 471.86, 2.0, 1.5, 4).is_err());
    }

    fn trace(loops: Vec<usize>) -> LayerTrace {
        LayerTrace {
            loops,
            ..LayerTrace::default()
        }
    }

    #[test]
    fn runtime_stats() {
        assert_eq!(collect_runtime_stats(&[trace(vec![4; 5])], 4).unwrap(), (4.0, 0.0));
        assert_eq!(collect_runtime_stats(&[trace(vec![1; 5])], 4).unwrap(), (1.0, 1.0));
        let mixed = [trace(vec![1, 2, 3, 4]), trace(vec![4, 3, 2, 1])];
        assert_eq!(collect_runtime_stats(&mixed, 4).unwrap(), (2.5, 0.75));
        assert!(collect_runtime_stats(&[], 4).is_err());
    }

    #[test]
    fn census_matches_instantiated_model() {
        for tie in [false, true] {
            let c = ModelConfig {
                vocab: 20,
                d_model: 8,
                d_hidden: 24,
                n_layers: 3,
                n_heads: 2,
                max_seq: 6,
                n_experts: 3,
                top_k: 2,
                d_expert: 8,
                max_loops: 4,
                tie_embeddings: tie,
                ..ModelConfig::default()
            };
            let m = Model::<f64>::new(c.clone(), 0).unwrap();
            assert_eq!(m.params.numel(), count_params(&c));
            let dense = count_base_params(&c) as f64 / MILLION;
            let spec = arch_spec(&c);
            assert!(close(
                spec.base_params + versatile_extra_params(&spec),
                count_params(&c) as f64 / MILLION,
                1e-12
            ));
            assert!(dense > 0.0);
        }
    }

    #[test]
    fn table_rendering() {
        let rows = budget_table(&spec_354m(), None).unwrap();
        assert_eq!(rows.len(), 6);
        let csv = render_csv(&rows);
        assert!(csv.starts_with("variant,params_millions,ffn_flops_millions\n"));
        assert_eq!(csv.lines().count(), 7);
        let text = render_table(&rows);
        assert!(text.contains("377.49") && text.contains("471.86"));
    }
}
