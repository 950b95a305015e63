//! Inference-mode evaluation over a held-out stream.

use serde::{Deserialize, Serialize};

use crate::accounting::{arch_spec, ffn_flops_dense, ffn_flops_moe, versatile_runtime_flops};
use crate::autodiff::Tape;
use crate::data::{eval_windows, HARD};
use crate::error::{Error, Result};
use crate::layer::InferOptions;
use crate::model::{model_forward, ForwardMode, Model};
use crate::nn::lm_loss;
use crate::tensor::Real;
use crate::train::lambda_histogram;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub batch: usize,
    pub seq: usize,
    /// Caps the number of windows read from the stream.
    pub max_windows: Option<usize>,
    pub infer: InferOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub windows: usize,
    pub tokens: usize,
    /// Mean next-token cross-entropy in nats.
    pub loss: f64,
    /// Mean executed loop count per layer.
    pub mean_loops: Vec<f64>,
    pub mean_expected_loops: Vec<f64>,
    pub mean_lambda: Vec<f64>,
    pub lambda_hist: Vec<usize>,
    pub n_mean: f64,
    pub p_frac: f64,
    /// Share of (token, layer) pairs whose width pathway was skipped.
    pub pruned_frac: f64,
    /// Per-token FFN FLOPs from the runtime formula.
    pub formula_flops: f64,
    /// Per-token FFN FLOPs counted on the tape.
    pub instrumented_flops: f64,
    pub flops_rel_error: f64,
    /// Whether every token ran exactly its predicted number of FFN passes.
    pub applications_match: bool,
    pub expert_load: Vec<Vec<f64>>,
    pub min_expert_load: f64,
    /// Rank correlation between the hard/easy label of each predicted byte
    /// and the layer-averaged loop count at the predicting position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
}

#[derive(Default)]
struct LayerAcc {
    loops: usize,
    expected: f64,
    lambda: f64,
    counts: Vec<usize>,
}

pub fn evaluate<T: Real>(model: &Model<T>, stream: &[usize], labels: Option<&[u8]>, opts: &EvalOptions) -> Result<EvalReport> {
    let (batch, seq) = (opts.batch, opts.seq);
    if batch == 0 || seq < 2 {
        return Err(Error::config("seq", "evaluation needs batch >= 1 and seq >= 2"));
    }
    if labels.is_some_and(|l| l.len() != stream.len()) {
        return Err(Error::Data("label count differs from eval stream length".into()));
    }
    let mut starts: Vec<usize> = eval_windows(stream.len(), seq).collect();
    if let Some(cap) = opts.max_windows {
        starts.truncate(cap);
    }
    if starts.is_empty() {
        return Err(Error::Data(format!("eval stream of {} tokens is shorter than seq {seq}", stream.len())));
    }

    let c = &model.config;
    let n_layers = c.n_layers;
    let mut acc: Vec<LayerAcc> = (0..n_layers)
        .map(|_| LayerAcc {
            counts: vec![0; c.n_experts],
            ..LayerAcc::default()
        })
        .collect();
    let mut lambdas = Vec::new();
    let (mut loss_sum, mut targets, mut tokens) = (0.0, 0usize, 0usize);
    let (mut short, mut pruned, mut flops) = (0usize, 0usize, 0u64);
    let mut applications_match = true;
    let (mut scores, mut ranks_label) = (Vec::new(), Vec::new());

    for chunk in starts.chunks(batch) {
        let b = chunk.len();
        let ids: Vec<usize> = chunk.iter().flat_map(|&s| stream[s..s + seq].iter().copied()).collect();
        let mut tape = Tape::inference();
        let vars = model.params.bind(&mut tape);
        let out = model_forward(&mut tape, model, &vars, &ids, b, seq, ForwardMode::Infer(opts.infer))?;
        let lm = lm_loss(&mut tape, out.logits, &ids, b, seq)?;
        let n_targets = b * (seq - 1);
        loss_sum += tape.value(lm).item().as_f64() * n_targets as f64;
        targets += n_targets;
        tokens += b * seq;

        for (a, t) in acc.iter_mut().zip(&out.traces) {
            a.loops += t.loops.iter().sum::<usize>();
            a.expected += t.expected_loops.iter().sum::<f64>();
            a.lambda += t.lambda.iter().sum::<f64>();
            for (x, &y) in a.counts.iter_mut().zip(&t.expert_counts) {
                *x += y;
            }
            short += t.loops.iter().filter(|&&l| l != c.max_loops).count();
            pruned += t.pruned;
            flops += t.ffn_flops;
            applications_match &= t.ffn_applications == t.loops;
            lambdas.extend_from_slice(&t.lambda);
        }
        if let Some(labels) = labels {
            for (w, &s) in chunk.iter().enumerate() {
                for t in 0..seq - 1 {
                    let row = w * seq + t;
                    let mean = out.traces.iter().map(|tr| tr.loops[row] as f64).sum::<f64>() / n_layers as f64;
                    scores.push(mean);
                    ranks_label.push(if labels[s + t + 1] == HARD { 1.0 } else { 0.0 });
                }
            }
        }
    }

    let pairs = (tokens * n_layers) as f64;
    let per = |x: f64| x / tokens as f64;
    let total_loops: usize = acc.iter().map(|a| a.loops).sum();
    let n_mean = total_loops as f64 / pairs;
    let p_frac = short as f64 / pairs;
    let spec = arch_spec(c);
    let formula = 1e6
        * versatile_runtime_flops(ffn_flops_dense(&spec), ffn_flops_moe(&spec), n_mean, p_frac, c.max_loops)?;
    let instrumented = flops as f64 / tokens as f64;
    let expert_load: Vec<Vec<f64>> = acc
        .iter()
        .map(|a| {
            let total = a.counts.iter().sum::<usize>().max(1) as f64;
            a.counts.iter().map(|&x| x as f64 / total).collect()
        })
        .collect();
    let min_expert_load = expert_load.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    Ok(EvalReport {
        windows: starts.len(),
        tokens,
        loss: loss_sum / targets as f64,
        mean_loops: acc.iter().map(|a| per(a.loops as f64)).collect(),
        mean_expected_loops: acc.iter().map(|a| per(a.expected)).collect(),
        mean_lambda: acc.iter().map(|a| per(a.lambda)).collect(),
        lambda_hist: lambda_histogram(&lambdas),
        n_mean,
        p_frac,
        pruned_frac: pruned as f64 / pairs,
        formula_flops: formula,
        instrumented_flops: instrumented,
        flops_rel_error: (formula - instrumented).abs() / instrumented.max(f64::MIN_POSITIVE),
        applications_match,
        expert_load,
        min_expert_load,
        spearman: labels.and_then(|_| spearman(&ranks_label, &scores)),
    })
}

/// Average ranks, 1-based, with ties sharing the mean of their positions.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson on tie-averaged ranks); `None` when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn spearman_matches_hand_values() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // Tied ranks: x = [1, 2.5, 2.5, 4], y = [1, 2, 3, 4] gives 0.9486832980505138.
        let r = spearman(&[0.0, 1.0, 1.0, 2.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 3.0 / 10f64.sqrt()).abs() < 1e-12, "{r}");
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    fn tiny() -> Model<f64> {
        let c = ModelConfig {
            vocab: 32,
            d_model: 8,
            d_hidden: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq: 8,
            n_experts: 4,
            top_k: 2,
            d_expert: 4,
            max_loops: 3,
            init_std: 0.5,
            ..ModelConfig::default()
        };
        Model::new(c, 5).unwrap()
    }

    #[test]
    fn report_is_consistent_and_repeatable() {
        let model = tiny();
        let stream: Vec<usize> = (0..100).map(|i| (i * 11) % 32).collect();
        let labels: Vec<u8> = (0..100).map(|i| (i % 3 == 0) as u8).collect();
        let opts = EvalOptions {
            batch: 3,
            seq: 8,
            max_windows: None,
            infer: InferOptions::default(),
        };
        let a = evaluate(&model, &stream, Some(&labels), &opts).unwrap();
        let b = evaluate(&model, &stream, Some(&labels), &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.windows, a.tokens), (12, 96));
        assert!(a.applications_match);
        assert!(a.flops_rel_error < 1e-12, "{a:?}");
        assert!(a.loss.is_finite());
        assert!(a.lambda_hist.iter().sum::<usize>() == 2 * 96);
    }
}
