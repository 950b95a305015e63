//! One transformer layer with the fused wide-and-deep feed-forward block.

use crate::autodiff::{Tape, Var};
use crate::depth::{depth_forward_infer, depth_forward_train, predict_loops, recurse};
use crate::error::{Error, Result};
use crate::nn::{attention_block, AttentionParams, AttentionWeights, FfnParams, FfnWeights};
use crate::params::{BoundParams, ParamId};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use crate::width::{load_balance_var, width_forward, ExpertView};

/// `(L_max - E[L]) / L_max`.
pub fn gating_lambda(expected: f64, max_loops: usize) -> Result<f64> {
    let l = max_loops as f64;
    if max_loops == 0 || !(1.0..=l).contains(&expected) {
        return Err(Error::contract(format!(
            "expected loop count {expected} outside [1, {max_loops}]"
        )));
    }
    Ok((l - expected) / l)
}

/// Weights `(L_max - l) / L_max` that turn a loop distribution into its
/// fusion coefficient. Every weight is non-negative and below one, so the
/// result stays in `[0, 1)` under rounding as well.
fn lambda_weights(max_loops: usize) -> Vec<f64> {
    let l = max_loops as f64;
    (1..=max_loops).map(|i| (l - i as f64) / l).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attention: AttentionParams,
    /// The single FFN weight set both pathways read.
    pub ffn: FfnParams,
    pub router: ParamId,
    pub loop_head: ParamId,
    pub views: Vec<ExpertView>,
}

/// A [`LayerParams`] resolved to tape handles.
#[derive(Clone, Debug)]
pub struct VersatileLayer {
    pub attention: AttentionWeights,
    pub ffn: FfnWeights,
    pub router: Var,
    pub loop_head: Var,
    pub views: Vec<ExpertView>,
}

impl LayerParams {
    pub fn bind(&self, vars: &BoundParams) -> VersatileLayer {
        VersatileLayer {
            attention: self.attention.bind(vars),
            ffn: self.ffn.bind(vars),
            router: vars.var(self.router),
            loop_head: vars.var(self.loop_head),
            views: self.views.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSettings {
    pub top_k: usize,
    pub max_loops: usize,
    pub shared_expert: bool,
    pub norm_eps: f64,
}

/// Per-layer statistics of one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerTrace {
    pub lambda: Vec<f64>,
    /// Hard loop count per token.
    pub loops: Vec<usize>,
    pub expected_loops: Vec<f64>,
    /// Tokens routed to each expert (before any pruning).
    pub expert_counts: Vec<usize>,
    pub mean_probs: Vec<f64>,
    /// Full-FFN applications per token on the depth pathway.
    pub ffn_applications: Vec<usize>,
    /// (token, expert) branch evaluations executed on the width pathway.
    pub expert_evals: usize,
    /// Tokens whose width pathway was skipped.
    pub pruned: usize,
    /// FFN matrix FLOPs counted on the tape for both pathways.
    pub ffn_flops: u64,
    pub aux_loss: f64,
}

impl LayerTrace {
    pub fn tokens(&self) -> usize {
        self.loops.len()
    }

    pub fn mean_loops(&self) -> f64 {
        self.loops.iter().sum::<usize>() as f64 / self.loops.len().max(1) as f64
    }

    pub fn mean_expected(&self) -> f64 {
        self.expected_loops.iter().sum::<f64>() / self.expected_loops.len().max(1) as f64
    }

    pub fn mean_lambda(&self) -> f64 {
        self.lambda.iter().sum::<f64>() / self.lambda.len().max(1) as f64
    }
}

/// `Y = Y_d + lambda * (Y_w - Y_d)`, the convex combination with a
/// per-token weight. It is exactly `Y_d` where `lambda` is zero.
fn fuse<T: Real>(tape: &mut Tape<T>, y_width: Var, y_depth: Var, lambda: Var) -> Result<Var> {
    let diff = tape.sub(y_width, y_depth)?;
    let scaled = tape.row_scale(diff, lambda)?;
    tape.add(y_depth, scaled)
}

pub struct TrainOutput {
    pub y: Var,
    pub aux: Var,
    pub trace: LayerTrace,
}

/// Training forward: both pathways on the post-attention state, Gumbel
/// loop sampling, straight-through depth aggregation (or the soft sum when
/// `soft`), and per-token fusion.
pub fn layer_forward_train<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    layer: &VersatileLayer,
    s: &BlockSettings,
    tau: f64,
    rng: &mut Rng,
    soft: bool,
) -> Result<TrainOutput> {
    layer_forward_train_with(tape, x, layer, s, soft, |tape, h| {
        predict_loops(tape, h, layer.loop_head, tau, Some(rng))
    })
}

/// [`layer_forward_train`] with the loop prediction supplied by the caller.
pub fn layer_forward_train_with<T: Real, F>(
    tape: &mut Tape<T>,
    x: Var,
    layer: &VersatileLayer,
    s: &BlockSettings,
    soft: bool,
    predict: F,
) -> Result<TrainOutput>
where
    F: FnOnce(&mut Tape<T>, Var) -> Result<crate::depth::LoopPrediction>,
{
    let eps = T::from_f64(s.norm_eps);
    let h = attention_block(tape, x, &layer.attention, eps)?;
    let width = width_forward(tape, h, &layer.ffn, &layer.views, layer.router, s.top_k, eps, None, s.shared_expert)?;
    let pred = predict(tape, h)?;
    if pred.decision.max_loops != s.max_loops {
        return Err(Error::shape("layer_forward_train", &[pred.decision.max_loops], &[s.max_loops]));
    }
    let before = tape.matmul_flops();
    let states = recurse(tape, h, &layer.ffn, s.max_loops, eps)?;
    let depth_flops = tape.matmul_flops() - before;
    let y_depth = depth_forward_train(tape, &states, pred.p, &pred.decision, soft)?;

    let weights: Vec<T> = lambda_weights(s.max_loops).into_iter().map(T::from_f64).collect();
    let c = tape.constant(Tensor::new(&[s.max_loops, 1], weights)?);
    let lambda = tape.matmul(pred.p, c)?;
    let y = fuse(tape, width.y, y_depth, lambda)?;
    let aux = load_balance_var(tape, &width.routing, &width.outcome)?;

    let tokens = pred.decision.tokens();
    let trace = LayerTrace {
        lambda: tape.value(lambda).to_f64_vec(),
        loops: pred.decision.hard.clone(),
        expected_loops: pred.decision.expected.clone(),
        expert_counts: width.outcome.counts(),
        mean_probs: width.outcome.mean_probs.clone(),
        ffn_applications: vec![s.max_loops; tokens],
        expert_evals: width.expert_evals,
        pruned: 0,
        ffn_flops: width.ffn_flops + depth_flops,
        aux_loss: tape.value(aux).item().as_f64(),
    };
    Ok(TrainOutput { y, aux, trace })
}

/// How the inference-time fusion coefficient is derived.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaSource {
    /// From the executed loop count: `(L_max - l_hat) / L_max`.
    #[default]
    Hard,
    /// From the noise-free distribution at `tau_min`.
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferOptions {
    pub tau_min: f64,
    /// Tokens with `lambda <= lambda_threshold` skip the width pathway.
    pub lambda_threshold: f64,
    pub lambda_source: LambdaSource,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            tau_min: 0.1,
            lambda_threshold: 0.0,
            lambda_source: LambdaSource::Hard,
        }
    }
}

/// Inference forward with discrete early exit on the depth pathway and
/// pruning of the width pathway for tokens at or below the threshold.
pub fn layer_forward_infer<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    layer: &VersatileLayer,
    s: &BlockSettings,
    opts: &InferOptions,
) -> Result<(Var, LayerTrace)> {
    let eps = T::from_f64(s.norm_eps);
    let h = attention_block(tape, x, &layer.attention, eps)?;
    let pred = predict_loops(tape, h, layer.loop_head, opts.tau_min, None)?;
    let d = &pred.decision;
    let lambda: Vec<f64> = match opts.lambda_source {
        LambdaSource::Hard => d
            .hard
            .iter()
            .map(|&l| (s.max_loops - l) as f64 / s.max_loops as f64)
            .collect(),
        LambdaSource::Soft => {
            let w = lambda_weights(s.max_loops);
            d.probs
                .chunks(s.max_loops)
                .map(|row| row.iter().zip(&w).map(|(p, c)| p * c).sum())
                .collect()
        }
    };
    let active: Vec<bool> = lambda.iter().map(|&l| l > opts.lambda_threshold).collect();

    let before = tape.matmul_flops();
    let depth = depth_forward_infer(tape, h, &layer.ffn, &d.hard, eps)?;
    let depth_flops = tape.matmul_flops() - before;
    let width = width_forward(
        tape,
        h,
        &layer.ffn,
        &layer.views,
        layer.router,
        s.top_k,
        eps,
        Some(&active),
        s.shared_expert,
    )?;
    let effective: Vec<f64> = lambda
        .iter()
        .zip(&active)
        .map(|(&l, &a)| if a { l } else { 0.0 })
        .collect();
    let lam = tape.constant(Tensor::from_f64(&[effective.len()], &effective)?);
    let y = fuse(tape, width.y, depth.y, lam)?;

    let trace = LayerTrace {
        lambda,
        loops: d.hard.clone(),
        expected_loops: d.expected.clone(),
        expert_counts: width.outcome.counts(),
        mean_probs: width.outcome.mean_probs.clone(),
        ffn_applications: depth.applications,
        expert_evals: width.expert_evals,
        pruned: active.iter().filter(|a| !**a).count(),
        ffn_flops: width.ffn_flops + depth_flops,
        aux_loss: crate::width::load_balance_loss(&width.outcome),
    };
    Ok((y, trace))
}
