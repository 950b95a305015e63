//! Virtual mixture of experts carved out of one shared FFN.
//!
//! Expert `k` owns the hidden units `[k*S, k*S + d_expert)` where the stride
//! `S = floor((d_hidden - d_expert) / (N - 1))` spreads the views evenly over
//! the hidden dimension. The view selects columns of `w_gate`/`w_up` and the
//! matching rows of `w_down`; the multiplies read those blocks in place.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ffn_branch, FfnWeights};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertView {
    pub index: usize,
    pub start: usize,
    pub len: usize,
}

impl ExpertView {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

pub fn compute_stride(d_hidden: usize, d_expert: usize, n_experts: usize) -> Result<usize> {
    if d_expert == 0 || d_expert >= d_hidden {
        return Err(Error::config(
            "d_expert",
            format!("must satisfy 1 <= d_expert < d_hidden, got {d_expert} with d_hidden {d_hidden}"),
        ));
    }
    if n_experts == 0 {
        return Err(Error::config("n_experts", "must be at least 1"));
    }
    if n_experts == 1 {
        return Ok(0);
    }
    Ok((d_hidden - d_expert) / (n_experts - 1))
}

pub fn build_expert_views(d_hidden: usize, d_expert: usize, n_experts: usize) -> Result<Vec<ExpertView>> {
    let stride = compute_stride(d_hidden, d_expert, n_experts)?;
    let last = (n_experts - 1) * stride + d_expert;
    if last > d_hidden {
        return Err(Error::contract(format!(
            "expert view ends at {last}, beyond d_hidden {d_hidden}"
        )));
    }
    Ok((0..n_experts)
        .map(|index| ExpertView {
            index,
            start: index * stride,
            len: d_expert,
        })
        .collect())
}

/// True when no hidden unit belongs to two views.
pub fn views_disjoint(views: &[ExpertView]) -> bool {
    views.iter().enumerate().all(|(i, a)| {
        views[i + 1..]
            .iter()
            .all(|b| a.range().end <= b.start || b.range().end <= a.start)
    })
}

/// The non-residual part of expert `view` on normalized input `hn`.
pub fn expert_branch<T: Real>(tape: &mut Tape<T>, hn: Var, w: &FfnWeights, view: &ExpertView) -> Result<Var> {
    let gate = tape.matmul_cols(hn, w.w_gate, view.start, view.len)?;
    let up = tape.matmul_cols(hn, w.w_up, view.start, view.len)?;
    let act = tape.silu(gate);
    let mixed = tape.mul(act, up)?;
    tape.matmul_rows(mixed, w.w_down, view.start, view.len)
}

/// `h + expert_branch(norm(h))`.
pub fn expert_forward<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    w: &FfnWeights,
    view: &ExpertView,
    eps: T,
) -> Result<Var> {
    let hn = tape.rms_norm(h, w.norm_gain, eps)?;
    let branch = expert_branch(tape, hn, w, view)?;
    tape.add(h, branch)
}

/// Router statistics for one batch of tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingOutcome {
    pub n_experts: usize,
    pub top_k: usize,
    /// Softmax over all experts, `[tokens * N]`.
    pub probs: Vec<f64>,
    /// Selected experts per token, best first.
    pub selected: Vec<Vec<usize>>,
    /// Renormalized weights of `selected`, same order.
    pub weights: Vec<Vec<f64>>,
    /// Share of the `tokens * K` assignments that went to each expert.
    pub fractions: Vec<f64>,
    /// Mean router probability of each expert.
    pub mean_probs: Vec<f64>,
}

impl RoutingOutcome {
    pub fn tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_experts];
        for sel in &self.selected {
            for &k in sel {
                c[k] += 1;
            }
        }
        c
    }
}

/// Indices of the `k` largest entries of `row`, ties to the lowest index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Tape handles produced by [`route_topk`].
#[derive(Clone, Copy, Debug)]
pub struct Routing {
    /// Softmax probabilities `[tokens, N]`.
    pub probs: Var,
    /// Renormalized top-K weights, zero for unselected experts, `[tokens, N]`.
    pub gates: Var,
}

/// Router logits `h w_g`, softmax over all `N`, top-K by logit and
/// renormalization of the kept probabilities.
pub fn route_topk<T: Real>(tape: &mut Tape<T>, h: Var, w_g: Var, top_k: usize) -> Result<(Routing, RoutingOutcome)> {
    let n = match *tape.shape(w_g) {
        [_, n] => n,
        _ => return Err(Error::shape("route_topk", tape.shape(w_g), &[])),
    };
    if top_k == 0 || top_k > n {
        return Err(Error::contract(format!("top_k {top_k} must lie in [1, {n}]")));
    }
    let logits = tape.matmul(h, w_g)?;
    let tokens = tape.value(logits).rows();
    let flat = tape.reshape(logits, &[tokens, n])?;
    let probs = tape.softmax(flat, 1)?;

    let lv = tape.value(flat).to_f64_vec();
    let selected: Vec<Vec<usize>> = lv.chunks(n).map(|row| top_k_indices(row, top_k)).collect();
    let gates = tape.topk_renorm(probs, &selected)?;

    let pv = tape.value(probs).to_f64_vec();
    let gv = tape.value(gates).to_f64_vec();
    let weights = selected
        .iter()
        .enumerate()
        .map(|(r, sel)| sel.iter().map(|&k| gv[r * n + k]).collect())
        .collect();
    let mut outcome = RoutingOutcome {
        n_experts: n,
        top_k,
        probs: pv,
        selected,
        weights,
        fractions: Vec::new(),
        mean_probs: vec![0.0; n],
    };
    let denom = (tokens * top_k) as f64;
    outcome.fractions = outcome.counts().iter().map(|&c| c as f64 / denom).collect();
    for row in outcome.probs.chunks(n) {
        for (m, &p) in outcome.mean_probs.iter_mut().zip(row) {
            *m += p;
        }
    }
    for m in &mut outcome.mean_probs {
        *m /= tokens as f64;
    }
    Ok((Routing { probs, gates }, outcome))
}

/// `N * sum_i f_i P_i`, the Switch-style balance penalty.
pub fn load_balance_loss(outcome: &RoutingOutcome) -> f64 {
    let n = outcome.n_experts as f64;
    n * outcome
        .fractions
        .iter()
        .zip(&outcome.mean_probs)
        .map(|(f, p)| f * p)
        .sum::<f64>()
}

/// The same penalty on the tape, differentiable through `P_i`.
pub fn load_balance_var<T: Real>(tape: &mut Tape<T>, routing: &Routing, outcome: &RoutingOutcome) -> Result<Var> {
    let f: Vec<T> = outcome.fractions.iter().map(|&x| T::from_f64(x)).collect();
    tape.load_balance(routing.probs, &f)
}

pub struct WidthOutput {
    pub y: Var,
    pub routing: Routing,
    pub outcome: RoutingOutcome,
    /// Number of (token, expert) branch evaluations actually executed.
    pub expert_evals: usize,
    /// Matrix FLOPs spent in expert branches (router excluded).
    pub ffn_flops: u64,
}

/// `y = h + sum_{k in TopK} g_k * branch_k(norm(h))`.
///
/// Tokens with `active[t] == false` are routed but never dispatched; their
/// output row equals `h`. Experts are aggregated in ascending index order.
/// With `shared` set the full FFN branch is added to every token unweighted.
#[allow(clippy::too_many_arguments)]
pub fn width_forward<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    w: &FfnWeights,
    views: &[ExpertView],
    w_g: Var,
    top_k: usize,
    eps: T,
    active: Option<&[bool]>,
    shared: bool,
) -> Result<WidthOutput> {
    if views.len() != tape.shape(w_g).last().copied().unwrap_or(0) {
        return Err(Error::shape("width_forward", tape.shape(w_g), &[views.len()]));
    }
    let shape = tape.shape(h).to_vec();
    let d = *shape.last().expect("non-empty shape");
    let tokens = tape.value(h).rows();
    if active.is_some_and(|a| a.len() != tokens) {
        return Err(Error::shape("width_forward", &shape, &[active.map_or(0, <[bool]>::len)]));
    }
    let (routing, outcome) = route_topk(tape, h, w_g, top_k)?;
    let before = tape.matmul_flops();
    let flat_h = tape.reshape(h, &[tokens, d])?;
    let hn = tape.rms_norm(flat_h, w.norm_gain, eps)?;

    let mut acc: Option<Var> = None;
    let mut expert_evals = 0;
    for view in views {
        let rows: Vec<usize> = (0..tokens)
            .filter(|&t| active.is_none_or(|a| a[t]) && outcome.selected[t].contains(&view.index))
            .collect();
        if rows.is_empty() {
            continue;
        }
        expert_evals += rows.len();
        let x = tape.gather_rows(hn, &rows)?;
        let branch = expert_branch(tape, x, w, view)?;
        let entries: Vec<(usize, usize)> = rows.iter().map(|&r| (r, view.index)).collect();
        let g = tape.gather_entries(routing.gates, &entries)?;
        let weighted = tape.row_scale(branch, g)?;
        let placed = tape.scatter_add_rows(weighted, &rows, &[tokens, d])?;
        acc = Some(match acc {
            Some(a) => tape.add(a, placed)?,
            None => placed,
        });
    }
    if shared {
        let rows: Vec<usize> = (0..tokens).filter(|&t| active.is_none_or(|a| a[t])).collect();
        if !rows.is_empty() {
            let x = tape.gather_rows(hn, &rows)?;
            let branch = ffn_branch(tape, x, w)?;
            let placed = tape.scatter_add_rows(branch, &rows, &[tokens, d])?;
            acc = Some(match acc {
                Some(a) => tape.add(a, placed)?,
                None => placed,
            });
        }
    }
    let y = match acc {
        Some(a) => {
            let a = tape.reshape(a, &shape)?;
            tape.add(h, a)?
        }
        None => h,
    };
    Ok(WidthOutput {
        y,
        routing,
        outcome,
        expert_evals,
        ffn_flops: tape.matmul_flops() - before,
    })
}
