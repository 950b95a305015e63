//! The full language model: embeddings, stacked layers, final norm and
//! vocabulary projection.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layer::{
    layer_forward_infer, layer_forward_train, BlockSettings, InferOptions, LayerParams, LayerTrace,
};
use crate::nn::{lm_loss, AttentionParams, FfnParams};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::rng::{normal_tensor, Rng};
use crate::tensor::{Real, Tensor};
use crate::width::build_expert_views;

/// Architecture of a model. Everything that changes the parameter layout
/// lives here and enters the checkpoint digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_expert: usize,
    pub max_loops: usize,
    pub shared_expert: bool,
    pub tie_embeddings: bool,
    pub norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: crate::data::VOCAB,
            d_model: 64,
            d_hidden: 256,
            n_layers: 2,
            n_heads: 4,
            max_seq: 64,
            n_experts: 8,
            top_k: 2,
            d_expert: 32,
            max_loops: 4,
            shared_expert: false,
            tie_embeddings: false,
            norm_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("d_hidden", self.d_hidden),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq", self.max_seq),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("d_expert", self.d_expert),
            ("max_loops", self.max_loops),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "n_heads",
                format!("{} does not divide d_model {}", self.n_heads, self.d_model),
            ));
        }
        if self.top_k > self.n_experts {
            return Err(Error::config(
                "top_k",
                format!("{} exceeds n_experts {}", self.top_k, self.n_experts),
            ));
        }
        if self.d_expert >= self.d_hidden {
            return Err(Error::config(
                "d_expert",
                format!("{} must be smaller than d_hidden {}", self.d_expert, self.d_hidden),
            ));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps", "must be positive"));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::config("init_std", "must be non-negative"));
        }
        Ok(())
    }

    pub fn block(&self) -> BlockSettings {
        BlockSettings {
            top_k: self.top_k,
            max_loops: self.max_loops,
            shared_expert: self.shared_expert,
            norm_eps: self.norm_eps,
        }
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

pub struct Model<T: Real = f64> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<LayerParams>,
    pub final_norm: ParamId,
    /// `None` when tied to the token embedding.
    pub unembed: Option<ParamId>,
}

impl<T: Real> Model<T> {
    /// Matrices drawn from `N(0, init_std^2)`, norm gains set to one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = Rng::with_stream(seed, 0);
        let mut params = ParamStore::new();
        let std = c.init_std;
        let mut matrix = |params: &mut ParamStore<T>, name: String, r: usize, k: usize| {
            params.add(name, normal_tensor(&mut rng, &[r, k], std), true)
        };
        let ones = |params: &mut ParamStore<T>, name: String, d: usize| {
            params.add(name, Tensor::full(&[d], T::one()), false)
        };
        let d = c.d_model;
        let tok_embed = matrix(&mut params, "tok_embed".into(), c.vocab, d);
        let pos_embed = matrix(&mut params, "pos_embed".into(), c.max_seq, d);
        let views = build_expert_views(c.d_hidden, c.d_expert, c.n_experts)?;
        let mut layers = Vec::with_capacity(c.n_layers);
        for i in 0..c.n_layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            let attention = AttentionParams {
                wq: matrix(&mut params, p("attn.wq"), d, d),
                wk: matrix(&mut params, p("attn.wk"), d, d),
                wv: matrix(&mut params, p("attn.wv"), d, d),
                wo: matrix(&mut params, p("attn.wo"), d, d),
                norm_gain: ones(&mut params, p("attn.norm"), d),
                heads: c.n_heads,
            };
            let ffn = FfnParams {
                w_gate: matrix(&mut params, p("ffn.w_gate"), d, c.d_hidden),
                w_up: matrix(&mut params, p("ffn.w_up"), d, c.d_hidden),
                w_down: matrix(&mut params, p("ffn.w_down"), c.d_hidden, d),
                norm_gain: ones(&mut params, p("ffn.norm"), d),
            };
            let router = matrix(&mut params, p("router"), d, c.n_experts);
            let loop_head = matrix(&mut params, p("loop_head"), d, c.max_loops);
            layers.push(LayerParams {
                attention,
                ffn,
                router,
                loop_head,
                views: views.clone(),
            });
        }
        let final_norm = ones(&mut params, "final_norm".into(), d);
        let unembed = (!c.tie_embeddings).then(|| matrix(&mut params, "unembed".into(), d, c.vocab));
        Ok(Self {
            config,
            params,
            tok_embed,
            pos_embed,
            layers,
            final_norm,
            unembed,
        })
    }
}

pub enum ForwardMode<'a> {
    Train {
        tau: f64,
        rng: &'a mut Rng,
        /// Soft aggregation in the forward pass instead of straight-through.
        soft: bool,
    },
    Infer(InferOptions),
}

pub struct ModelOutput {
    /// `[B, T, V]`.
    pub logits: Var,
    /// Sum of per-layer balance losses; `None` in inference.
    pub aux: Option<Var>,
    pub traces: Vec<LayerTrace>,
}

/// `tokens` is `[batch * seq]` in row-major order.
pub fn model_forward<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    vars: &BoundParams,
    tokens: &[usize],
    batch: usize,
    seq: usize,
    mut mode: ForwardMode<'_>,
) -> Result<ModelOutput> {
    let c = &model.config;
    if batch == 0 || seq == 0 {
        return Err(Error::contract("empty batch or sequence"));
    }
    if tokens.len() != batch * seq {
        return Err(Error::shape("model_forward", &[tokens.len()], &[batch, seq]));
    }
    if seq > c.max_seq {
        return Err(Error::contract(format!(
            "sequence length {seq} exceeds max_seq {}",
            c.max_seq
        )));
    }
    let tok = tape.embedding(vars.var(model.tok_embed), tokens, &[batch, seq])?;
    let positions: Vec<usize> = (0..batch * seq).map(|i| i % seq).collect();
    let pos = tape.embedding(vars.var(model.pos_embed), &positions, &[batch, seq])?;
    let mut x = tape.add(tok, pos)?;

    let settings = c.block();
    let mut traces = Vec::with_capacity(model.layers.len());
    let mut aux: Option<Var> = None;
    for lp in &model.layers {
        let layer = lp.bind(vars);
        match &mut mode {
            ForwardMode::Train { tau, rng, soft } => {
                let out = layer_forward_train(tape, x, &layer, &settings, *tau, rng, *soft)?;
                x = out.y;
                aux = Some(match aux {
                    Some(a) => tape.add(a, out.aux)?,
                    None => out.aux,
                });
                traces.push(out.trace);
            }
            ForwardMode::Infer(opts) => {
                let (y, trace) = layer_forward_infer(tape, x, &layer, &settings, opts)?;
                x = y;
                traces.push(trace);
            }
        }
    }
    let xn = tape.rms_norm(x, vars.var(model.final_norm), T::from_f64(c.norm_eps))?;
    let logits = match model.unembed {
        Some(u) => tape.matmul(xn, vars.var(u))?,
        None => tape.matmul_t(xn, vars.var(model.tok_embed))?,
    };
    Ok(ModelOutput { logits, aux, traces })
}

/// Forward pass plus next-token loss.
pub struct LossOutput {
    pub loss: Var,
    pub lm: Var,
    pub aux: Option<Var>,
    pub traces: Vec<LayerTrace>,
}

/// `lm_loss + aux_weight * sum_layers balance_loss`.
#[allow(clippy::too_many_arguments)]
pub fn model_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    vars: &BoundParams,
    tokens: &[usize],
    batch: usize,
    seq: usize,
    mode: ForwardMode<'_>,
    aux_weight: f64,
) -> Result<LossOutput> {
    let out = model_forward(tape, model, vars, tokens, batch, seq, mode)?;
    let lm = lm_loss(tape, out.logits, tokens, batch, seq)?;
    let loss = match out.aux {
        Some(a) => {
            let weighted = tape.scale(a, T::from_f64(aux_weight));
            tape.add(lm, weighted)?
        }
        None => lm,
    };
    Ok(LossOutput {
        loss,
        lm,
        aux: out.aux,
        traces: out.traces,
    })
}
