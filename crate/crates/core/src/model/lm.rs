use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{LayerParams, LmParams, ParamGroup};
use super::{ModelSpec, Role, VisualEncoder, VisualInput};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::math;

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct LmOutputs {
    /// `seq x vocab`; row `i` predicts token `i + 1`.
    pub logits: Var,
    /// Residual stream after each block, `seq x hidden_dim`.
    pub hidden_states: Vec<Var>,
    /// Post-softmax causal attention per layer and head, `seq x seq`.
    pub attention: Vec<Vec<Var>>,
}

/// Detached copy of [`LmOutputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct LmValues {
    pub logits: Tensor,
    pub hidden_states: Vec<Tensor>,
    pub attention: Vec<Vec<Tensor>>,
}

impl LmOutputs {
    pub fn values(&self, g: &Graph<'_>) -> LmValues {
        LmValues {
            logits: g.tensor(self.logits),
            hidden_states: self.hidden_states.iter().map(|&v| g.tensor(v)).collect(),
            attention: self
                .attention
                .iter()
                .map(|heads| heads.iter().map(|&v| g.tensor(v)).collect())
                .collect(),
        }
    }
}

/// Result of greedy decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Generated tokens, without the end token.
    pub tokens: Vec<usize>,
    /// Whether the end token was produced within the budget.
    pub finished: bool,
}

/// Visual-prefix decoder-only transformer with learned absolute positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerLM {
    pub spec: ModelSpec,
    pub encoder: VisualEncoder,
    pub params: LmParams<Tensor>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl TransformerLM {
    pub fn new(spec: ModelSpec, encoder: VisualEncoder, seed: u64) -> Result<Self> {
        spec.validate()?;
        if encoder.spec != spec.visual {
            return Err(Error::Config("encoder geometry differs from model spec".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, c) = (spec.hidden_dim, spec.ffn_dim, spec.vocab_size);
        let emb_std = 0.1;
        let fan_in = |n: usize| 1.0 / math::sqrt(n as f64);
        let tok_emb = Tensor::randn(&[c, d], emb_std, &mut rng);
        let pos_emb = Tensor::randn(&[spec.max_seq_len, d], emb_std, &mut rng);
        let projector = Tensor::randn(&[spec.visual.visual_dim, d], fan_in(spec.visual.visual_dim), &mut rng);
        let layers = (0..spec.num_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                wq: Tensor::randn(&[d, d], fan_in(d), &mut rng),
                bq: Tensor::zeros(&[d]),
                wk: Tensor::randn(&[d, d], fan_in(d), &mut rng),
                bk: Tensor::zeros(&[d]),
                wv: Tensor::randn(&[d, d], fan_in(d), &mut rng),
                bv: Tensor::zeros(&[d]),
                wo: Tensor::randn(&[d, d], fan_in(d), &mut rng),
                bo: Tensor::zeros(&[d]),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w1: Tensor::randn(&[d, f], fan_in(d), &mut rng),
                b1: Tensor::zeros(&[f]),
                w2: Tensor::randn(&[f, d], fan_in(f), &mut rng),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let params = LmParams {
            tok_emb,
            pos_emb,
            projector,
            layers,
            lnf_gain: Tensor::full(&[d], 1.0),
            lnf_bias: Tensor::zeros(&[d]),
            head: Tensor::randn(&[d, c], fan_in(d), &mut rng),
            head_bias: Tensor::zeros(&[c]),
        };
        Ok(Self { spec, encoder, params })
    }

    /// `Z_v = g(X_v)` through the frozen encoder.
    pub fn encode_visual(&self, image: &VisualInput) -> Result<Tensor> {
        self.encoder.encode(image)
    }

    /// Inserts every parameter as a graph leaf; `trainable` decides which
    /// groups require gradients.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p>, trainable: impl Fn(ParamGroup) -> bool) -> LmParams<Var> {
        self.params
            .map(|name, t| g.param(t, trainable(LmParams::<Tensor>::group_of(name))))
    }

    /// `H_v = Z_v W`.
    pub fn project_visual(&self, g: &mut Graph<'_>, vars: &LmParams<Var>, z_v: Var) -> Result<Var> {
        let cols = g.shape(z_v).last().copied().unwrap_or(0);
        if cols != self.spec.visual.visual_dim {
            return Err(Error::dim("project_visual", g.shape(z_v), &[self.spec.visual.visual_dim]));
        }
        g.matmul(z_v, vars.projector)
    }

    /// Contiguous run of image placeholder positions.
    pub fn image_span(&self, ids: &[usize]) -> Result<(usize, usize)> {
        let img = self.spec.image_token;
        let start = ids.iter().position(|&t| t == img);
        let Some(start) = start else {
            return Ok((0, 0));
        };
        let len = ids[start..].iter().take_while(|&&t| t == img).count();
        if ids[start + len..].contains(&img) {
            return Err(Error::Contract("image placeholders must be contiguous".into()));
        }
        Ok((start, start + len))
    }

    /// Causal forward over `[text ∥ H_v ∥ text]`, where the image
    /// placeholder positions of `ids` take the rows of `h_v`.
    pub fn forward(&self, g: &mut Graph<'_>, vars: &LmParams<Var>, h_v: Var, ids: &[usize]) -> Result<LmOutputs> {
        self.forward_rows(g, vars, h_v, ids, None)
    }

    /// [`forward`](Self::forward) with logits only for `rows`, in that order.
    pub fn forward_rows(
        &self,
        g: &mut Graph<'_>,
        vars: &LmParams<Var>,
        h_v: Var,
        ids: &[usize],
        rows: Option<&[usize]>,
    ) -> Result<LmOutputs> {
        let spec = &self.spec;
        let seq = ids.len();
        if seq == 0 {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if seq > spec.max_seq_len {
            return Err(Error::Length {
                len: seq,
                max: spec.max_seq_len,
            });
        }
        let (s, e) = self.image_span(ids)?;
        let nv = g.shape(h_v)[0];
        if e - s != nv {
            return Err(Error::Contract(format!(
                "{} image placeholders for {nv} visual tokens",
                e - s
            )));
        }
        let mut parts = Vec::with_capacity(3);
        if s > 0 {
            parts.push(g.embedding(vars.tok_emb, &ids[..s])?);
        }
        parts.push(h_v);
        if e < seq {
            parts.push(g.embedding(vars.tok_emb, &ids[e..])?);
        }
        let x = g.concat_rows(&parts)?;
        let pos = g.slice_rows(vars.pos_emb, 0, seq)?;
        let mut x = g.add(x, pos)?;

        let heads = spec.num_heads;
        let dh = spec.head_dim();
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut hidden_states = Vec::with_capacity(spec.num_layers);
        let mut attention = Vec::with_capacity(spec.num_layers);
        for l in &vars.layers {
            let h = g.layer_norm(x, l.ln1_gain, l.ln1_bias)?;
            let q = g.matmul(h, l.wq)?;
            let q = g.add_row(q, l.bq)?;
            let k = g.matmul(h, l.wk)?;
            let k = g.add_row(k, l.bk)?;
            let v = g.matmul(h, l.wv)?;
            let v = g.add_row(v, l.bv)?;
            let mut outs = Vec::with_capacity(heads);
            let mut maps = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let a = g.causal_softmax(scores, scale)?;
                outs.push(g.matmul(a, vh)?);
                maps.push(a);
            }
            let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
            let o = g.matmul(o, l.wo)?;
            let o = g.add_row(o, l.bo)?;
            x = g.add(x, o)?;

            let h = g.layer_norm(x, l.ln2_gain, l.ln2_bias)?;
            let f = g.matmul(h, l.w1)?;
            let f = g.add_row(f, l.b1)?;
            let f = g.gelu(f);
            let f = g.matmul(f, l.w2)?;
            let f = g.add_row(f, l.b2)?;
            x = g.add(x, f)?;
            hidden_states.push(x);
            attention.push(maps);
        }
        let x = match rows {
            Some(r) => g.select_rows(x, r)?,
            None => x,
        };
        let h = g.layer_norm(x, vars.lnf_gain, vars.lnf_bias)?;
        let logits = g.matmul(h, vars.head)?;
        let logits = g.add_row(logits, vars.head_bias)?;
        Ok(LmOutputs {
            logits,
            hidden_states,
            attention,
        })
    }

    /// Gradient-free forward from encoder features.
    pub fn forward_values(&self, z_v: &Tensor, ids: &[usize]) -> Result<LmValues> {
        self.forward_values_rows(z_v, ids, None)
    }

    /// Gradient-free forward with logits only for `rows`.
    pub fn forward_values_rows(&self, z_v: &Tensor, ids: &[usize], rows: Option<&[usize]>) -> Result<LmValues> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, |_| false);
        let z = g.param(z_v, false);
        let h_v = self.project_visual(&mut g, &vars, z)?;
        let out = self.forward_rows(&mut g, &vars, h_v, ids, rows)?;
        Ok(out.values(&g))
    }

    fn last_logits(&self, z_v: &Tensor, ids: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, |_| false);
        let z = g.param(z_v, false);
        let h_v = self.project_visual(&mut g, &vars, z)?;
        let out = self.forward_rows(&mut g, &vars, h_v, ids, Some(&[ids.len() - 1]))?;
        Ok(g.value(out.logits).to_vec())
    }

    /// Greedy decoding from encoder features. Ties go to the lowest id.
    pub fn generate_from_features(&self, z_v: &Tensor, prompt: &[usize], max_new: usize, eos: usize) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(Error::Contract("empty prompt".into()));
        }
        if prompt.len() > self.spec.max_seq_len {
            return Err(Error::Length {
                len: prompt.len(),
                max: self.spec.max_seq_len,
            });
        }
        let mut ids = prompt.to_vec();
        let mut tokens = Vec::new();
        for _ in 0..max_new {
            if ids.len() >= self.spec.max_seq_len {
                break;
            }
            let mut logits = self.last_logits(z_v, &ids)?;
            // placeholders are input-only
            logits[self.spec.image_token] = f64::NEG_INFINITY;
            let next = argmax(&logits);
            if next == eos {
                return Ok(Generation { tokens, finished: true });
            }
            tokens.push(next);
            ids.push(next);
        }
        Ok(Generation { tokens, finished: false })
    }

    pub fn generate(&self, image: &VisualInput, prompt: &[usize], max_new: usize, eos: usize) -> Result<Generation> {
        let z_v = self.encode_visual(image)?;
        self.generate_from_features(&z_v, prompt, max_new, eos)
    }

    /// Student built from every `keep_every`-th block of `self`
    /// (indices `0, k, 2k, ...`); embeddings, projector, head and encoder
    /// are copied.
    pub fn init_student_from_teacher(&self, keep_every: usize) -> Result<TransformerLM> {
        let n = self.spec.num_layers;
        if keep_every == 0 || !n.is_multiple_of(keep_every) {
            return Err(Error::Config(format!(
                "teacher has {n} layers, not divisible by keep_every={keep_every}"
            )));
        }
        let mut spec = self.spec;
        spec.num_layers = n / keep_every;
        spec.role = Role::Student;
        let mut params = self.params.clone();
        params.layers = self.params.layers.iter().step_by(keep_every).cloned().collect();
        Ok(TransformerLM {
            spec,
            encoder: self.encoder.clone(),
            params,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().iter().map(|t| t.len()).sum()
    }
}
