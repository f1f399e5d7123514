use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Parameters of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// All trainable parameters of a language model, generic over storage so
/// the same layout holds tensors, graph handles or optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmParams<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    /// Visual projection `W` mapping encoder features into the embedding space.
    pub projector: T,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: T,
    pub lnf_bias: T,
    pub head: T,
    pub head_bias: T,
}

impl<T> LayerParams<T> {
    const NAMES: [&'static str; 16] = [
        "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_gain", "ln2_bias", "w1", "b1",
        "w2", "b2",
    ];

    fn refs(&self) -> [&T; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn from_iter<I: Iterator<Item = T>>(it: &mut I) -> Option<Self> {
        Some(Self {
            ln1_gain: it.next()?,
            ln1_bias: it.next()?,
            wq: it.next()?,
            bq: it.next()?,
            wk: it.next()?,
            bk: it.next()?,
            wv: it.next()?,
            bv: it.next()?,
            wo: it.next()?,
            bo: it.next()?,
            ln2_gain: it.next()?,
            ln2_bias: it.next()?,
            w1: it.next()?,
            b1: it.next()?,
            w2: it.next()?,
            b2: it.next()?,
        })
    }
}

/// Which freeze group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Projector,
    Language,
}

impl<T> LmParams<T> {
    /// Parameters in canonical order with their checkpoint key.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = Vec::with_capacity(8 + 16 * self.layers.len());
        out.push(("tok_emb".into(), &self.tok_emb));
        out.push(("pos_emb".into(), &self.pos_emb));
        out.push(("projector".into(), &self.projector));
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LayerParams::<T>::NAMES.iter().zip(l.refs()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf_gain".into(), &self.lnf_gain));
        out.push(("lnf_bias".into(), &self.lnf_bias));
        out.push(("head".into(), &self.head));
        out.push(("head_bias".into(), &self.head_bias));
        out
    }

    /// Same order as [`LmParams::entries`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::with_capacity(8 + 16 * self.layers.len());
        out.push(&mut self.tok_emb);
        out.push(&mut self.pos_emb);
        out.push(&mut self.projector);
        for l in &mut self.layers {
            out.extend(l.refs_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.head);
        out.push(&mut self.head_bias);
        out
    }

    pub fn values(&self) -> Vec<&T> {
        self.entries().into_iter().map(|(_, t)| t).collect()
    }

    pub fn len(&self) -> usize {
        7 + 16 * self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Rebuilds from values in canonical order.
    pub fn from_values(num_layers: usize, values: Vec<T>) -> Option<Self> {
        let mut it = values.into_iter();
        let tok_emb = it.next()?;
        let pos_emb = it.next()?;
        let projector = it.next()?;
        let mut layers = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            layers.push(LayerParams::from_iter(&mut it)?);
        }
        let p = Self {
            tok_emb,
            pos_emb,
            projector,
            layers,
            lnf_gain: it.next()?,
            lnf_bias: it.next()?,
            head: it.next()?,
            head_bias: it.next()?,
        };
        it.next().is_none().then_some(p)
    }

    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> LmParams<U> {
        let values = self.entries().into_iter().map(|(n, t)| f(&n, t)).collect();
        LmParams::from_values(self.layers.len(), values).expect("same layout")
    }

    pub fn group_of(name: &str) -> ParamGroup {
        if name == "projector" {
            ParamGroup::Projector
        } else {
            ParamGroup::Language
        }
    }
}
