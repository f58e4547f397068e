//! Parameter layout, generic over what each slot holds (tensors, tape
//! handles, gradients), so every pass over the parameters shares one order.

/// Two-layer adapter from text width to model width.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// One pre-norm self-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
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
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
}

pub(crate) const BLOCK_FIELDS: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

impl<T> Block<T> {
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
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
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
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
        ]
    }

    pub(crate) fn from_fn(mut f: impl FnMut(&'static str) -> T) -> Self {
        let mut it = BLOCK_FIELDS.iter().map(|n| f(n));
        let mut next = || it.next().unwrap();
        Block {
            ln1_gain: next(),
            ln1_bias: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            ffn_w1: next(),
            ffn_b1: next(),
            ffn_w2: next(),
            ffn_b2: next(),
        }
    }
}

/// Every learnable tensor of the model.
///
/// Exactly one of `adapter` (text input) or `item_table` (ID-only baseline)
/// is present. `id_table` is the additive ID table used when fine-tuning
/// with IDs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub adapter: Option<Adapter<T>>,
    pub mask_token: Option<T>,
    pub item_table: Option<T>,
    pub id_table: Option<T>,
    pub position: T,
    pub blocks: Vec<Block<T>>,
    pub final_gain: T,
    pub final_bias: T,
}

impl<T> ModelParams<T> {
    /// Canonical `(name, slot)` list; this order is the checkpoint order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        if let Some(a) = &self.adapter {
            out.push(("adapter.w1".to_string(), &a.w1));
            out.push(("adapter.b1".to_string(), &a.b1));
            out.push(("adapter.w2".to_string(), &a.w2));
            out.push(("adapter.b2".to_string(), &a.b2));
        }
        if let Some(m) = &self.mask_token {
            out.push(("mask_token".to_string(), m));
        }
        if let Some(t) = &self.item_table {
            out.push(("item_table".to_string(), t));
        }
        if let Some(t) = &self.id_table {
            out.push(("id_table".to_string(), t));
        }
        out.push(("position".to_string(), &self.position));
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, slot) in BLOCK_FIELDS.iter().zip(b.refs()) {
                out.push((format!("blocks.{l}.{name}"), slot));
            }
        }
        out.push(("final_norm.gain".to_string(), &self.final_gain));
        out.push(("final_norm.bias".to_string(), &self.final_bias));
        out
    }

    /// Slots in canonical order.
    pub fn slots_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        if let Some(a) = &mut self.adapter {
            out.extend([&mut a.w1, &mut a.b1, &mut a.w2, &mut a.b2]);
        }
        if let Some(m) = &mut self.mask_token {
            out.push(m);
        }
        if let Some(t) = &mut self.item_table {
            out.push(t);
        }
        if let Some(t) = &mut self.id_table {
            out.push(t);
        }
        out.push(&mut self.position);
        for b in &mut self.blocks {
            out.extend(b.refs_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            adapter: self.adapter.as_ref().map(|a| Adapter { w1: f(&a.w1), b1: f(&a.b1), w2: f(&a.w2), b2: f(&a.b2) }),
            mask_token: self.mask_token.as_ref().map(&mut f),
            item_table: self.item_table.as_ref().map(&mut f),
            id_table: self.id_table.as_ref().map(&mut f),
            position: f(&self.position),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    let refs = b.refs();
                    let mut i = 0;
                    Block::from_fn(|_| {
                        i += 1;
                        f(refs[i - 1])
                    })
                })
                .collect(),
            final_gain: f(&self.final_gain),
            final_bias: f(&self.final_bias),
        }
    }
}
