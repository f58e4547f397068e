//! The recommender network.
//!
//! Text vectors pass through the adapter `σ(σ(m·W1 + b1)·W2 + b2)` to give
//! one model-width row per item. A sequence is embedded as item rows plus a
//! learned position table, run through pre-norm self-attention blocks, and
//! scored against the item rows with a full-catalog softmax.

mod checkpoint;
mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{context_batch, AttentionMode, InputBatch, TrainingBatch};
use crate::embeddings::ItemEmbeddingMatrix;
use crate::error::{Error, Result};
use crate::tape::{dropout_mask, AttentionSpec, Tape, Var};
use crate::tensor::{gemm_acc, softmax_in_place, transpose, Scalar, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use params::{Adapter, Block, ModelParams};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of the frozen text vectors.
    pub text_dim: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Number of positions in the position table.
    pub max_len: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub num_items: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            text_dim: 768,
            dim: 64,
            layers: 2,
            heads: 2,
            ffn_mult: 4,
            max_len: 50,
            dropout: 0.2,
            activation: Activation::Gelu,
            num_items: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.text_dim == 0 || self.dim == 0 || self.heads == 0 || self.ffn_mult == 0 || self.num_items == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// How items enter and leave the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemSource {
    /// Adapted text vectors only.
    Text,
    /// Adapted text vectors plus a learned ID table.
    TextId,
    /// Learned ID table only; no text, no mask token.
    IdOnly,
}

fn trunc_normal<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break F::of(z * INIT_STD);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_grad()
}

fn filled<F: Scalar>(shape: &[usize], v: f64) -> Tensor<F> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![F::of(v); n]).unwrap().with_grad()
}

/// Frozen text matrix as a tensor; it never requires gradients.
pub fn text_tensor<F: Scalar>(m: &ItemEmbeddingMatrix) -> Tensor<F> {
    let data = m.data().iter().map(|&v| F::of(v as f64)).collect();
    Tensor::new(vec![m.len(), m.dim()], data).unwrap()
}

/// Parameters and the frozen text matrix registered on one tape.
pub struct Bound {
    pub params: ModelParams<Var>,
    pub text: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<F>>,
}

impl<F: Scalar> Model<F> {
    /// Fresh parameters: truncated normal (std 0.02) weights, zero biases,
    /// unit layer-norm gains, and a zero ID table for [`ItemSource::TextId`].
    pub fn new(config: ModelConfig, source: ItemSource, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v) = (config.dim, config.num_items);
        let text = source != ItemSource::IdOnly;
        let adapter = text.then(|| Adapter {
            w1: trunc_normal(&mut rng, &[config.text_dim, d]),
            b1: filled(&[d], 0.0),
            w2: trunc_normal(&mut rng, &[d, d]),
            b2: filled(&[d], 0.0),
        });
        let mask_token = text.then(|| trunc_normal(&mut rng, &[d]));
        let item_table = (!text).then(|| trunc_normal(&mut rng, &[v, d]));
        let position = trunc_normal(&mut rng, &[config.max_len, d]);
        let inner = d * config.ffn_mult;
        let blocks = (0..config.layers)
            .map(|_| {
                Block::from_fn(|name| match name {
                    "ln1.gain" | "ln2.gain" => filled(&[d], 1.0),
                    "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => trunc_normal(&mut rng, &[d, d]),
                    "ffn.w1" => trunc_normal(&mut rng, &[d, inner]),
                    "ffn.b1" => filled(&[inner], 0.0),
                    "ffn.w2" => trunc_normal(&mut rng, &[inner, d]),
                    _ => filled(&[d], 0.0),
                })
            })
            .collect();
        let mut model = Model {
            params: ModelParams {
                adapter,
                mask_token,
                item_table,
                id_table: None,
                position,
                blocks,
                final_gain: filled(&[d], 1.0),
                final_bias: filled(&[d], 0.0),
            },
            config,
        };
        if source == ItemSource::TextId {
            model.add_id_table()?;
        }
        Ok(model)
    }

    pub fn source(&self) -> ItemSource {
        match (&self.params.adapter, &self.params.id_table) {
            (None, _) => ItemSource::IdOnly,
            (Some(_), None) => ItemSource::Text,
            (Some(_), Some(_)) => ItemSource::TextId,
        }
    }

    /// Switches a text model to text+ID scoring with a zero ID table, so the
    /// model's outputs are unchanged until the table is trained.
    pub fn add_id_table(&mut self) -> Result<()> {
        if self.source() != ItemSource::Text {
            return Err(Error::Mode(format!("cannot add an ID table to a {:?} model", self.source())));
        }
        self.params.id_table = Some(filled(&[self.config.num_items, self.config.dim], 0.0));
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model { config: self.config.clone(), params: self.params.map(|t| t.cast()) }
    }

    pub fn zero_grad(&mut self) {
        for t in self.params.slots_mut() {
            t.zero_grad();
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, text: Option<&Tensor<F>>) -> Result<Bound> {
        let text = match (self.source(), text) {
            (ItemSource::IdOnly, _) => None,
            (_, None) => return Err(Error::Mode("text model needs the item text matrix".into())),
            (_, Some(t)) => {
                if t.shape() != [self.config.num_items, self.config.text_dim] {
                    return Err(Error::Shape(format!(
                        "text matrix {:?}, model expects [{}, {}]",
                        t.shape(),
                        self.config.num_items,
                        self.config.text_dim
                    )));
                }
                Some(tape.constant(t.clone()))
            }
        };
        let params = self.params.map(|t| tape.leaf(t));
        Ok(Bound { params, text })
    }

    fn activate(&self, tape: &mut Tape<F>, x: Var) -> Var {
        match self.config.activation {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }

    /// Adapted text rows `[num_items × dim]`.
    pub fn adapter_forward(&self, tape: &mut Tape<F>, bound: &Bound) -> Result<Var> {
        let (Some(a), Some(text)) = (&bound.params.adapter, bound.text) else {
            return Err(Error::Mode("ID-only model has no adapter".into()));
        };
        let h = tape.matmul(text, a.w1)?;
        let h = tape.add_row(h, a.b1)?;
        let h = self.activate(tape, h);
        let h = tape.matmul(h, a.w2)?;
        let h = tape.add_row(h, a.b2)?;
        Ok(self.activate(tape, h))
    }

    /// Item rows used for both input lookup and scoring.
    pub fn item_representations(&self, tape: &mut Tape<F>, bound: &Bound) -> Result<Var> {
        match self.source() {
            ItemSource::IdOnly => Ok(bound.params.item_table.expect("id-only model has an item table")),
            ItemSource::Text => self.adapter_forward(tape, bound),
            ItemSource::TextId => {
                let text = self.adapter_forward(tape, bound)?;
                tape.add(text, bound.params.id_table.expect("text+id model has an id table"))
            }
        }
    }

    /// `E[t] = item_row[input_t] + P[t]`; the mask index (`num_items`) looks up
    /// the mask vector instead.
    pub fn embed(&self, tape: &mut Tape<F>, bound: &Bound, items: Var, batch: &InputBatch) -> Result<Var> {
        if batch.len > self.config.max_len {
            return Err(Error::Index(format!(
                "sequence length {} exceeds {} positions",
                batch.len, self.config.max_len
            )));
        }
        let table = match bound.params.mask_token {
            Some(mask) => tape.concat_rows(items, mask)?,
            None => items,
        };
        let tokens = tape.gather(table, &batch.inputs)?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.len).collect();
        let pos = tape.gather(bound.params.position, &positions)?;
        tape.add(tokens, pos)
    }

    /// Runs the attention blocks. With zero layers the input passes through
    /// untouched; otherwise a final layer norm closes the stack.
    pub fn backbone(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        input: Var,
        batch: &InputBatch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let rate = self.config.dropout;
        let spec = AttentionSpec {
            batch: batch.batch,
            len: batch.len,
            heads: self.config.heads,
            causal: batch.mode == AttentionMode::Causal,
            pad: batch.pad.clone(),
        };
        let mut x = input;
        for b in &bound.params.blocks {
            let h = tape.layer_norm(x, b.ln1_gain, b.ln1_bias)?;
            let q = tape.matmul(h, b.wq)?;
            let q = tape.add_row(q, b.bq)?;
            let k = tape.matmul(h, b.wk)?;
            let k = tape.add_row(k, b.bk)?;
            let v = tape.matmul(h, b.wv)?;
            let v = tape.add_row(v, b.bv)?;
            let drop = match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => Some(dropout_mask(batch.batch * spec.heads * batch.len * batch.len, rate, r)),
                _ => None,
            };
            let a = tape.attention(q, k, v, spec.clone(), drop)?;
            let o = tape.matmul(a, b.wo)?;
            let o = tape.add_row(o, b.bo)?;
            x = tape.add(x, o)?;

            let h = tape.layer_norm(x, b.ln2_gain, b.ln2_bias)?;
            let f = tape.matmul(h, b.ffn_w1)?;
            let f = tape.add_row(f, b.ffn_b1)?;
            let f = self.activate(tape, f);
            let f = tape.matmul(f, b.ffn_w2)?;
            let mut f = tape.add_row(f, b.ffn_b2)?;
            if let Some(r) = rng.as_deref_mut() {
                if rate > 0.0 {
                    let len = tape.value(f).len();
                    f = tape.mul_const(f, dropout_mask(len, rate, r))?;
                }
            }
            x = tape.add(x, f)?;
        }
        if bound.params.blocks.is_empty() {
            return Ok(x);
        }
        tape.layer_norm(x, bound.params.final_gain, bound.params.final_bias)
    }

    /// Item rows plus backbone output `[batch·len × dim]`.
    pub fn encode(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        batch: &InputBatch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let items = self.item_representations(tape, bound)?;
        let e = self.embed(tape, bound, items, batch)?;
        let out = self.backbone(tape, bound, e, batch, rng)?;
        Ok((items, out))
    }

    /// Mean cross-entropy of the batch targets under full-catalog softmax.
    /// Dropout is active iff `rng` is given.
    pub fn loss(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        batch: &TrainingBatch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if batch.targets.is_empty() {
            return Err(Error::Argument("batch has no targets".into()));
        }
        let (items, out) = self.encode(tape, bound, &batch.input, rng)?;
        let hidden = tape.gather(out, &batch.target_positions())?;
        let logits = tape.matmul_bt(hidden, items)?;
        tape.cross_entropy(logits, &batch.target_items())
    }

    /// Copies tape gradients into the parameter tensors; parameters the loss
    /// did not reach get zeros.
    pub fn collect_grads(&mut self, tape: &Tape<F>, bound: &Bound) {
        let vars: Vec<Var> = bound.params.named().into_iter().map(|(_, v)| *v).collect();
        for (t, v) in self.params.slots_mut().into_iter().zip(vars) {
            t.grad = Some(match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![F::zero(); t.len()],
            });
        }
    }

    /// Scores of every item for each context, taken at the context's last
    /// position with dropout off. Contexts longer than `max_len` keep their
    /// most recent items.
    pub fn context_scores(&self, text: Option<&Tensor<F>>, contexts: &[&[usize]]) -> Result<Vec<Vec<F>>> {
        const CHUNK: usize = 256;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, text)?;
        let items = self.item_representations(&mut tape, &bound)?;
        let item_rows = tape.value(items).clone();
        let mut out = Vec::with_capacity(contexts.len());
        for chunk in contexts.chunks(CHUNK) {
            if let Some(c) = chunk.iter().find(|c| c.is_empty()) {
                return Err(Error::Argument(format!("empty context {c:?}")));
            }
            let batch = context_batch(chunk, self.config.max_len);
            let mark = tape.len();
            let e = self.embed(&mut tape, &bound, items, &batch)?;
            let h = self.backbone(&mut tape, &bound, e, &batch, None)?;
            let last: Vec<usize> = batch.lengths.iter().enumerate().map(|(b, &l)| b * batch.len + l - 1).collect();
            let hv = tape.value(h);
            for &p in &last {
                out.push(logits_row(hv.row(p), &item_rows));
            }
            tape.truncate(mark);
        }
        Ok(out)
    }

    /// Final hidden states at the last position of each context.
    pub fn context_hidden(&self, text: Option<&Tensor<F>>, contexts: &[&[usize]]) -> Result<Vec<Vec<F>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, text)?;
        let items = self.item_representations(&mut tape, &bound)?;
        let batch = context_batch(contexts, self.config.max_len);
        let e = self.embed(&mut tape, &bound, items, &batch)?;
        let h = self.backbone(&mut tape, &bound, e, &batch, None)?;
        let hv = tape.value(h);
        Ok(batch.lengths.iter().enumerate().map(|(b, &l)| hv.row(b * batch.len + l - 1).to_vec()).collect())
    }

    /// The item rows this model scores against, detached from any tape.
    pub fn item_rows(&self, text: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, text)?;
        let items = self.item_representations(&mut tape, &bound)?;
        Ok(tape.value(items).clone())
    }
}

/// `hidden · item_rowsᵀ`, with the same kernel the tape uses.
fn logits_row<F: Scalar>(hidden: &[F], item_rows: &Tensor<F>) -> Vec<F> {
    let (v, d) = (item_rows.rows(), item_rows.cols());
    let t = transpose(item_rows.data(), v, d);
    let mut out = vec![F::zero(); v];
    gemm_acc(hidden, &t, &mut out, 1, d, v);
    out
}

/// Distribution over items from one hidden state and the adapted text rows.
pub fn score_text<F: Scalar>(hidden: &[F], text_rows: &Tensor<F>) -> Result<Vec<F>> {
    if hidden.len() != text_rows.cols() {
        return Err(Error::Shape(format!("hidden width {} vs item width {}", hidden.len(), text_rows.cols())));
    }
    let mut p = logits_row(hidden, text_rows);
    softmax_in_place(&mut p);
    Ok(p)
}

/// Distribution over items scored against text rows plus ID rows.
pub fn score_text_id<F: Scalar>(hidden: &[F], text_rows: &Tensor<F>, id_rows: Option<&Tensor<F>>) -> Result<Vec<F>> {
    let id_rows = id_rows.ok_or_else(|| Error::Mode("text+ID scoring needs an ID table".into()))?;
    if id_rows.shape() != text_rows.shape() {
        return Err(Error::Shape(format!("ID table {:?} vs text rows {:?}", id_rows.shape(), text_rows.shape())));
    }
    let sum: Vec<F> = text_rows.data().iter().zip(id_rows.data()).map(|(&a, &b)| a + b).collect();
    score_text(hidden, &Tensor::new(text_rows.shape().to_vec(), sum)?)
}

#[cfg(test)]
mod tests;
