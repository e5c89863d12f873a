//! Causal self-attention sequence encoder with tied item embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::PAD_ID;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamSet, Real, Tape, Tensor, Var};

/// Standard deviation of the normal initialiser for embeddings and weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub max_len: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub layernorm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            max_len: 50,
            num_blocks: 2,
            num_heads: 2,
            dropout: 0.5,
            layernorm_eps: 1e-12,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_heads == 0 || !self.dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "encoder.dim ({}) must be a positive multiple of encoder.num_heads ({})",
                self.dim, self.num_heads
            )));
        }
        if self.max_len == 0 || self.num_blocks == 0 {
            return Err(Error::Config(
                "encoder.max_len and encoder.num_blocks must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "encoder.dropout must lie in [0,1), got {}",
                self.dropout
            )));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(Error::Config("encoder.layernorm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// `batch x len` ids, left-padded with [`PAD_ID`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub len: usize,
}

impl SequenceBatch {
    /// Keeps the most recent `len` items of every sequence.
    pub fn left_padded<S: AsRef<[usize]>>(seqs: &[S], len: usize) -> Result<Self> {
        let mut ids = vec![PAD_ID; seqs.len() * len];
        let mut lengths = Vec::with_capacity(seqs.len());
        for (b, s) in seqs.iter().enumerate() {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::Data(format!("sequence {b} of the batch is empty")));
            }
            let kept = &s[s.len().saturating_sub(len)..];
            ids[(b + 1) * len - kept.len()..(b + 1) * len].copy_from_slice(kept);
            lengths.push(kept.len());
        }
        Ok(Self { ids, lengths, len })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    /// Row-stacks several batches with the same `len`.
    pub fn stack(parts: &[&SequenceBatch]) -> Result<Self> {
        let len = parts.first().map_or(0, |p| p.len);
        if parts.iter().any(|p| p.len != len) {
            return Err(Error::Data("cannot stack batches of different lengths".into()));
        }
        Ok(Self {
            ids: parts.iter().flat_map(|p| p.ids.iter().copied()).collect(),
            lengths: parts.iter().flat_map(|p| p.lengths.iter().copied()).collect(),
            len,
        })
    }
}

#[derive(Clone, Debug)]
struct BlockParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

pub struct EncoderOutput {
    /// `[batch * len, dim]`; padded positions are zero.
    pub hidden: Var,
    /// `[batch, dim]`, the hidden state at each row's last position.
    pub seq_repr: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub num_items: usize,
    item_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockParams>,
}

impl Encoder {
    /// Registers the encoder's parameters. The item table has `num_items + 2`
    /// rows: padding, the items, and the mask token.
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: EncoderConfig,
        num_items: usize,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let item_emb = params.add_normal("encoder.item_emb", &[num_items + 2, d], INIT_STD, rng)?;
        let pos_emb = params.add_normal("encoder.pos_emb", &[config.max_len, d], INIT_STD, rng)?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            let mut w = |name: &str, shape: &[usize]| {
                params.add_normal(format!("encoder.block{b}.{name}"), shape, INIT_STD, rng)
            };
            let (wq, wk, wv, wo) = (
                w("wq", &[d, d])?,
                w("wk", &[d, d])?,
                w("wv", &[d, d])?,
                w("wo", &[d, d])?,
            );
            let (w1, w2) = (w("w1", &[d, 4 * d])?, w("w2", &[4 * d, d])?);
            let mut c = |name: &str, n: usize, v: f64| {
                params.add(format!("encoder.block{b}.{name}"), Tensor::full(&[n], T::lit(v)))
            };
            blocks.push(BlockParams {
                wq,
                bq: c("bq", d, 0.0)?,
                wk,
                bk: c("bk", d, 0.0)?,
                wv,
                bv: c("bv", d, 0.0)?,
                wo,
                bo: c("bo", d, 0.0)?,
                ln1_gain: c("ln1_gain", d, 1.0)?,
                ln1_bias: c("ln1_bias", d, 0.0)?,
                w1,
                b1: c("b1", 4 * d, 0.0)?,
                w2,
                b2: c("b2", d, 0.0)?,
                ln2_gain: c("ln2_gain", d, 1.0)?,
                ln2_bias: c("ln2_bias", d, 0.0)?,
            });
        }
        Ok(Self {
            config,
            num_items,
            item_emb,
            pos_emb,
            blocks,
        })
    }

    /// Re-attaches an encoder to parameters registered under the usual names.
    pub fn from_params<T: Real>(config: EncoderConfig, num_items: usize, params: &ParamSet<T>) -> Result<Self> {
        let id = |name: String| {
            params
                .id(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
        };
        let blocks = (0..config.num_blocks)
            .map(|b| {
                let p = |n: &str| id(format!("encoder.block{b}.{n}"));
                Ok(BlockParams {
                    wq: p("wq")?,
                    bq: p("bq")?,
                    wk: p("wk")?,
                    bk: p("bk")?,
                    wv: p("wv")?,
                    bv: p("bv")?,
                    wo: p("wo")?,
                    bo: p("bo")?,
                    ln1_gain: p("ln1_gain")?,
                    ln1_bias: p("ln1_bias")?,
                    w1: p("w1")?,
                    b1: p("b1")?,
                    w2: p("w2")?,
                    b2: p("b2")?,
                    ln2_gain: p("ln2_gain")?,
                    ln2_bias: p("ln2_bias")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let enc = Self {
            item_emb: id("encoder.item_emb".into())?,
            pos_emb: id("encoder.pos_emb".into())?,
            config,
            num_items,
            blocks,
        };
        let rows = params.get(enc.item_emb).shape()[0];
        if rows != num_items + 2 {
            return Err(Error::Data(format!(
                "item table has {rows} rows but the dataset needs {}",
                num_items + 2
            )));
        }
        Ok(enc)
    }

    pub fn item_table(&self) -> ParamId {
        self.item_emb
    }

    pub fn mask_token(&self) -> usize {
        self.num_items + 1
    }

    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        batch: &SequenceBatch,
        train: bool,
        rng: &mut R,
    ) -> Result<EncoderOutput> {
        let cfg = &self.config;
        let (b, l, d) = (batch.batch(), batch.len, cfg.dim);
        if l != cfg.max_len {
            return Err(Error::Data(format!(
                "batch length {l} differs from encoder.max_len {}",
                cfg.max_len
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&i| i > self.mask_token()) {
            return Err(Error::Data(format!(
                "item id {bad} exceeds the embedding table (max {})",
                self.mask_token()
            )));
        }
        let p = cfg.dropout;
        let valid: Vec<bool> = batch.ids.iter().map(|&i| i != PAD_ID).collect();
        let keep = Tensor::new(
            &[b * l, d],
            valid
                .iter()
                .flat_map(|&v| std::iter::repeat_n(if v { T::one() } else { T::zero() }, d))
                .collect(),
        )?;
        let keep = tape.constant(keep);

        let table = tape.param(params, self.item_emb);
        let pos_table = tape.param(params, self.pos_emb);
        let items = tape.embedding_gather(table, &batch.ids)?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = tape.embedding_gather(pos_table, &positions)?;
        let mut x = tape.add(items, pos)?;
        x = tape.dropout(x, p, train, rng);
        x = tape.mul(x, keep)?;

        for blk in &self.blocks {
            let lin = |tape: &mut Tape<T>, x: Var, w: ParamId, bias: ParamId| -> Result<Var> {
                let wv = tape.param(params, w);
                let bv = tape.param(params, bias);
                let y = tape.matmul(x, wv)?;
                tape.add_bias(y, bv)
            };
            let q = lin(tape, x, blk.wq, blk.bq)?;
            let k = lin(tape, x, blk.wk, blk.bk)?;
            let v = lin(tape, x, blk.wv, blk.bv)?;
            let att = tape.causal_masked_attention(q, k, v, b, l, cfg.num_heads, &valid)?;
            let att = lin(tape, att, blk.wo, blk.bo)?;
            let att = tape.dropout(att, p, train, rng);
            let res = tape.add(x, att)?;
            let (g1, b1) = (tape.param(params, blk.ln1_gain), tape.param(params, blk.ln1_bias));
            x = tape.layernorm(res, g1, b1, cfg.layernorm_eps)?;

            let h = lin(tape, x, blk.w1, blk.b1)?;
            let h = tape.gelu(h);
            let h = tape.dropout(h, p, train, rng);
            let h = lin(tape, h, blk.w2, blk.b2)?;
            let h = tape.dropout(h, p, train, rng);
            let res = tape.add(x, h)?;
            let (g2, b2) = (tape.param(params, blk.ln2_gain), tape.param(params, blk.ln2_bias));
            x = tape.layernorm(res, g2, b2, cfg.layernorm_eps)?;
            x = tape.mul(x, keep)?;
        }
        let last: Vec<usize> = (0..b).map(|r| r * l + l - 1).collect();
        let seq_repr = tape.embedding_gather(x, &last)?;
        Ok(EncoderOutput { hidden: x, seq_repr })
    }

    /// Dot product of each row of `repr [n, dim]` with every item embedding:
    /// `[n, num_items]`, column `j` scoring item `j + 1`.
    pub fn score_items<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, repr: Var) -> Result<Var> {
        let table = tape.param(params, self.item_emb);
        let items = tape.slice_rows(table, 1, self.num_items + 1)?;
        tape.matmul_nt(repr, items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(num_blocks: usize) -> (Encoder, ParamSet<f32>) {
        let mut ps = ParamSet::new();
        let cfg = EncoderConfig {
            dim: 8,
            max_len: 6,
            num_blocks,
            num_heads: 2,
            dropout: 0.5,
            ..EncoderConfig::default()
        };
        let enc = Encoder::new(cfg, 20, &mut ps, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (enc, ps)
    }

    fn hidden(enc: &Encoder, ps: &ParamSet<f32>, seqs: &[Vec<usize>]) -> Tensor<f32> {
        let batch = SequenceBatch::left_padded(seqs, enc.config.max_len).unwrap();
        let mut tape = Tape::inference();
        let out = enc
            .forward(&mut tape, ps, &batch, false, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        tape.value(out.hidden).clone()
    }

    #[test]
    fn left_padding_layout() {
        let b = SequenceBatch::left_padded(&[vec![1, 2], vec![3, 4, 5, 6, 7]], 4).unwrap();
        assert_eq!(b.ids, vec![0, 0, 1, 2, 4, 5, 6, 7]);
        assert_eq!(b.lengths, vec![2, 4]);
    }

    #[test]
    fn causal_prefix_is_bit_identical() {
        for blocks in 1..=3 {
            let (enc, ps) = small(blocks);
            let base = vec![3, 4, 5, 6, 7, 8];
            let mut changed = base.clone();
            changed[3] = 19;
            let a = hidden(&enc, &ps, &[base]);
            let b = hidden(&enc, &ps, &[changed]);
            assert_eq!(&a.data()[..3 * 8], &b.data()[..3 * 8], "blocks = {blocks}");
            assert_ne!(&a.data()[3 * 8..], &b.data()[3 * 8..]);
        }
    }

    #[test]
    fn padded_positions_are_zero() {
        let (enc, ps) = small(2);
        let h = hidden(&enc, &ps, &[vec![4, 5]]);
        assert!(h.data()[..4 * 8].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn out_of_range_id_is_rejected() {
        let (enc, ps) = small(1);
        let batch = SequenceBatch::left_padded(&[vec![22]], 6).unwrap();
        let mut tape = Tape::inference();
        let err = enc.forward(&mut tape, &ps, &batch, false, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn argmax_of_matching_embedding() {
        let (enc, mut ps) = small(1);
        // orthogonal embeddings: item j has a one at coordinate j % 8 for j in 1..=8
        let table = ps.get_mut(enc.item_table());
        table.data_mut().iter_mut().for_each(|x| *x = 0.0);
        for j in 1..=8 {
            table.row_mut(j)[j - 1] = 1.0;
        }
        let mut tape = Tape::<f32>::inference();
        let mut repr = Tensor::zeros(&[1, 8]);
        repr.row_mut(0)[4] = 1.0;
        let r = tape.constant(repr);
        let logits = enc.score_items(&mut tape, &ps, r).unwrap();
        let row = tape.value(logits).row(0).to_vec();
        assert_eq!(row.len(), 20);
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(best + 1, 5);
    }

    #[test]
    fn invalid_head_count_is_a_config_error() {
        let cfg = EncoderConfig {
            dim: 10,
            num_heads: 3,
            ..EncoderConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
