//! Transformer building blocks shared by the Q-Former towers and the
//! decoder backbone: multi-head attention, pre-norm residual layers, learned
//! token/position embeddings, and the causal decoder stack.

use crate::error::{IlmError, Result};
use crate::rng::Stream;
use crate::scalar::{sc, Scalar};
use crate::tensor::{Bound, Graph, ParamId, ParamSet, Tensor, Var};
use rand_distr::{Distribution, Normal};

pub const LN_EPS: f64 = 1e-5;
/// Additive mask value for excluded attention positions. Large enough that
/// exp(bias - rowmax) underflows to exactly zero weight.
pub const MASK_OFF: f64 = -1e30;

pub fn normal_tensor<S: Scalar>(shape: Vec<usize>, std: f64, rng: &mut Stream) -> Tensor<S> {
    let dist = Normal::new(0.0f64, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n).map(|_| sc::<S>(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut Stream,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), normal_tensor(vec![in_dim, out_dim], std, rng));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(vec![out_dim]));
        Linear { w, b }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bd: &Bound, x: Var) -> Result<Var> {
        let xw = g.matmul(x, bd.var(self.w))?;
        g.add(xw, bd.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init<S: Scalar>(ps: &mut ParamSet<S>, name: &str, dim: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::filled(vec![dim], S::one()));
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(vec![dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bd: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, bd.var(self.gamma), bd.var(self.beta), sc::<S>(LN_EPS))
    }
}

/// Additive causal mask for an L x L self-attention.
pub fn causal_mask<S: Scalar>(len: usize) -> Tensor<S> {
    let mut m = Tensor::zeros(vec![len, len]);
    for i in 0..len {
        for j in (i + 1)..len {
            m.data_mut()[i * len + j] = sc::<S>(MASK_OFF);
        }
    }
    m
}

/// Reject masks that exclude every key for some query.
pub fn validate_mask<S: Scalar>(mask: &Tensor<S>) -> Result<()> {
    let (rows, cols) = (mask.rows(), mask.cols());
    for r in 0..rows {
        let row = &mask.data()[r * cols..(r + 1) * cols];
        if row.iter().all(|&v| v.to_f64c() <= MASK_OFF) {
            return Err(IlmError::DegenerateInput(format!(
                "attention mask excludes all keys for query {r}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn init<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Stream,
    ) -> Result<Self> {
        if dim % heads != 0 {
            return Err(IlmError::Dimension(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::init(ps, &format!("{name}.wq"), dim, dim, 0.02, rng),
            wk: Linear::init(ps, &format!("{name}.wk"), dim, dim, 0.02, rng),
            wv: Linear::init(ps, &format!("{name}.wv"), dim, dim, 0.02, rng),
            wo: Linear::init(ps, &format!("{name}.wo"), dim, dim, 0.02, rng),
            heads,
            head_dim: dim / heads,
        })
    }

    /// Scaled dot-product attention, `queries` attending to `keys_values`,
    /// with an optional additive mask of shape [n_q, n_kv].
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bd: &Bound,
        queries: Var,
        keys_values: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.wq.forward(g, bd, queries)?;
        let k = self.wk.forward(g, bd, keys_values)?;
        let v = self.wv.forward(g, bd, keys_values)?;
        let scale = sc::<S>(1.0 / (self.head_dim as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = g.narrow_cols(q, start, self.head_dim)?;
            let kh = g.narrow_cols(k, start, self.head_dim)?;
            let vh = g.narrow_cols(v, start, self.head_dim)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let weights = g.softmax_last(scores)?;
            outs.push(g.matmul(weights, vh)?);
        }
        let cat = g.concat_cols(&outs)?;
        self.wo.forward(g, bd, cat)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn init<S: Scalar>(ps: &mut ParamSet<S>, name: &str, dim: usize, rng: &mut Stream) -> Self {
        FeedForward {
            l1: Linear::init(ps, &format!("{name}.l1"), dim, 4 * dim, 0.02, rng),
            l2: Linear::init(ps, &format!("{name}.l2"), 4 * dim, dim, 0.02, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bd: &Bound, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, bd, x)?;
        let h = g.gelu(h)?;
        self.l2.forward(g, bd, h)
    }
}

/// Pre-norm residual transformer layer with optional cross-attention.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerLayer {
    pub fn init<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        dim: usize,
        heads: usize,
        with_cross: bool,
        rng: &mut Stream,
    ) -> Result<Self> {
        let ln_attn = LayerNorm::init(ps, &format!("{name}.ln_attn"), dim);
        let attn = MultiHeadAttention::init(ps, &format!("{name}.attn"), dim, heads, rng)?;
        let cross = if with_cross {
            let ln = LayerNorm::init(ps, &format!("{name}.ln_cross"), dim);
            let mha = MultiHeadAttention::init(ps, &format!("{name}.cross"), dim, heads, rng)?;
            Some((ln, mha))
        } else {
            None
        };
        let ln_ff = LayerNorm::init(ps, &format!("{name}.ln_ff"), dim);
        let ff = FeedForward::init(ps, &format!("{name}.ff"), dim, rng);
        Ok(TransformerLayer { ln_attn, attn, cross, ln_ff, ff })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bd: &Bound,
        x: Var,
        self_mask: Option<Var>,
        cross_kv: Option<Var>,
    ) -> Result<Var> {
        let normed = self.ln_attn.forward(g, bd, x)?;
        let attended = self.attn.forward(g, bd, normed, normed, self_mask)?;
        let mut x = g.add(x, attended)?;
        if let (Some((ln, mha)), Some(kv)) = (&self.cross, cross_kv) {
            let normed = ln.forward(g, bd, x)?;
            let crossed = mha.forward(g, bd, normed, kv, None)?;
            x = g.add(x, crossed)?;
        }
        let normed = self.ln_ff.forward(g, bd, x)?;
        let ff = self.ff.forward(g, bd, normed)?;
        g.add(x, ff)
    }
}

/// Learned token + position embedding tables.
#[derive(Debug, Clone)]
pub struct TokenEmbedding {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub vocab: usize,
    pub max_len: usize,
}

impl TokenEmbedding {
    pub fn init<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        vocab: usize,
        dim: usize,
        max_len: usize,
        rng: &mut Stream,
    ) -> Self {
        let tokens = ps.add(format!("{name}.tok"), normal_tensor(vec![vocab, dim], 0.02, rng));
        let positions = ps.add(format!("{name}.pos"), normal_tensor(vec![max_len, dim], 0.02, rng));
        TokenEmbedding { tokens, positions, vocab, max_len }
    }

    pub fn embed_tokens<S: Scalar>(&self, g: &mut Graph<S>, bd: &Bound, ids: &[u32]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.vocab) {
            return Err(IlmError::Vocabulary(format!(
                "token id {bad} out of range (vocab {})",
                self.vocab
            )));
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        g.gather_rows(bd.var(self.tokens), &idx)
    }

    /// Add position rows 0..L to an assembled [L, d] sequence.
    pub fn with_positions<S: Scalar>(&self, g: &mut Graph<S>, bd: &Bound, rows: Var) -> Result<Var> {
        let len = g.value(rows).shape()[0];
        if len > self.max_len {
            return Err(IlmError::Dimension(format!(
                "sequence length {len} exceeds maximum {}",
                self.max_len
            )));
        }
        let idx: Vec<usize> = (0..len).collect();
        let pos = g.gather_rows(bd.var(self.positions), &idx)?;
        g.add(rows, pos)
    }
}

/// Causal transformer decoder with an output head over the vocabulary.
#[derive(Debug, Clone)]
pub struct TransformerDecoder {
    pub emb: TokenEmbedding,
    pub layers: Vec<TransformerLayer>,
    pub final_ln: LayerNorm,
    pub head: Linear,
    pub dim: usize,
}

impl TransformerDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn init<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        vocab: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        max_len: usize,
        rng: &mut Stream,
    ) -> Result<Self> {
        let emb = TokenEmbedding::init(ps, &format!("{name}.emb"), vocab, dim, max_len, rng);
        let layers = (0..layers)
            .map(|i| TransformerLayer::init(ps, &format!("{name}.layer{i}"), dim, heads, false, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::init(ps, &format!("{name}.final_ln"), dim);
        let head = Linear::init(ps, &format!("{name}.head"), dim, vocab, 0.02, rng);
        Ok(TransformerDecoder { emb, layers, final_ln, head, dim })
    }

    /// Forward from a pre-assembled [L, d] embedding sequence (position
    /// embeddings applied here). Returns [L, V] logits.
    pub fn forward_embedded<S: Scalar>(&self, g: &mut Graph<S>, bd: &Bound, rows: Var) -> Result<Var> {
        let len = g.value(rows).shape()[0];
        let mut x = self.emb.with_positions(g, bd, rows)?;
        let mask = g.constant(causal_mask::<S>(len))?;
        for layer in &self.layers {
            x = layer.forward(g, bd, x, Some(mask), None)?;
        }
        let x = self.final_ln.forward(g, bd, x)?;
        self.head.forward(g, bd, x)
    }

    /// Forward from token ids. Identical compute path to `forward_embedded`
    /// after the embedding gather.
    pub fn forward_tokens<S: Scalar>(&self, g: &mut Graph<S>, bd: &Bound, ids: &[u32]) -> Result<Var> {
        if ids.is_empty() {
            return Err(IlmError::Usage("decoder_forward on empty token sequence".into()));
        }
        let rows = self.emb.embed_tokens(g, bd, ids)?;
        self.forward_embedded(g, bd, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;
    use crate::tensor::gradcheck::max_rel_error;
    use rand::Rng;

    fn identity_linear(ps: &mut ParamSet<f64>, name: &str, dim: usize) -> Linear {
        let mut eye = Tensor::zeros(vec![dim, dim]);
        for i in 0..dim {
            eye.data_mut()[i * dim + i] = 1.0;
        }
        let w = ps.add(format!("{name}.w"), eye);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(vec![dim]));
        Linear { w, b }
    }

    #[test]
    fn singleton_attention_returns_value() {
        // One head, identity projections, single key equal to the query.
        let dim = 4;
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mha = MultiHeadAttention {
            wq: identity_linear(&mut ps, "wq", dim),
            wk: identity_linear(&mut ps, "wk", dim),
            wv: identity_linear(&mut ps, "wv", dim),
            wo: identity_linear(&mut ps, "wo", dim),
            heads: 1,
            head_dim: dim,
        };
        let mut g: Graph<f64> = Graph::new();
        let bd = g.bind(&ps, false).unwrap();
        let q = g.leaf(Tensor::matrix(1, dim, vec![7.0, -3.0, 2.0, 0.25]).unwrap()).unwrap();
        // single key/value row: softmax over one logit is 1, output = value
        let out = mha.forward(&mut g, &bd, q, q, None).unwrap();
        assert_eq!(g.value(out).data(), &[7.0, -3.0, 2.0, 0.25]);
    }

    #[test]
    fn attention_permutation_equivariance() {
        // Jointly permuting key/value rows leaves the output unchanged.
        let mut rng = Streams::new(5).stream("nn");
        let dim = 8;
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mha = MultiHeadAttention::init(&mut ps, "a", dim, 2, &mut rng).unwrap();
        let kv_t = normal_tensor::<f64>(vec![5, dim], 1.0, &mut rng);
        let q_t = normal_tensor::<f64>(vec![3, dim], 1.0, &mut rng);

        let run = |kv: &Tensor<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let bd = g.bind(&ps, false).unwrap();
            let q = g.leaf(q_t.clone()).unwrap();
            let kvv = g.leaf(kv.clone()).unwrap();
            let out = mha.forward(&mut g, &bd, q, kvv, None).unwrap();
            g.value(out).data().to_vec()
        };
        let base = run(&kv_t);
        let mut rev = Tensor::zeros(vec![5, dim]);
        for r in 0..5 {
            rev.data_mut()[r * dim..(r + 1) * dim]
                .copy_from_slice(&kv_t.data()[(4 - r) * dim..(5 - r) * dim]);
        }
        let permuted = run(&rev);
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_query_rejected() {
        let mut m: Tensor<f64> = Tensor::zeros(vec![2, 3]);
        for j in 0..3 {
            m.data_mut()[3 + j] = MASK_OFF;
        }
        assert!(validate_mask(&m).is_err());
        let ok: Tensor<f64> = causal_mask(4);
        assert!(validate_mask(&ok).is_ok());
    }

    #[test]
    fn causal_mask_position_zero_sees_only_itself() {
        // With a causal mask, position 0 attends to key/value 0 only.
        let mut rng = Streams::new(6).stream("nn");
        let dim = 4;
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mha = MultiHeadAttention::init(&mut ps, "a", dim, 1, &mut rng).unwrap();
        let x0 = normal_tensor::<f64>(vec![3, dim], 1.0, &mut rng);
        let run = |x: &Tensor<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let bd = g.bind(&ps, false).unwrap();
            let xv = g.leaf(x.clone()).unwrap();
            let m = g.constant(causal_mask::<f64>(3)).unwrap();
            let out = mha.forward(&mut g, &bd, xv, xv, Some(m)).unwrap();
            g.value(out).data()[..dim].to_vec()
        };
        let base = run(&x0);
        let mut changed = x0.clone();
        for j in 0..dim {
            changed.data_mut()[dim + j] = 9.0; // perturb row 1 (a later position)
            changed.data_mut()[2 * dim + j] = -9.0;
        }
        assert_eq!(base, run(&changed));
    }

    #[test]
    fn layer_norm_statistics() {
        let mut rng = Streams::new(9).stream("nn");
        let dim = 16;
        let mut ps: ParamSet<f64> = ParamSet::new();
        let ln = LayerNorm::init(&mut ps, "ln", dim);
        let mut g: Graph<f64> = Graph::new();
        let bd = g.bind(&ps, false).unwrap();
        let x = g.leaf(normal_tensor::<f64>(vec![6, dim], 2.5, &mut rng)).unwrap();
        let y = ln.forward(&mut g, &bd, x).unwrap();
        let out = g.value(y);
        for r in 0..6 {
            let row = &out.data()[r * dim..(r + 1) * dim];
            let mu: f64 = row.iter().sum::<f64>() / dim as f64;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / dim as f64;
            assert!(mu.abs() < 1e-6, "row mean {mu}");
            assert!((var - 1.0).abs() < 1e-4, "row var {var}");
        }
    }

    fn tiny_decoder(rng: &mut Stream) -> (ParamSet<f64>, TransformerDecoder) {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let dec = TransformerDecoder::init(&mut ps, "dec", 11, 8, 2, 2, 16, rng).unwrap();
        (ps, dec)
    }

    #[test]
    fn decoder_causality_bitwise() {
        let mut rng = Streams::new(21).stream("nn");
        let (ps, dec) = tiny_decoder(&mut rng);
        let run = |ids: &[u32]| {
            let mut g: Graph<f64> = Graph::new();
            let bd = g.bind(&ps, false).unwrap();
            let logits = dec.forward_tokens(&mut g, &bd, ids).unwrap();
            g.value(logits).data().to_vec()
        };
        let a = run(&[1, 2, 3, 4, 5]);
        let b = run(&[1, 2, 3, 9, 10]);
        let v = 11;
        // positions 0..3 precede any changed token
        for p in 0..3 {
            for j in 0..v {
                assert_eq!(a[p * v + j], b[p * v + j], "logit changed at pos {p}");
            }
        }
        // determinism: identical inputs, identical logits
        let c = run(&[1, 2, 3, 4, 5]);
        assert_eq!(a, c);
    }

    #[test]
    fn decoder_shape_and_vocab_error() {
        let mut rng = Streams::new(22).stream("nn");
        let (ps, dec) = tiny_decoder(&mut rng);
        let mut g: Graph<f64> = Graph::new();
        let bd = g.bind(&ps, false).unwrap();
        let logits = dec.forward_tokens(&mut g, &bd, &[0, 1, 2]).unwrap();
        assert_eq!(g.value(logits).shape(), &[3, 11]);
        assert!(matches!(
            dec.forward_tokens(&mut g, &bd, &[11]),
            Err(IlmError::Vocabulary(_))
        ));
    }

    #[test]
    fn decoder_gradcheck() {
        // 2-layer, d=8, V=11 decoder against central differences.
        let mut rng = Streams::new(33).stream("nn");
        let (ps, dec) = tiny_decoder(&mut rng);
        let ids = [1u32, 5, 7, 2];
        let targets = [5usize, 7, 2, 10];
        let mask = [true, true, true, true];
        let tensors: Vec<Tensor<f64>> = ps.iter().map(|(_, t)| t.clone()).collect();
        let err = max_rel_error(&tensors, 1e-5, |g, vars| {
            let bd = Bound::from_vars(vars.to_vec(), true);
            let logits = dec.forward_tokens(g, &bd, &ids).unwrap();
            g.cross_entropy_nll(logits, &targets, &mask).unwrap()
        });
        assert!(err < 1e-3, "decoder gradcheck failed: {err}");
    }

    #[test]
    fn uniform_logits_loss_is_ln_v() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(Tensor::zeros(vec![4, 11])).unwrap();
        let loss = g
            .cross_entropy_nll(logits, &[0, 1, 2, 3], &[true, true, true, true])
            .unwrap();
        assert!((g.value(loss).data()[0] - (11f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn sequence_over_max_len_rejected() {
        let mut rng = Streams::new(4).stream("nn");
        let (ps, dec) = tiny_decoder(&mut rng);
        let mut g: Graph<f64> = Graph::new();
        let bd = g.bind(&ps, false).unwrap();
        let long: Vec<u32> = (0..17).map(|_| rng.gen_range(0..11u32)).collect();
        assert!(dec.forward_tokens(&mut g, &bd, &long).is_err());
    }
}
