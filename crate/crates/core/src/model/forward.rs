//! Forward passes: a plain evaluation path for inference and a tape-backed
//! path for gradients. Both call the same kernels in the same order, so
//! they produce bit-identical values.

use super::*;
use crate::autodiff::{NodeId, Tape};
use crate::kernels;
use ndarray::{Array1, Array2};

fn check_prefix(config: &ModelConfig, len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::Input("empty prefix".into()));
    }
    if len > config.context_len {
        return Err(Error::Input(format!(
            "sequence length {len} exceeds context_len {}",
            config.context_len
        )));
    }
    Ok(())
}

/// Full-sequence logits (seq_len × vocab) without a tape.
pub(crate) fn forward_logits_full(params: &ModelParams, tokens: &[TokenId]) -> Result<Array2<f64>> {
    let cfg = &params.config;
    check_prefix(cfg, tokens.len())?;
    let len = tokens.len();
    let d = cfg.model_dim;
    let dh = cfg.head_dim();

    let embed = params.array(EMBED);
    let mut x = Array2::zeros((len, d));
    for (i, &t) in tokens.iter().enumerate() {
        if (t as usize) >= cfg.vocab_size {
            return Err(Error::Input(format!("token {t} outside vocab")));
        }
        x.row_mut(i).assign(&embed.row(t as usize));
    }
    let pos = params.array(POS).slice(ndarray::s![0..len, ..]);
    x += &pos;

    for l in 0..cfg.num_layers {
        let base = layer_base(l);
        let at = |off: usize| params.array(base + off);

        let ln1 = kernels::layer_norm(x.view(), at(LN1_G).view(), at(LN1_B).view(), LN_EPS);
        let q = kernels::add_bias(kernels::matmul(ln1.view(), at(WQ).view()).view(), at(BQ).view());
        let k = kernels::add_bias(kernels::matmul(ln1.view(), at(WK).view()).view(), at(BK).view());
        let v = kernels::add_bias(kernels::matmul(ln1.view(), at(WV).view()).view(), at(BV).view());

        let mut ctx = Array2::zeros((len, d));
        for h in 0..cfg.num_heads {
            let cols = ndarray::s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let scores = kernels::matmul_nt(qh, kh).mapv(|s| s / (dh as f64).sqrt());
            let masked = kernels::causal_mask(scores.view());
            let attn = kernels::softmax_rows(masked.view());
            let ctx_h = kernels::matmul(attn.view(), vh);
            ctx.slice_mut(cols).assign(&ctx_h);
        }
        let attn_out =
            kernels::add_bias(kernels::matmul(ctx.view(), at(WO).view()).view(), at(BO).view());
        x += &attn_out;

        let ln2 = kernels::layer_norm(x.view(), at(LN2_G).view(), at(LN2_B).view(), LN_EPS);
        let h1 = kernels::add_bias(kernels::matmul(ln2.view(), at(W1).view()).view(), at(B1).view());
        let h1 = kernels::gelu(h1.view());
        let ffn = kernels::add_bias(kernels::matmul(h1.view(), at(W2).view()).view(), at(B2).view());
        x += &ffn;
    }

    let n = param_layout(cfg).len();
    let lnf = kernels::layer_norm(
        x.view(),
        params.array(n - 4).view(),
        params.array(n - 3).view(),
        LN_EPS,
    );
    let logits = kernels::add_bias(
        kernels::matmul(lnf.view(), params.array(n - 2).view()).view(),
        params.array(n - 1).view(),
    );
    Ok(logits)
}

/// Raw logits for the next token after `prefix`.
pub(crate) fn forward_last_logits(params: &ModelParams, prefix: &[TokenId]) -> Result<Array1<f64>> {
    let logits = forward_logits_full(params, prefix)?;
    Ok(logits.row(logits.nrows() - 1).to_owned())
}

/// Probability distribution over the next token after `prefix`.
pub fn forward_next_token(params: &ModelParams, prefix: &[TokenId]) -> Result<NextTokenDist> {
    let logits = forward_last_logits(params, prefix)?;
    let row = logits.insert_axis(ndarray::Axis(0));
    let probs = kernels::softmax_rows(row.view());
    Ok(NextTokenDist { probs: probs.row(0).to_vec() })
}

/// Sum of log p(continuation[i] | prefix ++ continuation[..i]) over the
/// continuation, accumulated left to right. Empty continuation gives 0.
pub fn sequence_logprob(
    params: &ModelParams,
    prefix: &[TokenId],
    continuation: &[TokenId],
) -> Result<f64> {
    if continuation.is_empty() {
        return Ok(0.0);
    }
    if prefix.is_empty() {
        return Err(Error::Input("empty prefix".into()));
    }
    let total = prefix.len() + continuation.len();
    if total > params.config.context_len {
        return Err(Error::Input(format!(
            "prefix+continuation length {total} exceeds context_len {}",
            params.config.context_len
        )));
    }
    let mut tokens = Vec::with_capacity(total);
    tokens.extend_from_slice(prefix);
    tokens.extend_from_slice(continuation);
    let logits = forward_logits_full(params, &tokens)?;
    let logp = kernels::log_softmax_rows(logits.view());
    let mut acc = 0.0;
    for (j, &tok) in continuation.iter().enumerate() {
        let row = prefix.len() - 1 + j;
        acc += logp[[row, tok as usize]];
    }
    Ok(acc)
}

/// Differentiable forward pass. The graph is created with every parameter
/// array as a leaf; `logits` appends one transformer forward per call so a
/// whole batch shares one tape.
pub struct ModelGraph<'a> {
    params: &'a ModelParams,
    tape: Tape,
    param_nodes: Vec<NodeId>,
}

impl<'a> ModelGraph<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let mut tape = Tape::new();
        let param_nodes =
            params.arrays.iter().map(|a| tape.input(a.clone())).collect();
        ModelGraph { params, tape, param_nodes }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Full-sequence logits node (seq_len × vocab).
    pub fn logits(&mut self, tokens: &[TokenId]) -> Result<NodeId> {
        let cfg = &self.params.config;
        check_prefix(cfg, tokens.len())?;
        let len = tokens.len();
        let dh = cfg.head_dim();
        let t = &mut self.tape;
        let pn = &self.param_nodes;

        let ids: Vec<usize> = tokens.iter().map(|&tok| tok as usize).collect();
        if ids.iter().any(|&i| i >= cfg.vocab_size) {
            return Err(Error::Input("token outside vocab".into()));
        }
        let tok = t.embed_rows(pn[EMBED], &ids);
        let pos = t.slice_rows(pn[POS], 0, len);
        let mut x = t.add(tok, pos);

        for l in 0..cfg.num_layers {
            let base = layer_base(l);
            let at = |off: usize| pn[base + off];

            let ln1 = t.layer_norm(x, at(LN1_G), at(LN1_B), LN_EPS);
            let q0 = t.matmul(ln1, at(WQ));
            let q = t.add_bias(q0, at(BQ));
            let k0 = t.matmul(ln1, at(WK));
            let k = t.add_bias(k0, at(BK));
            let v0 = t.matmul(ln1, at(WV));
            let v = t.add_bias(v0, at(BV));

            let mut heads = Vec::with_capacity(cfg.num_heads);
            for h in 0..cfg.num_heads {
                let qh = t.col_block(q, h * dh, dh);
                let kh = t.col_block(k, h * dh, dh);
                let vh = t.col_block(v, h * dh, dh);
                let scores = t.matmul_nt(qh, kh);
                let scaled = t.scale(scores, 1.0 / (dh as f64).sqrt());
                let masked = t.causal_mask(scaled);
                let attn = t.softmax_rows(masked);
                heads.push(t.matmul(attn, vh));
            }
            let ctx = t.concat_cols(&heads);
            let o0 = t.matmul(ctx, at(WO));
            let attn_out = t.add_bias(o0, at(BO));
            x = t.add(x, attn_out);

            let ln2 = t.layer_norm(x, at(LN2_G), at(LN2_B), LN_EPS);
            let h0 = t.matmul(ln2, at(W1));
            let h1 = t.add_bias(h0, at(B1));
            let h2 = t.gelu(h1);
            let f0 = t.matmul(h2, at(W2));
            let ffn = t.add_bias(f0, at(B2));
            x = t.add(x, ffn);
        }

        let n = pn.len();
        let lnf = t.layer_norm(x, pn[n - 4], pn[n - 3], LN_EPS);
        let l0 = t.matmul(lnf, pn[n - 2]);
        Ok(t.add_bias(l0, pn[n - 1]))
    }

    /// Gradients of a (1, 1) loss node w.r.t. every parameter array.
    pub fn param_grads(&self, loss: NodeId) -> ParamGrads {
        let g = self.tape.backward(loss);
        let arrays = self
            .param_nodes
            .iter()
            .zip(self.params.arrays.iter())
            .map(|(&id, a)| g.get(id, a.dim()))
            .collect();
        ParamGrads { arrays }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            context_len: 16,
            num_layers: 2,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            seed: 42,
        }
    }

    #[test]
    fn next_token_dist_is_valid_probability_vector() {
        let p = init_params(&cfg(13)).unwrap();
        let d = forward_next_token(&p, &[0, 5, 2, 12, 7]).unwrap();
        assert_eq!(d.probs.len(), 13);
        d.validate().unwrap();
    }

    #[test]
    fn single_token_vocab_gives_prob_one() {
        let mut c = cfg(1);
        c.num_heads = 1;
        let p = init_params(&c).unwrap();
        let d = forward_next_token(&p, &[0, 0, 0]).unwrap();
        assert_eq!(d.probs, vec![1.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let p = init_params(&cfg(13)).unwrap();
        let a = forward_next_token(&p, &[1, 2, 3]).unwrap();
        let b = forward_next_token(&p, &[1, 2, 3]).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn empty_and_overlong_prefix_are_input_errors() {
        let p = init_params(&cfg(13)).unwrap();
        assert!(matches!(forward_next_token(&p, &[]), Err(Error::Input(_))));
        let long = vec![0u32; 17];
        assert!(matches!(forward_next_token(&p, &long), Err(Error::Input(_))));
    }

    #[test]
    fn graph_forward_matches_plain_forward_bitwise() {
        let p = init_params(&cfg(13)).unwrap();
        let tokens = [3u32, 1, 4, 1, 5, 9, 2, 6];
        let plain = forward_logits_full(&p, &tokens).unwrap();
        let mut g = ModelGraph::new(&p);
        let node = g.logits(&tokens).unwrap();
        let taped = g.tape().value(node);
        assert_eq!(plain, *taped);
    }

    #[test]
    fn logprob_of_empty_continuation_is_zero() {
        let p = init_params(&cfg(13)).unwrap();
        assert_eq!(sequence_logprob(&p, &[1, 2], &[]).unwrap(), 0.0);
    }

    #[test]
    fn logprob_matches_two_step_forward() {
        let p = init_params(&cfg(13)).unwrap();
        let prefix = [7u32, 3, 11];
        let cont = [2u32, 8];
        let lp = sequence_logprob(&p, &prefix, &cont).unwrap();
        let d1 = forward_next_token(&p, &prefix).unwrap();
        let mut ext = prefix.to_vec();
        ext.push(cont[0]);
        let d2 = forward_next_token(&p, &ext).unwrap();
        let expect = d1.probs[cont[0] as usize].ln() + d2.probs[cont[1] as usize].ln();
        assert!((lp - expect).abs() < 1e-9, "lp={lp} expect={expect}");
        assert!(lp <= 0.0);
    }

    #[test]
    fn logprob_splits_additively() {
        let p = init_params(&cfg(13)).unwrap();
        let prefix = [1u32, 2, 3];
        let a = [4u32, 5];
        let b = [6u32, 7, 8];
        let ab: Vec<TokenId> = a.iter().chain(b.iter()).cloned().collect();
        let mut pa = prefix.to_vec();
        pa.extend_from_slice(&a);
        let whole = sequence_logprob(&p, &prefix, &ab).unwrap();
        let split =
            sequence_logprob(&p, &prefix, &a).unwrap() + sequence_logprob(&p, &pa, &b).unwrap();
        // Left-fold accumulation: the split differs only by one association.
        assert!((whole - split).abs() < 1e-12, "whole={whole} split={split}");
    }

    #[test]
    fn logprob_overflow_is_input_error() {
        let p = init_params(&cfg(13)).unwrap();
        let cont = vec![0u32; 15];
        assert!(matches!(sequence_logprob(&p, &[1, 2], &cont), Err(Error::Input(_))));
    }
}
