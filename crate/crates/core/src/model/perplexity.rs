use crate::error::{Result, SlimError};
use crate::linalg::Matrix;
use crate::model::{forward, forward_compressed, CompressedModel, ModelWeights, Token};

/// Anything that maps a token sequence to per-position next-token logits.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    /// `tokens.len() × vocab` logits; row `t` scores the token after `t`.
    fn logits(&self, tokens: &[Token]) -> Result<Matrix>;
}

impl LanguageModel for ModelWeights {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }
    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }
    fn logits(&self, tokens: &[Token]) -> Result<Matrix> {
        Ok(forward(self, tokens, false)?.0)
    }
}

impl LanguageModel for CompressedModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }
    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }
    fn logits(&self, tokens: &[Token]) -> Result<Matrix> {
        Ok(forward_compressed(self, tokens, false)?.0)
    }
}

/// `exp(mean NLL)` over non-overlapping windows.
///
/// Window `w` feeds `corpus[w·L .. w·L + L]` and scores the following token
/// at every position, so each token after the first is predicted exactly
/// once. The last window may be shorter.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, corpus: &[Token], context_len: usize) -> Result<f64> {
    if corpus.len() < 2 {
        return Err(SlimError::input("perplexity needs at least two tokens"));
    }
    if context_len == 0 || context_len > model.max_seq_len() {
        return Err(SlimError::input(format!(
            "context length {context_len} outside 1..={}",
            model.max_seq_len()
        )));
    }
    if corpus.len() <= context_len {
        return Err(SlimError::input(format!(
            "corpus of {} tokens is not longer than the context length {context_len}",
            corpus.len()
        )));
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + 1 < corpus.len() {
        let end = (start + context_len).min(corpus.len() - 1);
        let inputs = &corpus[start..end];
        let targets = &corpus[start + 1..end + 1];
        let logits = model.logits(inputs)?;
        for (t, &target) in targets.iter().enumerate() {
            nll -= log_softmax_at(logits.row(t), target as usize);
        }
        count += targets.len();
        start = end;
    }
    Ok((nll / count as f64).exp())
}

/// `log softmax(row)[idx]`, computed without leaving log space.
pub(crate) fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[idx] - lse
}
