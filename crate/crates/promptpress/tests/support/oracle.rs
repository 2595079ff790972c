//! Independent reference implementations used to cross-check the crate.
//! These deliberately share no scoring code with the library: counting,
//! lookup, and selection are re-derived from scratch.

use std::collections::BTreeMap;

/// Brute-force add-delta n-gram scorer over a pre-tokenized corpus.
///
/// Contexts are keyed by joining normalized tokens with a NUL byte, counts
/// live in ordered maps, and probabilities are recomputed from first
/// principles on every call.
pub struct NgramOracle {
    order: usize,
    delta: f64,
    vocab_size: usize,
    /// context-key -> (continuation -> count, total continuations)
    tables: BTreeMap<String, (BTreeMap<String, u64>, u64)>,
}

fn normalize(token: &str) -> String {
    let trimmed = token.trim();
    if trimmed.is_empty() {
        " ".to_string()
    } else {
        trimmed.to_string()
    }
}

fn context_key(context: &[String]) -> String {
    context.join("\u{0}")
}

impl NgramOracle {
    pub fn build(corpus_tokens: &[String], order: usize, delta: f64) -> Self {
        assert!(order >= 1);
        let keys: Vec<String> = corpus_tokens.iter().map(|t| normalize(t)).collect();
        let mut vocab: Vec<&String> = keys.iter().collect();
        vocab.sort();
        vocab.dedup();
        let vocab_size = vocab.len() + 1; // plus the unknown-token type

        let mut tables: BTreeMap<String, (BTreeMap<String, u64>, u64)> = BTreeMap::new();
        for ctx_len in 0..order {
            for pos in ctx_len..keys.len() {
                let key = context_key(&keys[pos - ctx_len..pos]);
                let slot = tables.entry(key).or_default();
                *slot.0.entry(keys[pos].clone()).or_insert(0) += 1;
                slot.1 += 1;
            }
        }
        NgramOracle {
            order,
            delta,
            vocab_size,
            tables,
        }
    }

    fn probability(&self, context: &[String], token: &str) -> f64 {
        let take = context.len().min(self.order - 1);
        let key = context_key(&context[context.len() - take..]);
        let (count, total) = match self.tables.get(&key) {
            Some((continuations, total)) => {
                (continuations.get(token).copied().unwrap_or(0), *total)
            }
            None => (0, 0),
        };
        (count as f64 + self.delta) / (total as f64 + self.delta * self.vocab_size as f64)
    }

    /// Negative log probabilities of `target` conditioned on `prefix`,
    /// clamped to [0, 30].
    pub fn score(&self, prefix: &[String], target: &[String]) -> Vec<f64> {
        let keys: Vec<String> = prefix
            .iter()
            .chain(target.iter())
            .map(|t| normalize(t))
            .collect();
        (0..target.len())
            .map(|i| {
                let pos = prefix.len() + i;
                let p = self.probability(&keys[..pos], &keys[pos]);
                (-p.ln()).clamp(0.0, 30.0)
            })
            .collect()
    }

    /// exp of the mean nll, empty prefix.
    pub fn unit_perplexity(&self, tokens: &[String]) -> f64 {
        let nlls = self.score(&[], tokens);
        let mean = nlls.iter().sum::<f64>() / nlls.len() as f64;
        mean.exp()
    }
}

/// Literal sort-and-accumulate reference for the coarse selection loop:
/// rank by descending perplexity (ties by index), then append units until
/// the accumulated length exceeds the budget before an append.
pub fn select_oracle(lengths: &[usize], perplexities: &[f64], budget: f64) -> (Vec<usize>, usize) {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| {
        perplexities[b]
            .partial_cmp(&perplexities[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut picked = Vec::new();
    let mut used = 0usize;
    for idx in order {
        if used as f64 > budget {
            break;
        }
        picked.push(idx);
        used += lengths[idx];
    }
    picked.sort();
    (picked, used)
}

/// Order-statistics reference for threshold retention: keep the
/// `round(rate * n)` highest scores, ties resolved toward earlier positions.
pub fn topn_oracle(scores: &[f64], rate: f64) -> Vec<bool> {
    let n = ((rate * scores.len() as f64).round() as usize).min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut mask = vec![false; scores.len()];
    for &idx in order.iter().take(n) {
        mask[idx] = true;
    }
    mask
}
