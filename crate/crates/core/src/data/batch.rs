use rand::seq::SliceRandom;
use rand::Rng;

use super::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Groups example indices into length-bucketed batches whose padded size
/// (`count × longest`) stays within `max_tokens`, then shuffles batch order.
/// Every index appears exactly once. `lengths[i]` is the token count of
/// example `i` including EOS.
pub fn bucket_batches(lengths: &[usize], max_tokens: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if let Some((i, &l)) = lengths.iter().enumerate().find(|(_, &l)| l > max_tokens) {
        return Err(Error::contract(format!(
            "example {i} has {l} tokens, more than the batch budget of {max_tokens}"
        )));
    }
    let mut rng = rng_for(seed, &format!("batches/{epoch}"));
    let mut order: Vec<(usize, u64, usize)> = lengths.iter().enumerate().map(|(i, &l)| (l, rng.gen(), i)).collect();
    order.sort_unstable();
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut longest = 0;
    for (len, _, idx) in order {
        let widest = longest.max(len);
        if !cur.is_empty() && widest * (cur.len() + 1) > max_tokens {
            batches.push(std::mem::take(&mut cur));
            longest = 0;
        }
        longest = longest.max(len);
        cur.push(idx);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Token-budget batches over a parallel corpus; lengths count both sides plus EOS.
pub fn batch_iter(corpus: &ParallelCorpus, max_tokens: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    let lengths: Vec<usize> = corpus
        .pairs()
        .map(|(s, t)| s.split_whitespace().count().max(t.split_whitespace().count()) + 1)
        .collect();
    if let Some(i) = lengths.iter().position(|&l| l > max_tokens) {
        return Err(Error::contract(format!(
            "sentence pair {i} ({:?} / {:?}) exceeds the batch budget of {max_tokens} tokens",
            corpus.src[i], corpus.tgt[i]
        )));
    }
    bucket_batches(&lengths, max_tokens, seed, epoch)
}
