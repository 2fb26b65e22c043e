//! Byte-level tokens and non-overlapping batches.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Every byte is its own token.
pub fn byte_tokenize(corpus: &[u8]) -> Vec<usize> {
    corpus.iter().map(|&b| b as usize).collect()
}

/// One training example: `target[i] = input[i + 1]` in the underlying stream.
pub type Example = (Vec<usize>, Vec<usize>);

/// Non-overlapping windows of `seq_len + 1` tokens, the last token of a window
/// shared with the first of the next.
pub fn chunk(ids: &[usize], seq_len: usize) -> Result<Vec<Example>> {
    if seq_len == 0 {
        return Err(Error::Data("seq_len must be positive".into()));
    }
    if ids.len() <= seq_len + 1 {
        return Err(Error::Data(format!(
            "corpus of {} tokens is too small for seq_len {seq_len}",
            ids.len()
        )));
    }
    let count = (ids.len() - 1) / seq_len;
    Ok((0..count)
        .map(|k| {
            let w = &ids[k * seq_len..k * seq_len + seq_len + 1];
            (w[..seq_len].to_vec(), w[1..].to_vec())
        })
        .collect())
}

/// `floor((N - 1) / (seq_len · batch))` batches of `batch` examples each.
///
/// With `shuffle_seed`, whole windows are permuted before grouping; the order
/// depends only on the seed.
pub fn make_batches(
    ids: &[usize],
    seq_len: usize,
    batch: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Vec<Example>>> {
    if batch == 0 {
        return Err(Error::Data("batch size must be positive".into()));
    }
    let mut windows = chunk(ids, seq_len)?;
    if windows.len() < batch {
        return Err(Error::Data(format!(
            "corpus yields {} windows of {seq_len} tokens, fewer than one batch of {batch}",
            windows.len()
        )));
    }
    if let Some(seed) = shuffle_seed {
        windows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let full = windows.len() / batch;
    windows.truncate(full * batch);
    let mut out = Vec::with_capacity(full);
    let mut it = windows.into_iter();
    for _ in 0..full {
        out.push(it.by_ref().take(batch).collect());
    }
    Ok(out)
}

const SUBJECTS: &[&str] = &[
    "the cat", "a small dog", "the old man", "my sister", "the teacher", "a young bird", "the farmer",
    "our neighbor", "the child", "a tired horse", "the baker", "his friend",
];
const VERBS: &[&str] = &[
    "sees", "likes", "finds", "carries", "paints", "follows", "remembers", "builds", "watches", "opens",
];
const OBJECTS: &[&str] = &[
    "the red door", "a long letter", "the green field", "an apple", "the quiet river", "a wooden box",
    "the blue house", "some bread", "the narrow road", "a warm coat",
];
const TAILS: &[&str] = &[
    "in the morning", "after the rain", "near the market", "every day", "with great care", "before dinner",
    "at the end of the street", "without a word",
];

/// Deterministic English-like text of exactly `len` bytes, built from simple
/// subject-verb-object sentences.
pub fn synthetic_corpus(len: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(len + 64);
    while text.len() < len {
        let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| xs[rng.random_range(0..xs.len())];
        let mut sentence = format!(
            "{} {} {}",
            pick(&mut rng, SUBJECTS),
            pick(&mut rng, VERBS),
            pick(&mut rng, OBJECTS)
        );
        if rng.random_bool(0.5) {
            sentence.push(' ');
            sentence.push_str(pick(&mut rng, TAILS));
        }
        let mut chars = sentence.chars();
        let first = chars.next().expect("non-empty").to_ascii_uppercase();
        text.push(first);
        text.push_str(chars.as_str());
        text.push_str(if rng.random_bool(0.2) { ".\n" } else { ". " });
    }
    text.truncate(len);
    text
}

/// Splits `ids` into a leading training part and a trailing held-out part.
pub fn split_holdout(ids: &[usize], holdout: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if holdout >= ids.len() {
        return Err(Error::Data(format!(
            "held-out size {holdout} leaves nothing of {} tokens",
            ids.len()
        )));
    }
    let cut = ids.len() - holdout;
    Ok((ids[..cut].to_vec(), ids[cut..].to_vec()))
}
