use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, TokenId, Vocabulary, PAD};

/// Token sequences padded to the longest member of the batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Row-major `len() × seq_len()` ids.
    pub token_ids: Vec<TokenId>,
    /// True exactly where `token_ids` holds padding.
    pub pad_mask: Vec<bool>,
    pub lengths: Vec<usize>,
    seq_len: usize,
}

impl Batch {
    pub fn from_sequences(seqs: &[Vec<TokenId>]) -> Self {
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut token_ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut pad_mask = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            token_ids.extend_from_slice(s);
            token_ids.extend(std::iter::repeat_n(PAD, seq_len - s.len()));
            pad_mask.extend(std::iter::repeat_n(false, s.len()));
            pad_mask.extend(std::iter::repeat_n(true, seq_len - s.len()));
        }
        Self {
            token_ids,
            pad_mask,
            lengths: seqs.iter().map(Vec::len).collect(),
            seq_len,
        }
    }

    /// Tokenizes `strings` and pads them into one batch.
    pub fn from_strings(strings: &[String], vocab: &Vocabulary, max_len: usize) -> Result<Self, DataError> {
        let seqs = strings
            .iter()
            .map(|s| vocab.tokenize(s, max_len))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_sequences(&seqs))
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// The padded row `i`.
    pub fn row(&self, i: usize) -> &[TokenId] {
        &self.token_ids[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn row_pad_mask(&self, i: usize) -> &[bool] {
        &self.pad_mask[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Row `i` without its padding.
    pub fn sequence(&self, i: usize) -> &[TokenId] {
        &self.row(i)[..self.lengths[i]]
    }

    /// The same batch with `extra` additional pad columns.
    pub fn with_extra_padding(&self, extra: usize) -> Self {
        let seqs: Vec<Vec<TokenId>> = (0..self.len()).map(|i| self.sequence(i).to_vec()).collect();
        let mut b = Self::from_sequences(&seqs);
        let new_len = b.seq_len + extra;
        let mut token_ids = Vec::with_capacity(b.len() * new_len);
        let mut pad_mask = Vec::with_capacity(b.len() * new_len);
        for i in 0..b.len() {
            token_ids.extend_from_slice(b.row(i));
            token_ids.extend(std::iter::repeat_n(PAD, extra));
            pad_mask.extend_from_slice(b.row_pad_mask(i));
            pad_mask.extend(std::iter::repeat_n(true, extra));
        }
        b.token_ids = token_ids;
        b.pad_mask = pad_mask;
        b.seq_len = new_len;
        b
    }
}

/// Splits `corpus` into batches of `batch_size` (the last one may be short).
/// With a shuffle seed the item order is permuted first; otherwise corpus order is kept.
pub fn make_batches(
    corpus: &[String],
    vocab: &Vocabulary,
    batch_size: usize,
    max_len: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>, DataError> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size.max(1))
        .map(|idx| {
            let seqs = idx
                .iter()
                .map(|&i| vocab.tokenize(&corpus[i], max_len))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Batch::from_sequences(&seqs))
        })
        .collect()
}
