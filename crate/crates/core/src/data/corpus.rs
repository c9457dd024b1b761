use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, Vocabulary};

/// Size and length bounds of a synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusSpec {
    pub n: usize,
    pub len_lo: usize,
    pub len_hi: usize,
}

/// `n` random payload strings with lengths uniform on `[len_lo, len_hi]` and
/// characters uniform over the printable tokens. Pure in `seed`.
pub fn generate_corpus(seed: u64, spec: CorpusSpec, vocab: &Vocabulary) -> Result<Vec<String>, DataError> {
    if spec.len_lo > spec.len_hi {
        return Err(DataError::Bounds(format!("{} > {}", spec.len_lo, spec.len_hi)));
    }
    let alphabet: Vec<char> = vocab.payload_chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..spec.n)
        .map(|_| {
            let len = rng.gen_range(spec.len_lo..=spec.len_hi);
            (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
        })
        .collect())
}

/// One payload per line, UTF-8.
pub fn write_corpus(path: &Path, corpus: &[String]) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for line in corpus {
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<String>, DataError> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<String> = text.lines().map(str::to_owned).collect();
    for c in lines.iter().flat_map(|l| l.chars()) {
        if vocab.id_of(c).is_none() {
            return Err(DataError::UnknownChar(c));
        }
    }
    Ok(lines)
}
