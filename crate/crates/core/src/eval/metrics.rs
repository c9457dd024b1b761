use crate::data::{TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};

fn same_count(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{a} hypotheses for {b} references")));
    }
    Ok(())
}

fn mean_pct(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    100.0 * values.sum::<f64>() / n as f64
}

/// Percentage of hypotheses equal to their reference.
pub fn metric_exact<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<f64> {
    same_count(hyps.len(), refs.len())?;
    let hits = hyps.iter().zip(refs).map(|(h, r)| f64::from(u8::from(h.as_ref() == r.as_ref())));
    Ok(mean_pct(hits, hyps.len()))
}

/// Drops a leading bos and cuts at the first eos or pad.
pub fn normalize_ids(ids: &[TokenId]) -> &[TokenId] {
    let ids = ids.strip_prefix(&[BOS]).unwrap_or(ids);
    let end = ids.iter().position(|&t| t == EOS || t == PAD).unwrap_or(ids.len());
    &ids[..end]
}

/// Fraction of positions that agree after normalisation, with the shorter
/// side padded. Two empty sequences agree fully.
pub fn token_accuracy(hyp: &[TokenId], reference: &[TokenId]) -> f64 {
    let (h, r) = (normalize_ids(hyp), normalize_ids(reference));
    let n = h.len().max(r.len());
    if n == 0 {
        return 1.0;
    }
    let hits = h.iter().zip(r).filter(|(a, b)| a == b).count();
    hits as f64 / n as f64
}

/// Mean per-pair token accuracy, in percent.
pub fn metric_token_acc<H: AsRef<[TokenId]>, R: AsRef<[TokenId]>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    same_count(hyps.len(), refs.len())?;
    let accs = hyps.iter().zip(refs).map(|(h, r)| token_accuracy(h.as_ref(), r.as_ref()));
    Ok(mean_pct(accs, hyps.len()))
}

/// `100·(1 − d/max(1, |hyp|, |ref|))` with unit-cost edit distance over chars.
pub fn metric_levsim(hyp: &str, reference: &str) -> f64 {
    let d = strsim::levenshtein(hyp, reference);
    let n = hyp.chars().count().max(reference.chars().count()).max(1);
    100.0 * (1.0 - d as f64 / n as f64)
}

pub fn mean_levsim<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<f64> {
    same_count(hyps.len(), refs.len())?;
    let sims = hyps.iter().zip(refs).map(|(h, r)| metric_levsim(h.as_ref(), r.as_ref()) / 100.0);
    Ok(mean_pct(sims, hyps.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn exact_match_examples() {
        let a = ["x", "y", "z", "w"];
        assert_eq!(metric_exact(&a, &a).unwrap(), 100.0);
        assert_eq!(metric_exact(&a, &["1", "2", "3", "4"]).unwrap(), 0.0);
        assert_eq!(metric_exact(&a, &["x", "2", "3", "4"]).unwrap(), 25.0);
        assert!(metric_exact(&a, &["x"]).is_err());
    }

    #[test]
    fn token_accuracy_examples() {
        // "abc" = 3 4 5
        assert_eq!(token_accuracy(&[3, 4, 5], &[1, 3, 4, 5, 2]), 1.0);
        assert_abs_diff_eq!(100.0 * token_accuracy(&[3, 4], &[1, 3, 4, 5, 2, 0]), 66.666_666, epsilon = 1e-3);
        assert_eq!(token_accuracy(&[1, 2], &[]), 1.0);
        assert_eq!(token_accuracy(&[3, 2, 9, 9], &[3]), 1.0);
    }

    #[test]
    fn levsim_examples() {
        assert_eq!(metric_levsim("hello", "hello"), 100.0);
        assert_abs_diff_eq!(metric_levsim("abc", "abd"), 66.666_666, epsilon = 1e-3);
        assert_eq!(metric_levsim("", ""), 100.0);
        assert_eq!(metric_levsim("", "ab"), 0.0);
    }
}
