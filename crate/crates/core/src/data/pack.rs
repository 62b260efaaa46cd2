use rand::seq::SliceRandom;

use super::synth::rng_for;
use super::vocab::{Vocab, BOS, PAD};
use crate::error::{Error, Result};

/// Fixed-length rows of concatenated `BOS doc BOS doc ...` streams.
///
/// Only the final row can carry padding, always at its tail.
#[derive(Clone, Debug, PartialEq)]
pub struct Packed {
    pub seq_len: usize,
    pub rows: Vec<Vec<u32>>,
}

impl Packed {
    pub fn n_tokens(&self) -> usize {
        self.rows.len() * self.seq_len
    }
}

pub fn tokenize_and_pack(docs: &[String], vocab: &Vocab, seq_len: usize) -> Result<Packed> {
    if vocab.is_empty() {
        return Err(Error::Validation("empty vocabulary".into()));
    }
    if seq_len < 2 {
        return Err(Error::Config(format!(
            "seq_len {seq_len} is too short to hold a target"
        )));
    }
    let mut stream = Vec::new();
    for doc in docs {
        stream.push(BOS);
        stream.extend(vocab.encode(doc));
    }
    let mut rows: Vec<Vec<u32>> = stream.chunks(seq_len).map(<[u32]>::to_vec).collect();
    if let Some(last) = rows.last_mut() {
        last.resize(seq_len, PAD);
    }
    Ok(Packed { seq_len, rows })
}

/// Next-token targets for one row; positions whose successor is BOS or PAD, and
/// the final position, have no target.
pub fn targets_for(row: &[u32]) -> Vec<Option<u32>> {
    (0..row.len())
        .map(|t| match row.get(t + 1) {
            Some(&next) if next != BOS && next != PAD && row[t] != PAD => Some(next),
            _ => None,
        })
        .collect()
}

/// The row without its trailing padding.
pub fn strip_padding(row: &[u32]) -> &[u32] {
    let end = row.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
    &row[..end]
}

/// `n` rows chosen by a seeded permutation, padding stripped. Used as the
/// entropy measurement set.
pub fn measurement_set(packed: &Packed, n: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut idx: Vec<usize> = (0..packed.rows.len()).collect();
    idx.shuffle(&mut rng_for(seed, 40));
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter()
        .map(|i| strip_padding(&packed.rows[i]).to_vec())
        .filter(|r| !r.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::UNK;

    fn vocab() -> Vocab {
        Vocab::build(["a b c d e f g h"], 64).unwrap()
    }

    #[test]
    fn single_short_document() {
        let v = vocab();
        let p = tokenize_and_pack(&["a b c d e".to_string()], &v, 8).unwrap();
        assert_eq!(p.rows.len(), 1);
        let row = &p.rows[0];
        assert_eq!(row[0], BOS);
        assert_eq!(v.decode(&row[1..6]), "a b c d e");
        assert_eq!(&row[6..], &[PAD, PAD]);
    }

    #[test]
    fn targets_align_and_mask_boundaries() {
        let v = vocab();
        let docs = vec![
            "a b c".to_string(),
            "d e".to_string(),
            "f g h a b".to_string(),
        ];
        let p = tokenize_and_pack(&docs, &v, 5).unwrap();
        let stream: Vec<u32> = p.rows.concat();
        for row in &p.rows {
            let tg = targets_for(row);
            for t in 0..row.len() {
                let expected = match row.get(t + 1) {
                    Some(&n) if n != BOS && n != PAD => Some(n),
                    _ => None,
                };
                assert_eq!(tg[t], expected);
            }
        }
        // a → b inside a document, c ↛ BOS across the boundary
        let c_at = stream.iter().position(|&x| x == v.id("c")).unwrap();
        assert_eq!(stream[c_at + 1], BOS);
        assert_eq!(targets_for(&p.rows[c_at / 5])[c_at % 5], None);
    }

    #[test]
    fn token_count_is_conserved() {
        let v = vocab();
        let docs: Vec<String> = (0..13)
            .map(|i| {
                "a b c d e f g"
                    .split(' ')
                    .take(1 + i % 7)
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        for seq_len in [2, 3, 7, 16, 100] {
            let p = tokenize_and_pack(&docs, &v, seq_len).unwrap();
            let words: usize = docs.iter().map(|d| d.split_whitespace().count()).sum();
            let pads = p.rows.concat().iter().filter(|&&t| t == PAD).count();
            assert_eq!(words + docs.len() + pads, p.rows.len() * seq_len);
        }
    }

    #[test]
    fn detokenization_round_trips_known_words() {
        let v = vocab();
        let p = tokenize_and_pack(&["h g zz f".to_string()], &v, 16).unwrap();
        let row = strip_padding(&p.rows[0]);
        assert_eq!(row[3], UNK);
        assert_eq!(v.decode(&[row[1], row[2], row[4]]), "h g f");
    }

    #[test]
    fn empty_vocab_is_an_error() {
        let v = Vocab::build(std::iter::empty(), 8).unwrap();
        assert!(tokenize_and_pack(&["a".to_string()], &v, 8).is_err());
    }
}
