use rand::Rng;

use super::{Sentence, RESERVED};
use crate::error::{Error, Result};

/// A sentence with BERT-style token corruption applied.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmMaskedBatch {
    pub input_ids: Vec<usize>,
    /// Original ids at `mask_positions`, in the same order.
    pub target_ids: Vec<usize>,
    pub mask_positions: Vec<usize>,
}

/// Select each content position with probability `rate`; selected positions
/// become `[MASK]` 80% of the time, a random non-reserved id 10%, and stay
/// unchanged 10%. `[CLS]`/`[SEP]` are never selected.
pub fn make_mlm_mask<R: Rng>(
    sentence: &Sentence,
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MlmMaskedBatch> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::invalid(format!("mask rate {rate} outside (0, 1)")));
    }
    if vocab_size <= RESERVED.len() {
        return Err(Error::invalid("vocabulary has no content tokens"));
    }
    let mut input_ids = sentence.token_ids().to_vec();
    let mut target_ids = Vec::new();
    let mut mask_positions = Vec::new();
    for pos in 1..input_ids.len() - 1 {
        if rng.random::<f64>() >= rate {
            continue;
        }
        target_ids.push(input_ids[pos]);
        mask_positions.push(pos);
        let roll: f64 = rng.random();
        if roll < 0.8 {
            input_ids[pos] = super::MASK;
        } else if roll < 0.9 {
            input_ids[pos] = rng.random_range(RESERVED.len()..vocab_size);
        }
    }
    Ok(MlmMaskedBatch {
        input_ids,
        target_ids,
        mask_positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CLS, MASK, SEP};
    use crate::seed::rng;

    #[test]
    fn rate_bounds() {
        let s = Sentence::from_content(&[5, 6, 7]);
        let mut r = rng(0);
        assert!(make_mlm_mask(&s, 1.0, 10, &mut r).is_err());
        assert!(make_mlm_mask(&s, 0.0, 10, &mut r).is_err());
    }

    #[test]
    fn tiny_rate_masks_nothing() {
        let s = Sentence::from_content(&[5, 6, 7, 8]);
        let m = make_mlm_mask(&s, 1e-12, 10, &mut rng(1)).unwrap();
        assert!(m.mask_positions.is_empty());
        assert_eq!(m.input_ids, s.token_ids());
    }

    #[test]
    fn masked_fraction_and_split() {
        let content: Vec<usize> = (0..50).map(|i| 5 + i % 40).collect();
        let s = Sentence::from_content(&content);
        let mut r = rng(2);
        let (mut selected, mut total, mut as_mask, mut unchanged) = (0usize, 0usize, 0usize, 0usize);
        for _ in 0..2000 {
            let m = make_mlm_mask(&s, 0.15, 64, &mut r).unwrap();
            assert_eq!(m.input_ids[0], CLS);
            assert_eq!(*m.input_ids.last().unwrap(), SEP);
            for (i, (&a, &b)) in m.input_ids.iter().zip(s.token_ids()).enumerate() {
                if a != b {
                    assert!(m.mask_positions.contains(&i));
                }
            }
            for (&p, &t) in m.mask_positions.iter().zip(&m.target_ids) {
                assert_eq!(s.token_ids()[p], t);
                if m.input_ids[p] == MASK {
                    as_mask += 1;
                } else if m.input_ids[p] == t {
                    unchanged += 1;
                }
            }
            selected += m.mask_positions.len();
            total += content.len();
        }
        let frac = selected as f64 / total as f64;
        assert!((frac - 0.15).abs() < 0.005, "{frac}");
        let mask_share = as_mask as f64 / selected as f64;
        assert!((mask_share - 0.8).abs() < 0.02, "{mask_share}");
        // unchanged = the 10% keep branch plus random draws that hit the original
        let keep_share = unchanged as f64 / selected as f64;
        assert!((keep_share - 0.1).abs() < 0.02, "{keep_share}");
    }
}
