//! Row-major run-length encoding of binary masks.
//!
//! `counts` alternates background and foreground run lengths, starting with
//! background (so a mask starting with foreground has a leading 0).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Mask;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("run lengths sum to {got}, mask has {want} pixels")]
pub struct RleError {
    pub want: usize,
    pub got: usize,
}

pub fn encode(mask: &Mask) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &b in &mask.bits {
        if b != current {
            counts.push(run);
            run = 0;
            current = b;
        }
        run += 1;
    }
    counts.push(run);
    Rle {
        height: mask.height,
        width: mask.width,
        counts,
    }
}

pub fn decode(rle: &Rle) -> Result<Mask, RleError> {
    let want = rle.height * rle.width;
    let got: usize = rle.counts.iter().map(|&c| c as usize).sum();
    if got != want {
        return Err(RleError { want, got });
    }
    let mut bits = Vec::with_capacity(want);
    for (k, &c) in rle.counts.iter().enumerate() {
        bits.extend(std::iter::repeat_n(k % 2 == 1, c as usize));
    }
    Ok(Mask {
        height: rle.height,
        width: rle.width,
        bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_encoding() {
        let m = Mask::new(2, 3, vec![true, true, false, false, true, true]).unwrap();
        let r = encode(&m);
        assert_eq!(r.counts, vec![0, 2, 2, 2]);
        assert_eq!(decode(&r).unwrap(), m);
        assert_eq!(encode(&Mask::empty(2, 2)).counts, vec![4]);
    }

    #[test]
    fn bad_counts_rejected() {
        let r = Rle {
            height: 2,
            width: 2,
            counts: vec![1, 1],
        };
        assert_eq!(decode(&r), Err(RleError { want: 4, got: 2 }));
    }

    /// Independent per-pixel decoder used as the oracle.
    fn pixel_oracle(r: &Rle, idx: usize) -> bool {
        let mut acc = 0usize;
        for (k, &c) in r.counts.iter().enumerate() {
            acc += c as usize;
            if idx < acc {
                return k % 2 == 1;
            }
        }
        unreachable!()
    }

    proptest! {
        #[test]
        fn roundtrip(h in 1usize..12, w in 1usize..12, bits in prop::collection::vec(any::<bool>(), 144)) {
            let m = Mask::new(h, w, bits[..h * w].to_vec()).unwrap();
            let r = encode(&m);
            prop_assert_eq!(decode(&r).unwrap(), m.clone());
            for i in 0..h * w {
                prop_assert_eq!(pixel_oracle(&r, i), m.bits[i]);
            }
        }
    }
}
