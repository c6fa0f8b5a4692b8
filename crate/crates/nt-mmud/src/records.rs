//! On-disk record types. One JSONL line per sample; masks are run-length
//! encoded as alternating (value, count) pairs over raster order.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct RefExp {
    pub expression: String,
    /// 1-based index into `masks` (same numbering as <obj-i>).
    pub obj_id: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Reasoning {
    pub question: String,
    pub answer: String,
    /// Marker indices appearing in `answer`, in emission order.
    pub obj_ids: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    /// Flat RGB raster, length GRID*GRID*3.
    pub image: Vec<u8>,
    pub caption: String,
    pub refexp: Vec<RefExp>,
    /// Absent for scenes with fewer than two objects.
    pub reasoning: Option<Reasoning>,
    /// One RLE mask per object, canonical order.
    pub masks: Vec<Vec<u32>>,
    /// Id of the grid the caption should reproduce (the sample itself).
    pub gen_target_id: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct SplitFiles {
    pub train: String,
    pub val: String,
    pub test: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub splits: SplitSizes,
    pub files: SplitFiles,
    pub vocab: String,
}

pub const SCHEMA_VERSION: u32 = 1;

/// RLE over a binary raster: alternating value, count; first pair covers
/// position 0. Counts are always positive.
pub fn rle_encode(mask: &[u8]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        let v = mask[i];
        let mut n = 0u32;
        while i < mask.len() && mask[i] == v {
            n += 1;
            i += 1;
        }
        out.push(v as u32);
        out.push(n);
    }
    out
}

/// Inverse of rle_encode. Errors describe what is malformed.
pub fn rle_decode(rle: &[u32], expected_len: usize) -> Result<Vec<u8>, String> {
    if rle.len() % 2 != 0 {
        return Err("odd number of rle entries".into());
    }
    let mut out = Vec::with_capacity(expected_len);
    for pair in rle.chunks(2) {
        let (v, n) = (pair[0], pair[1]);
        if v > 1 {
            return Err(format!("rle value {v} not binary"));
        }
        if n == 0 {
            return Err("zero-length rle run".into());
        }
        for _ in 0..n {
            out.push(v as u8);
        }
        if out.len() > expected_len {
            return Err(format!("rle expands past {expected_len}"));
        }
    }
    if out.len() != expected_len {
        return Err(format!("rle covers {} of {expected_len} cells", out.len()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_round_trip() {
        let mask = vec![0, 0, 1, 1, 1, 0, 1, 0, 0, 0];
        let rle = rle_encode(&mask);
        assert_eq!(rle, vec![0, 2, 1, 3, 0, 1, 1, 1, 0, 3]);
        assert_eq!(rle_decode(&rle, 10).unwrap(), mask);
    }

    #[test]
    fn rle_decode_rejects_malformed_input() {
        assert!(rle_decode(&[0, 5, 1], 6).is_err());
        assert!(rle_decode(&[2, 6], 6).is_err());
        assert!(rle_decode(&[0, 0, 1, 6], 6).is_err());
        assert!(rle_decode(&[0, 5], 6).is_err());
        assert!(rle_decode(&[0, 7], 6).is_err());
    }

    #[test]
    fn all_zero_and_all_one_masks() {
        assert_eq!(rle_encode(&[0; 4]), vec![0, 4]);
        assert_eq!(rle_encode(&[1; 4]), vec![1, 4]);
        assert_eq!(rle_decode(&[1, 4], 4).unwrap(), vec![1; 4]);
    }
}
