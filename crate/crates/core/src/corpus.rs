//! Byte-level corpus loading.

use std::fs;
use std::path::Path;

use crate::config::{BOS, EOS};
use crate::error::{Error, Result};

/// Contiguous 90/10 train/validation split of a byte stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Input("corpus is empty".into()));
        }
        let ids = encode(bytes);
        let cut = ids.len() * 9 / 10;
        Ok(Corpus { train: ids[..cut].to_vec(), valid: ids[cut..].to_vec() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

pub fn encode(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Bytes back to text; the begin/end markers are dropped.
pub fn decode(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| i != BOS && i != EOS && i < 256).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_are_ids() {
        assert_eq!(encode(b"ab"), vec![97, 98]);
        assert_eq!(decode(&[104, 105, EOS]), "hi");
    }

    #[test]
    fn ninety_ten_split() {
        let c = Corpus::from_bytes(&[7u8; 100]).unwrap();
        assert_eq!((c.train.len(), c.valid.len()), (90, 10));
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(Corpus::from_bytes(b""), Err(Error::Input(_))));
    }
}
