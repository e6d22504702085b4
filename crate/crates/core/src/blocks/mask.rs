use crate::error::{Error, Result};

/// Validity of each position in a padded `[batch, len]` sequence batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqMask {
    batch: usize,
    len: usize,
    valid: Vec<bool>,
}

impl SeqMask {
    pub fn new(batch: usize, len: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != batch * len {
            return Err(Error::Shape {
                op: "mask",
                lhs: vec![batch, len],
                rhs: vec![valid.len()],
            });
        }
        Ok(SeqMask { batch, len, valid })
    }

    pub fn all_valid(batch: usize, len: usize) -> Self {
        SeqMask {
            batch,
            len,
            valid: vec![true; batch * len],
        }
    }

    /// Left-aligned sequences of the given lengths, padded to `len`.
    pub fn from_lengths(lengths: &[usize], len: usize) -> Self {
        let valid = lengths
            .iter()
            .flat_map(|&l| (0..len).map(move |i| i < l))
            .collect();
        SeqMask {
            batch: lengths.len(),
            len,
            valid,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_valid(&self, b: usize, i: usize) -> bool {
        self.valid[b * self.len + i]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.valid
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.batch)
            .map(|b| (0..self.len).filter(|&i| self.is_valid(b, i)).count())
            .collect()
    }

    pub fn is_full(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    /// Mask after prepending one always-valid position (a CLS slot).
    pub fn with_leading_valid(&self) -> SeqMask {
        let len = self.len + 1;
        let mut valid = Vec::with_capacity(self.batch * len);
        for b in 0..self.batch {
            valid.push(true);
            valid.extend_from_slice(&self.valid[b * self.len..(b + 1) * self.len]);
        }
        SeqMask {
            batch: self.batch,
            len,
            valid,
        }
    }
}
