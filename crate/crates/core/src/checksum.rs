//! SHA-256 fingerprints over parameter and prototype bytes.

use core::fmt;

use sha2::{Digest, Sha256};

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Checksum(pub [u8; 32]);

impl Checksum {
    pub fn of_f64s<'a>(chunks: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut hasher = Sha256::new();
        for chunk in chunks {
            for v in chunk {
                hasher.update(v.to_le_bytes());
            }
        }
        let mut out = [0u8; 32];
        out.copy_from_slice(&hasher.finalize());
        Checksum(out)
    }
}

impl fmt::Display for Checksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Checksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Checksum({self})")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sensitive_to_sign_of_zero() {
        let a = Checksum::of_f64s([&[0.0][..]]);
        let b = Checksum::of_f64s([&[-0.0][..]]);
        assert_ne!(a, b);
    }

    #[test]
    fn chunking_does_not_matter() {
        let a = Checksum::of_f64s([&[1.0, 2.0][..], &[3.0][..]]);
        let b = Checksum::of_f64s([&[1.0, 2.0, 3.0][..]]);
        assert_eq!(a, b);
    }
}
