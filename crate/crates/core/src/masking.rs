//! Modality availability masks.

use std::fmt;
use std::str::FromStr;

use digest_nn::Tensor;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{Modality, MODALITIES};
use crate::{DigestError, Result};

/// Which of (T1, T1ce, T2, FLAIR) are present. Never empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalityMask([bool; 4]);

impl ModalityMask {
    pub const FULL: ModalityMask = ModalityMask([true; 4]);

    pub fn new(bits: [bool; 4]) -> Result<Self> {
        if bits.iter().any(|&b| b) {
            Ok(Self(bits))
        } else {
            Err(DigestError::Format(
                "a modality mask needs at least one modality".into(),
            ))
        }
    }

    pub fn bits(self) -> [bool; 4] {
        self.0
    }

    pub fn has(self, m: Modality) -> bool {
        self.0[m.index()]
    }

    /// Number of available modalities.
    pub fn count(self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Bit `k` set when modality `k` is present; in `1..=15`.
    pub fn code(self) -> usize {
        self.0.iter().enumerate().map(|(k, &b)| (b as usize) << k).sum()
    }

    pub fn from_code(code: usize) -> Result<Self> {
        if code > 15 {
            return Err(DigestError::Format(format!("mask code {code} exceeds 4 bits")));
        }
        Self::new([0, 1, 2, 3].map(|k| code >> k & 1 == 1))
    }

    /// `+`-joined modality names, e.g. `T1+FLAIR`.
    pub fn label(self) -> String {
        MODALITIES
            .iter()
            .filter(|m| self.has(**m))
            .map(|m| m.name())
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl fmt::Display for ModalityMask {
    /// Four-character bitstring in modality order, e.g. `1011`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for ModalityMask {
    type Err = DigestError;

    fn from_str(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.trim().chars().collect();
        if chars.len() != 4 {
            return Err(DigestError::Format(format!("mask `{s}` is not a 4-bit string")));
        }
        let mut bits = [false; 4];
        for (b, c) in bits.iter_mut().zip(chars) {
            *b = match c {
                '1' => true,
                '0' => false,
                _ => return Err(DigestError::Format(format!("mask `{s}` is not a 4-bit string"))),
            };
        }
        Self::new(bits)
    }
}

impl Serialize for ModalityMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModalityMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Each modality present with probability 1/2; the empty draw is redrawn,
/// so the result is uniform over the 15 non-empty subsets.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R) -> ModalityMask {
    loop {
        let bits = [0; 4].map(|_| rng.random_bool(0.5));
        if let Ok(m) = ModalityMask::new(bits) {
            return m;
        }
    }
}

/// The 15 evaluation subsets: single modalities, then pairs, triples and
/// the full set, each group in the conventional reporting order.
pub fn enumerate_subsets() -> [ModalityMask; 15] {
    const ROWS: [&str; 15] = [
        "1000", "0100", "0010", "0001", "1100", "1010", "1001", "0110", "0101", "0011", "1110", "1101", "0111", "1011",
        "1111",
    ];
    ROWS.map(|r| r.parse().expect("valid literal"))
}

/// Zeroes the channels of absent modalities in a `B×4×D×H×W` batch.
pub fn apply_mask(batch: &Tensor, mask: ModalityMask) -> Result<Tensor> {
    let mut out = batch.clone();
    apply_mask_in_place(&mut out, mask)?;
    Ok(out)
}

pub fn apply_mask_in_place(batch: &mut Tensor, mask: ModalityMask) -> Result<()> {
    let (b, c, dims) = batch.dims5()?;
    if c != 4 {
        return Err(DigestError::Shape(format!(
            "masking needs 4 modality channels, got {c}"
        )));
    }
    let n: usize = dims.iter().product();
    let data = batch.data_mut();
    for s in 0..b {
        for (k, &keep) in mask.bits().iter().enumerate() {
            if !keep {
                data[(s * 4 + k) * n..(s * 4 + k + 1) * n].fill(0.0);
            }
        }
    }
    Ok(())
}
