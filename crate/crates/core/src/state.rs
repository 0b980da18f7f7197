//! Configurations over a finite alphabet and their mixed-radix indexing.
//!
//! Symbols are always `0..p`. A configuration of `q` sites is stored as a
//! byte vector; the state index treats site 1 as the least-significant
//! digit, so `[2, 1]` over `p = 3` is `2 + 1 * 3 = 5`.

use std::fmt;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index widths above this many bits are refused outright.
pub const MAX_INDEX_BITS: f64 = 62.0;

/// Default limit on `q * log2(p)` for anything that materializes a full table.
pub const DEFAULT_GUARD_BITS: u32 = 24;

/// Number of symbols `p` in the alphabet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Alphabet(usize);

impl Alphabet {
    pub fn new(p: usize) -> Result<Self> {
        if (2..=256).contains(&p) {
            Ok(Self(p))
        } else {
            Err(Error::InvalidAlphabet(p))
        }
    }

    pub const fn size(self) -> usize {
        self.0
    }
}

impl TryFrom<usize> for Alphabet {
    type Error = Error;
    fn try_from(p: usize) -> Result<Self> {
        Self::new(p)
    }
}

impl From<Alphabet> for usize {
    fn from(a: Alphabet) -> usize {
        a.0
    }
}

/// A 1-based site (coordinate) index, `1 ..= q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site(usize);

impl Site {
    /// Builds a site from its 1-based number, checking it against `q`.
    pub fn new(u: usize, q: usize) -> Result<Self> {
        if u >= 1 && u <= q {
            Ok(Self(u))
        } else {
            Err(Error::InvalidParameter(format!("site {u} outside 1..={q}")))
        }
    }

    /// Builds a site from a 0-based storage index.
    pub const fn from_index(i: usize) -> Self {
        Self(i + 1)
    }

    /// The 1-based site number.
    pub const fn get(self) -> usize {
        self.0
    }

    /// The 0-based storage index.
    pub const fn index(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An owned configuration `σ ∈ Σ^q`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Configuration(Vec<u8>);

impl Configuration {
    pub fn new(symbols: Vec<u8>) -> Self {
        Self(symbols)
    }

    pub fn zeros(q: usize) -> Self {
        Self(vec![0; q])
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.0
    }
}

impl Deref for Configuration {
    type Target = [u8];
    fn deref(&self) -> &[u8] {
        &self.0
    }
}

impl DerefMut for Configuration {
    fn deref_mut(&mut self) -> &mut [u8] {
        &mut self.0
    }
}

impl From<Vec<u8>> for Configuration {
    fn from(v: Vec<u8>) -> Self {
        Self(v)
    }
}

/// Limit on the size of tables built over the full state space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Guard {
    pub max_bits: u32,
}

impl Default for Guard {
    fn default() -> Self {
        Self {
            max_bits: DEFAULT_GUARD_BITS,
        }
    }
}

impl Guard {
    pub const fn new(max_bits: u32) -> Self {
        Self { max_bits }
    }

    pub fn check(&self, space: &StateSpace) -> Result<()> {
        let bits = space.bits();
        if bits > self.max_bits as f64 + 1e-9 {
            return Err(Error::StateSpaceTooLarge {
                q: space.q,
                p: space.p(),
                bits,
                guard: self.max_bits,
            });
        }
        Ok(())
    }
}

/// The configuration space `Σ^q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StateSpace {
    q: usize,
    alphabet: Alphabet,
}

impl StateSpace {
    pub fn new(q: usize, p: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::InvalidParameter("q must be at least 1".into()));
        }
        Ok(Self {
            q,
            alphabet: Alphabet::new(p)?,
        })
    }

    pub const fn q(&self) -> usize {
        self.q
    }

    pub const fn p(&self) -> usize {
        self.alphabet.size()
    }

    pub const fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    /// `q * log2(p)`.
    pub fn bits(&self) -> f64 {
        self.q as f64 * (self.p() as f64).log2()
    }

    /// `p^q`, or an overflow error past the 62-bit index width.
    pub fn num_states(&self) -> Result<u64> {
        let overflow = || Error::IndexOverflow {
            q: self.q,
            p: self.p(),
        };
        if self.bits() > MAX_INDEX_BITS {
            return Err(overflow());
        }
        let mut n: u64 = 1;
        for _ in 0..self.q {
            n = n.checked_mul(self.p() as u64).ok_or_else(overflow)?;
        }
        Ok(n)
    }

    /// Number of states as a table length, after checking the guard.
    pub fn table_len(&self, guard: Guard) -> Result<usize> {
        guard.check(self)?;
        Ok(self.num_states()? as usize)
    }

    /// Index stride of a site: `p^(index)`.
    pub fn stride(&self, site: Site) -> u64 {
        (self.p() as u64).pow(site.index() as u32)
    }

    pub fn validate(&self, config: &[u8]) -> Result<()> {
        if config.len() != self.q {
            return Err(Error::DimensionMismatch(format!(
                "configuration has {} sites, expected {}",
                config.len(),
                self.q
            )));
        }
        if let Some((site, &symbol)) = config
            .iter()
            .enumerate()
            .find(|(_, &s)| s as usize >= self.p())
        {
            return Err(Error::SymbolOutOfRange {
                site: site + 1,
                symbol,
                p: self.p(),
            });
        }
        Ok(())
    }

    pub fn encode(&self, config: &[u8]) -> Result<u64> {
        self.validate(config)?;
        self.num_states()?;
        Ok(self.encode_unchecked(config))
    }

    /// Mixed-radix index without validation.
    #[inline]
    pub fn encode_unchecked(&self, config: &[u8]) -> u64 {
        let p = self.p() as u64;
        config
            .iter()
            .rev()
            .fold(0u64, |acc, &s| acc * p + s as u64)
    }

    pub fn decode(&self, index: u64) -> Result<Configuration> {
        let num_states = self.num_states()?;
        if index >= num_states {
            return Err(Error::IndexOutOfRange { index, num_states });
        }
        let mut out = Configuration::zeros(self.q);
        self.decode_into(index, &mut out);
        Ok(out)
    }

    #[inline]
    pub fn decode_into(&self, mut index: u64, out: &mut [u8]) {
        let p = self.p() as u64;
        for s in out.iter_mut() {
            *s = (index % p) as u8;
            index /= p;
        }
    }

    /// Hamming distance between two configurations given by index.
    pub fn hamming(&self, a: u64, b: u64) -> usize {
        let p = self.p() as u64;
        let (mut a, mut b) = (a, b);
        let mut d = 0;
        for _ in 0..self.q {
            if a % p != b % p {
                d += 1;
            }
            a /= p;
            b /= p;
        }
        d
    }
}

/// Mixed-radix index of `config`, site 1 least significant.
pub fn encode_config(config: &[u8], p: usize) -> Result<u64> {
    StateSpace::new(config.len(), p)?.encode(config)
}

/// Inverse of [`encode_config`].
pub fn decode_config(index: u64, q: usize, p: usize) -> Result<Configuration> {
    StateSpace::new(q, p)?.decode(index)
}

/// Advances `config` to the next configuration in index order.
/// Returns `false` after wrapping around from the maximal configuration.
#[inline]
pub fn increment(config: &mut [u8], p: usize) -> bool {
    for s in config.iter_mut() {
        if (*s as usize) + 1 < p {
            *s += 1;
            return true;
        }
        *s = 0;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        assert_eq!(encode_config(&[0, 0, 0], 2).unwrap(), 0);
        assert_eq!(encode_config(&[1, 0, 0], 2).unwrap(), 1);
        assert_eq!(encode_config(&[2, 1], 3).unwrap(), 5);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(&*decode_config(0, 3, 2).unwrap(), &[0, 0, 0]);
        assert_eq!(&*decode_config(5, 2, 3).unwrap(), &[2, 1]);
        let top = decode_config(4u64.pow(5) - 1, 5, 4).unwrap();
        assert!(top.iter().all(|&s| s == 3));
    }

    #[test]
    fn decode_out_of_range() {
        assert!(matches!(
            decode_config(8, 3, 2),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn encode_rejects_bad_symbols_and_overflow() {
        assert!(matches!(
            encode_config(&[0, 3], 3),
            Err(Error::SymbolOutOfRange { site: 2, .. })
        ));
        assert!(matches!(
            encode_config(&[0; 63], 2),
            Err(Error::IndexOverflow { .. })
        ));
        assert!(encode_config(&[1; 62], 2).is_ok());
        assert!(matches!(
            encode_config(&[0; 3], 1),
            Err(Error::InvalidAlphabet(1))
        ));
    }

    #[test]
    fn exhaustive_round_trip() {
        for (q, p) in [(16, 2), (8, 4), (5, 9), (1, 256), (2, 256)] {
            let space = StateSpace::new(q, p).unwrap();
            let n = space.num_states().unwrap();
            assert!(n <= 1 << 16);
            let mut config = Configuration::zeros(q);
            for idx in 0..n {
                assert_eq!(space.encode(&config).unwrap(), idx);
                assert_eq!(space.decode(idx).unwrap(), config);
                increment(&mut config, p);
            }
        }
    }

    #[test]
    fn guard_limits() {
        let space = StateSpace::new(25, 2).unwrap();
        assert!(matches!(
            space.table_len(Guard::default()),
            Err(Error::StateSpaceTooLarge { .. })
        ));
        assert_eq!(space.table_len(Guard::new(25)).unwrap(), 1 << 25);
    }

    #[test]
    fn site_numbering() {
        let s = Site::new(3, 4).unwrap();
        assert_eq!(s.index(), 2);
        assert_eq!(Site::from_index(0).get(), 1);
        assert!(Site::new(0, 4).is_err());
        assert!(Site::new(5, 4).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_large_spaces(p in 2usize..=256, seed in proptest::collection::vec(any::<u8>(), 1..40)) {
            let space = StateSpace::new(seed.len(), p).unwrap();
            prop_assume!(space.bits() <= MAX_INDEX_BITS);
            let config: Vec<u8> = seed.iter().map(|&s| (s as usize % p) as u8).collect();
            let idx = space.encode(&config).unwrap();
            prop_assert_eq!(&*space.decode(idx).unwrap(), &config[..]);
        }
    }
}
