use std::fmt;

use sha2::{Digest, Sha256};

use super::QTreeError;

/// Identifier radix. Trees are induced with base 4 so that a few hundred
/// nodes already produce several levels.
pub const BASE: u8 = 4;

/// Default digit count: 16 base-4 digits, i.e. 32 bits of hash.
pub const DEFAULT_DIGITS: usize = 16;

/// Fixed-width base-4 node identifier used for prefix routing.
///
/// Ordering is lexicographic on the digits, which is the tie-break order used
/// when two routing candidates are equally close.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(Vec<u8>);

impl NodeId {
    /// Builds an id from raw digits. Every digit must be below [`BASE`].
    pub fn from_digits(digits: Vec<u8>) -> Result<Self, QTreeError> {
        if digits.is_empty() {
            return Err(QTreeError::InvalidArgument("node id needs at least one digit".into()));
        }
        if let Some(d) = digits.iter().find(|d| **d >= BASE) {
            return Err(QTreeError::InvalidArgument(format!("digit {d} out of range")));
        }
        Ok(NodeId(digits))
    }

    pub fn digits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn digit(&self, i: usize) -> u8 {
        self.0[i]
    }

    /// Number of leading digits shared with `other`.
    pub fn shared_prefix(&self, other: &NodeId) -> usize {
        self.0.iter().zip(other.0.iter()).take_while(|(a, b)| a == b).count()
    }

    /// Parses the compact textual form produced by `Display` (e.g. `0123...`).
    pub fn parse(s: &str) -> Result<Self, QTreeError> {
        let digits = s
            .chars()
            .map(|c| {
                c.to_digit(BASE as u32)
                    .map(|d| d as u8)
                    .ok_or_else(|| QTreeError::InvalidArgument(format!("bad node id digit {c:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        NodeId::from_digits(digits)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.0 {
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({self})")
    }
}

/// Derives a stable identifier from a node name by hashing it with SHA-256
/// and reading the digest two bits at a time.
pub fn node_id_from_name(name: &str, digits: usize) -> Result<NodeId, QTreeError> {
    if name.is_empty() {
        return Err(QTreeError::InvalidArgument("node name must be nonempty".into()));
    }
    if digits == 0 || digits > 128 {
        return Err(QTreeError::InvalidArgument(format!("unsupported digit count {digits}")));
    }
    let hash = Sha256::digest(name.as_bytes());
    let out = (0..digits)
        .map(|i| {
            let byte = hash[i / 4];
            (byte >> (6 - 2 * (i % 4))) & 0b11
        })
        .collect();
    Ok(NodeId(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn same_name_same_id() {
        let a = node_id_from_name("node-17", DEFAULT_DIGITS).unwrap();
        let b = node_id_from_name("node-17", DEFAULT_DIGITS).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), DEFAULT_DIGITS);
        assert!(a.digits().iter().all(|d| *d < BASE));
    }

    #[test]
    fn distinct_names_distinct_ids() {
        let a = node_id_from_name("alpha", DEFAULT_DIGITS).unwrap();
        let b = node_id_from_name("beta", DEFAULT_DIGITS).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn five_hundred_twelve_ids_are_distinct() {
        let ids: BTreeSet<_> = (0..512)
            .map(|i| node_id_from_name(&format!("node-{i}"), DEFAULT_DIGITS).unwrap())
            .collect();
        assert_eq!(ids.len(), 512);
    }

    #[test]
    fn digits_are_roughly_uniform() {
        let mut counts = [0usize; 4];
        for i in 0..4000 {
            let id = node_id_from_name(&format!("n{i}"), DEFAULT_DIGITS).unwrap();
            for d in id.digits() {
                counts[*d as usize] += 1;
            }
        }
        // 64000 digits, expected 16000 each; 5 sigma is about 550
        for c in counts {
            assert!((c as i64 - 16000).abs() < 600, "{counts:?}");
        }
    }

    #[test]
    fn empty_name_rejected() {
        assert!(node_id_from_name("", DEFAULT_DIGITS).is_err());
    }

    #[test]
    fn display_parse_round_trip() {
        let id = node_id_from_name("x", 8).unwrap();
        assert_eq!(NodeId::parse(&id.to_string()).unwrap(), id);
        assert!(NodeId::parse("0124").is_err());
    }

    #[test]
    fn shared_prefix_counts_leading_digits() {
        let a = NodeId::from_digits(vec![0, 1, 2, 3]).unwrap();
        let b = NodeId::from_digits(vec![0, 1, 3, 3]).unwrap();
        assert_eq!(a.shared_prefix(&b), 2);
        assert_eq!(a.shared_prefix(&a), 4);
    }
}
