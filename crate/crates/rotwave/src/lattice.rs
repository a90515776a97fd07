//! Square-lattice geometry for the quarter-turn reduction.
//!
//! The rotation used throughout is the location map `L(i, j) = (j, 1 - i)`,
//! a clockwise quarter turn about the point `(1/2, 1/2)`. The wedge
//!
//! ```text
//! Λ = { (i, j) : i >= 1, 2 - i <= j <= i }
//! ```
//!
//! is a fundamental domain: `Λ, L(Λ), L²(Λ), L³(Λ)` tile `ℤ²`. A value stored
//! at a wedge site `p` is carried to `L^k(p)` with its radius unchanged and its
//! phase advanced by `k·π/2`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer lattice coordinate `(i, j)`; `i` is the column, `j` the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteIndex {
    pub i: i64,
    pub j: i64,
}

impl SiteIndex {
    pub const fn new(i: i64, j: i64) -> Self {
        Self { i, j }
    }

    /// One clockwise quarter turn, `(i, j) -> (j, 1 - i)`.
    pub const fn rotate(self) -> Self {
        Self::new(self.j, 1 - self.i)
    }

    /// Inverse quarter turn, `(i, j) -> (1 - j, i)`.
    pub const fn rotate_inv(self) -> Self {
        Self::new(1 - self.j, self.i)
    }

    /// `L^k` for any `k`; negative counts rotate backwards.
    pub fn rotate_by(self, k: i64) -> Self {
        let mut s = self;
        for _ in 0..k.rem_euclid(4) {
            s = s.rotate();
        }
        s
    }

    pub const fn step(self, dir: Direction) -> Self {
        let (di, dj) = dir.offset();
        Self::new(self.i + di, self.j + dj)
    }
}

impl fmt::Display for SiteIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.i, self.j)
    }
}

impl From<(i64, i64)> for SiteIndex {
    fn from((i, j): (i64, i64)) -> Self {
        Self::new(i, j)
    }
}

/// Free-function form of [`SiteIndex::rotate`].
pub fn rotate_index(s: SiteIndex) -> SiteIndex {
    s.rotate()
}

/// Membership in the infinite wedge Λ.
pub fn wedge_contains(s: SiteIndex) -> bool {
    s.i >= 1 && 2 - s.i <= s.j && s.j <= s.i
}

/// The unique `k ∈ {0,1,2,3}` with `s ∈ L^k(Λ)`, together with the wedge
/// representative `p = L^{-k}(s)`.
pub fn partition_representative(s: SiteIndex) -> (u8, SiteIndex) {
    let mut p = s;
    for k in 0..4u8 {
        if wedge_contains(p) {
            return (k, p);
        }
        p = p.rotate_inv();
    }
    unreachable!("the four rotated wedges tile the lattice; {s} has no class")
}

pub fn partition_class(s: SiteIndex) -> u8 {
    partition_representative(s).0
}

/// Nearest-neighbour directions in the order the records are stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Right,
    Up,
    Left,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Right, Direction::Up, Direction::Left, Direction::Down];

    pub const fn offset(self) -> (i64, i64) {
        match self {
            Direction::Right => (1, 0),
            Direction::Up => (0, 1),
            Direction::Left => (-1, 0),
            Direction::Down => (0, -1),
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Left => "left",
            Direction::Down => "down",
        }
    }
}

/// How one neighbour of a truncated-wedge site is realised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeighborRecord {
    /// The neighbour is itself a site of the truncated wedge.
    Interior { target: SiteIndex, index: usize },
    /// The neighbour equals `L^k(target)`: radius copied, phase + k·π/2.
    Rotated { target: SiteIndex, index: usize, quarter_turns: u8 },
    /// The neighbour lies beyond column `N` and is dropped from coupling sums.
    Truncated,
}

impl NeighborRecord {
    /// Site index and phase offset of the value this record reads, if any.
    pub fn link(&self) -> Option<(usize, f64)> {
        match *self {
            NeighborRecord::Interior { index, .. } => Some((index, 0.0)),
            NeighborRecord::Rotated { index, quarter_turns, .. } => {
                Some((index, f64::from(quarter_turns) * FRAC_PI_2))
            }
            NeighborRecord::Truncated => None,
        }
    }

    pub fn target(&self) -> Option<SiteIndex> {
        match *self {
            NeighborRecord::Interior { target, .. } | NeighborRecord::Rotated { target, .. } => Some(target),
            NeighborRecord::Truncated => None,
        }
    }

    pub fn quarter_turns(&self) -> u8 {
        match *self {
            NeighborRecord::Rotated { quarter_turns, .. } => quarter_turns,
            _ => 0,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            NeighborRecord::Interior { .. } => "interior",
            NeighborRecord::Rotated { .. } => "rotated",
            NeighborRecord::Truncated => "truncated",
        }
    }
}

/// The finite wedge Λ_N = { (i, j) ∈ Λ : i <= N } with resolved neighbours.
///
/// Sites are stored lexicographically by `(i, j)`, so column `i` occupies the
/// contiguous block starting at `(i - 1)²`.
#[derive(Clone, Debug, PartialEq)]
pub struct WedgeTruncation {
    n: usize,
    sites: Vec<SiteIndex>,
    neighbors: Vec<[NeighborRecord; 4]>,
}

impl WedgeTruncation {
    pub fn new(n: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::InvalidDomainSize(n));
        }
        let cols = n as i64;
        let sites: Vec<SiteIndex> = (1..=cols)
            .flat_map(|i| (2 - i..=i).map(move |j| SiteIndex::new(i, j)))
            .collect();
        let mut wedge = Self { n, sites, neighbors: Vec::new() };
        let neighbors = wedge
            .sites
            .iter()
            .map(|&s| Direction::ALL.map(|d| wedge.classify(s.step(d))))
            .collect();
        wedge.neighbors = neighbors;
        Ok(wedge)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[SiteIndex] {
        &self.sites
    }

    pub fn site(&self, index: usize) -> SiteIndex {
        self.sites[index]
    }

    pub fn contains(&self, s: SiteIndex) -> bool {
        wedge_contains(s) && s.i <= self.n as i64
    }

    pub fn index_of(&self, s: SiteIndex) -> Option<usize> {
        self.contains(s).then(|| ((s.i - 1) * (s.i - 1) + s.j - 2 + s.i) as usize)
    }

    /// Column of the site stored at `index`.
    pub fn column(&self, index: usize) -> i64 {
        self.sites[index].i
    }

    pub fn neighbors(&self, index: usize) -> &[NeighborRecord; 4] {
        &self.neighbors[index]
    }

    pub fn resolve_neighbor(&self, s: SiteIndex, dir: Direction) -> Result<NeighborRecord> {
        let index = self.index_of(s).ok_or(Error::OutsideWedge(s))?;
        Ok(self.neighbors[index][dir as usize])
    }

    fn classify(&self, raw: SiteIndex) -> NeighborRecord {
        let (k, p) = partition_representative(raw);
        match self.index_of(p) {
            None => NeighborRecord::Truncated,
            Some(index) if k == 0 => NeighborRecord::Interior { target: p, index },
            Some(index) => NeighborRecord::Rotated { target: p, index, quarter_turns: k },
        }
    }

    /// Serializable description: sites plus the four records of every site.
    pub fn describe(&self) -> WedgeDescription {
        let neighbors = self
            .sites
            .iter()
            .zip(&self.neighbors)
            .map(|(s, recs)| {
                let records = Direction::ALL
                    .iter()
                    .zip(recs)
                    .map(|(d, rec)| NeighborDescription {
                        direction: d.name().to_string(),
                        kind: rec.kind_name().to_string(),
                        target: rec.target().map(|t| [t.i, t.j]),
                        quarter_turns: rec.quarter_turns(),
                    })
                    .collect();
                (format!("{},{}", s.i, s.j), records)
            })
            .collect();
        WedgeDescription {
            n: self.n,
            sites: self.sites.iter().map(|s| [s.i, s.j]).collect(),
            neighbors,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborDescription {
    pub direction: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<[i64; 2]>,
    pub quarter_turns: u8,
}

/// JSON form `{N, sites, neighbors}` for cross-checking by other tools.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WedgeDescription {
    #[serde(rename = "N")]
    pub n: usize,
    pub sites: Vec<[i64; 2]>,
    pub neighbors: std::collections::BTreeMap<String, Vec<NeighborDescription>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(i: i64, j: i64) -> SiteIndex {
        SiteIndex::new(i, j)
    }

    #[test]
    fn rotation_examples() {
        assert_eq!(rotate_index(s(1, 1)), s(1, 0));
        assert_eq!(rotate_index(s(2, 0)), s(0, -1));
        assert_eq!(s(7, -3).rotate().rotate().rotate().rotate(), s(7, -3));
        assert_eq!(s(7, -3).rotate_inv().rotate(), s(7, -3));
    }

    #[test]
    fn wedge_membership() {
        assert!(wedge_contains(s(1, 1)));
        assert!(!wedge_contains(s(1, 0)));
        assert!(wedge_contains(s(2, 0)));
        assert!(!wedge_contains(s(0, 1)));
    }

    // Independent oracle: enumerate k and test the k-fold inverse rotation.
    fn class_by_enumeration(x: SiteIndex) -> Vec<u8> {
        (0..4u8).filter(|&k| wedge_contains(x.rotate_by(-i64::from(k)))).collect()
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition_class(s(1, 1)), 0);
        assert_eq!(partition_class(s(1, 0)), 1);
        assert_eq!(partition_class(s(0, 1)), 3);
        assert_eq!(class_by_enumeration(s(1, 0)), vec![1]);
        assert_eq!(class_by_enumeration(s(0, 1)), vec![3]);
    }

    #[test]
    fn build_sizes() {
        assert!(matches!(WedgeTruncation::new(0), Err(Error::InvalidDomainSize(0))));
        let w1 = WedgeTruncation::new(1).unwrap();
        assert_eq!(w1.sites(), &[s(1, 1)]);
        let w3 = WedgeTruncation::new(3).unwrap();
        assert_eq!(w3.len(), 9);
        for col in 1..=3 {
            let count = w3.sites().iter().filter(|p| p.i == col).count() as i64;
            assert_eq!(count, 2 * col - 1);
        }
        assert_eq!(WedgeTruncation::new(20).unwrap().len(), 400);
    }

    #[test]
    fn sites_are_lexicographic_and_indexable() {
        let w = WedgeTruncation::new(6).unwrap();
        assert!(w.sites().windows(2).all(|p| p[0] < p[1]));
        for (k, &p) in w.sites().iter().enumerate() {
            assert_eq!(w.index_of(p), Some(k));
        }
        assert_eq!(w.index_of(s(7, 1)), None);
        assert_eq!(w.index_of(s(1, 0)), None);
    }

    #[test]
    fn corner_site_records_match_worked_equation() {
        let w = WedgeTruncation::new(5).unwrap();
        let at = |d| w.resolve_neighbor(s(1, 1), d).unwrap();
        assert_eq!(at(Direction::Right), NeighborRecord::Interior { target: s(2, 1), index: 2 });
        assert_eq!(
            at(Direction::Down),
            NeighborRecord::Rotated { target: s(1, 1), index: 0, quarter_turns: 1 }
        );
        assert_eq!(
            at(Direction::Left),
            NeighborRecord::Rotated { target: s(1, 1), index: 0, quarter_turns: 3 }
        );
        assert_eq!(
            at(Direction::Up),
            NeighborRecord::Rotated { target: s(2, 0), index: 1, quarter_turns: 3 }
        );
        assert_eq!(
            w.resolve_neighbor(s(2, 1), Direction::Left).unwrap(),
            NeighborRecord::Interior { target: s(1, 1), index: 0 }
        );
        assert_eq!(w.resolve_neighbor(s(5, 1), Direction::Right).unwrap(), NeighborRecord::Truncated);
    }

    #[test]
    fn single_site_wedge_truncates_up_and_right() {
        let w = WedgeTruncation::new(1).unwrap();
        let recs = w.neighbors(0);
        assert_eq!(recs[Direction::Right as usize], NeighborRecord::Truncated);
        assert_eq!(recs[Direction::Up as usize], NeighborRecord::Truncated);
        assert_eq!(recs[Direction::Down as usize].quarter_turns(), 1);
        assert_eq!(recs[Direction::Left as usize].quarter_turns(), 3);
    }

    #[test]
    fn resolve_outside_is_error() {
        let w = WedgeTruncation::new(3).unwrap();
        assert!(matches!(
            w.resolve_neighbor(s(1, 0), Direction::Up),
            Err(Error::OutsideWedge(_))
        ));
        assert!(w.resolve_neighbor(s(4, 1), Direction::Up).is_err());
    }

    #[test]
    fn rotated_targets_recover_raw_neighbor() {
        let w = WedgeTruncation::new(8).unwrap();
        for (k, &site) in w.sites().iter().enumerate() {
            for (d, rec) in Direction::ALL.iter().zip(w.neighbors(k)) {
                if let NeighborRecord::Rotated { target, quarter_turns, .. } = *rec {
                    assert_eq!(target.rotate_by(i64::from(quarter_turns)), site.step(*d));
                }
            }
        }
    }

    #[test]
    fn square_is_tiled_once() {
        let n = 5i64;
        let w = WedgeTruncation::new(n as usize).unwrap();
        let mut hits = std::collections::BTreeMap::new();
        for &p in w.sites() {
            for k in 0..4 {
                *hits.entry(p.rotate_by(k)).or_insert(0) += 1;
            }
        }
        assert_eq!(hits.len() as i64, (2 * n) * (2 * n));
        assert!(hits.values().all(|&c| c == 1));
        assert!(hits.keys().all(|q| (1 - n..=n).contains(&q.i) && (1 - n..=n).contains(&q.j)));
    }

    #[test]
    fn description_round_trips_through_json() {
        let w = WedgeTruncation::new(3).unwrap();
        let text = serde_json::to_string(&w.describe()).unwrap();
        let back: WedgeDescription = serde_json::from_str(&text).unwrap();
        assert_eq!(back.n, 3);
        assert_eq!(back.sites.len(), 9);
        assert_eq!(back.neighbors["1,1"][3].kind, "rotated");
        assert!(text.contains("\"N\":3"));
    }

    proptest! {
        #[test]
        fn rotation_has_order_four(i in -1000i64..1000, j in -1000i64..1000) {
            let p = s(i, j);
            prop_assert_eq!(p.rotate().rotate().rotate().rotate(), p);
            prop_assert_ne!(p.rotate(), p);
        }

        #[test]
        fn partition_is_unique(i in -200i64..200, j in -200i64..200) {
            let p = s(i, j);
            let classes = class_by_enumeration(p);
            prop_assert_eq!(classes.len(), 1);
            prop_assert_eq!(classes[0], partition_class(p));
        }
    }
}
