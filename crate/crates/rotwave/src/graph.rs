//! Flat adjacency lists shared by the wedge and full-square solvers.

use crate::lattice::WedgeTruncation;

/// Per-site links `(target, phase offset)` in compressed row form.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkGraph {
    start: Vec<usize>,
    target: Vec<usize>,
    offset: Vec<f64>,
}

impl LinkGraph {
    pub fn from_lists(lists: &[Vec<(usize, f64)>]) -> Self {
        let mut start = Vec::with_capacity(lists.len() + 1);
        let mut target = Vec::new();
        let mut offset = Vec::new();
        start.push(0);
        for list in lists {
            for &(t, o) in list {
                target.push(t);
                offset.push(o);
            }
            start.push(target.len());
        }
        Self { start, target, offset }
    }

    /// Resolved records of the wedge; truncated neighbours are dropped.
    pub fn wedge(w: &WedgeTruncation) -> Self {
        let lists: Vec<Vec<(usize, f64)>> =
            (0..w.len()).map(|s| w.neighbors(s).iter().filter_map(|rec| rec.link()).collect()).collect();
        Self::from_lists(&lists)
    }

    pub fn len(&self) -> usize {
        self.start.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn degree(&self, s: usize) -> usize {
        self.start[s + 1] - self.start[s]
    }

    pub fn links(&self, s: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.start[s]..self.start[s + 1];
        self.target[range.clone()].iter().copied().zip(self.offset[range].iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wedge_graph_matches_records() {
        let w = WedgeTruncation::new(4).unwrap();
        let g = LinkGraph::wedge(&w);
        assert_eq!(g.len(), 16);
        for s in 0..w.len() {
            let expected: Vec<_> = w.neighbors(s).iter().filter_map(|r| r.link()).collect();
            assert_eq!(g.links(s).collect::<Vec<_>>(), expected);
        }
        // (1,1) keeps all four records; the corner column-N sites lose Right.
        assert_eq!(g.degree(0), 4);
        assert_eq!(g.degree(w.index_of(crate::lattice::SiteIndex::new(4, 1)).unwrap()), 3);
    }
}
