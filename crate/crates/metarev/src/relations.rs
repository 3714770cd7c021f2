//! Document-level relation matrices extracted from a conversation forest.
//!
//! Seven relation kinds connect documents: direct parent, all ancestors,
//! direct children, all descendants, siblings, the document itself and
//! same-thread membership. Entry `[i][j] = 1` grants attention from the
//! tokens of document `i` to the tokens of document `j`.
//!
//! Direction convention: `ancestor1[i][parent(i)] = 1`, a document attends
//! to its parent (ancestors provide context for the documents below them);
//! the descendant matrices are the transposes. Thread roots are treated as
//! mutual siblings, as if they were children of an implicit root.

use std::fmt;
use std::str::FromStr;

use crate::conversation::{thread_root_indices, Sample};

/// The seven relation kinds, with stable codes 1..=7.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RelationKind {
    Ancestor1,
    AncestorAll,
    Descendant1,
    DescendantAll,
    Siblings,
    DocumentSelf,
    SameThread,
}

impl RelationKind {
    pub const COUNT: usize = 7;

    pub const ALL: [RelationKind; 7] = [
        RelationKind::Ancestor1,
        RelationKind::AncestorAll,
        RelationKind::Descendant1,
        RelationKind::DescendantAll,
        RelationKind::Siblings,
        RelationKind::DocumentSelf,
        RelationKind::SameThread,
    ];

    /// Position in [`RelationKind::ALL`], 0..=6.
    pub fn index(self) -> usize {
        RelationKind::ALL.iter().position(|k| *k == self).unwrap()
    }

    /// Stable code 1..=7.
    pub fn code(self) -> u8 {
        self.index() as u8 + 1
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            RelationKind::Ancestor1 => "ancestor1",
            RelationKind::AncestorAll => "ancestor_all",
            RelationKind::Descendant1 => "descendant1",
            RelationKind::DescendantAll => "descendant_all",
            RelationKind::Siblings => "siblings",
            RelationKind::DocumentSelf => "document_self",
            RelationKind::SameThread => "same_thread",
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RelationKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown relation kind: {s}"))
    }
}

/// Boolean document adjacency for one relation kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationMatrix {
    pub kind: RelationKind,
    pub n: usize,
    bits: Vec<bool>,
}

impl RelationMatrix {
    pub fn zeros(kind: RelationKind, n: usize) -> Self {
        RelationMatrix {
            kind,
            n,
            bits: vec![false; n * n],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.bits[i * self.n + j] = value;
    }

    /// Positions of the set entries, in row-major order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if self.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_transpose_of(&self, other: &RelationMatrix) -> bool {
        self.n == other.n
            && (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == other.get(j, i)))
    }

    /// Render as a 0/1 grid, one row per line.
    pub fn to_grid_string(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            for j in 0..self.n {
                out.push(if self.get(i, j) { '1' } else { '0' });
                if j + 1 < self.n {
                    out.push(' ');
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Build the relation matrix of `kind` for a validated sample.
pub fn build_relation(sample: &Sample, kind: RelationKind) -> RelationMatrix {
    let n = sample.n_docs();
    let parents = sample.parent_indices();
    let mut m = RelationMatrix::zeros(kind, n);
    match kind {
        RelationKind::Ancestor1 => {
            for (i, parent) in parents.iter().enumerate() {
                if let Some(p) = parent {
                    m.set(i, *p, true);
                }
            }
        }
        RelationKind::AncestorAll => {
            for i in 0..n {
                let mut cur = i;
                while let Some(p) = parents[cur] {
                    m.set(i, p, true);
                    cur = p;
                }
            }
        }
        RelationKind::Descendant1 => {
            for (i, parent) in parents.iter().enumerate() {
                if let Some(p) = parent {
                    m.set(*p, i, true);
                }
            }
        }
        RelationKind::DescendantAll => {
            for i in 0..n {
                let mut cur = i;
                while let Some(p) = parents[cur] {
                    m.set(p, i, true);
                    cur = p;
                }
            }
        }
        RelationKind::Siblings => {
            // Roots share the implicit parent, so they are mutual siblings.
            for i in 0..n {
                for j in 0..n {
                    if i != j && parents[i] == parents[j] {
                        m.set(i, j, true);
                    }
                }
            }
        }
        RelationKind::DocumentSelf => {
            for i in 0..n {
                m.set(i, i, true);
            }
        }
        RelationKind::SameThread => {
            let roots = thread_root_indices(sample);
            for i in 0..n {
                for j in 0..n {
                    if roots[i] == roots[j] {
                        m.set(i, j, true);
                    }
                }
            }
        }
    }
    m
}

/// All seven relation matrices, in [`RelationKind::ALL`] order.
pub fn build_all_relations(sample: &Sample) -> Vec<RelationMatrix> {
    RelationKind::ALL
        .iter()
        .map(|&kind| build_relation(sample, kind))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conversation::{Acceptance, DocType, Document, Sample};
    use crate::synth::fixture_forest;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn pairs_of(sample: &Sample, kind: RelationKind) -> HashSet<(usize, usize)> {
        build_relation(sample, kind).pairs().into_iter().collect()
    }

    #[test]
    fn fixture_ancestor1_is_direct_parent_edges() {
        let s = fixture_forest();
        let expected: HashSet<_> = [(2, 1), (3, 2)].into_iter().collect();
        assert_eq!(pairs_of(&s, RelationKind::Ancestor1), expected);
    }

    #[test]
    fn fixture_ancestor_all_is_transitive_closure() {
        let s = fixture_forest();
        let expected: HashSet<_> = [(2, 1), (3, 2), (3, 1)].into_iter().collect();
        assert_eq!(pairs_of(&s, RelationKind::AncestorAll), expected);
    }

    #[test]
    fn fixture_same_thread_blocks() {
        let s = fixture_forest();
        let m = build_relation(&s, RelationKind::SameThread);
        for i in 0..5 {
            for j in 0..5 {
                let thread = [1, 2, 3].contains(&i) && [1, 2, 3].contains(&j);
                assert_eq!(m.get(i, j), thread || i == j, "({i},{j})");
            }
        }
    }

    #[test]
    fn fixture_siblings_are_roots() {
        let s = fixture_forest();
        let roots = [0usize, 1, 4];
        let mut expected = HashSet::new();
        for &i in &roots {
            for &j in &roots {
                if i != j {
                    expected.insert((i, j));
                }
            }
        }
        assert_eq!(pairs_of(&s, RelationKind::Siblings), expected);
    }

    #[test]
    fn single_document_relations() {
        let s = Sample {
            paper_id: "p".into(),
            venue: "v".into(),
            acceptance: Acceptance::Accept,
            meta_review: "m".into(),
            documents: vec![Document {
                doc_id: "a".into(),
                parent_id: None,
                doc_type: DocType::PaperAbstract,
                text: "t".into(),
                rating: None,
                confidence: None,
            }],
        };
        let all = build_all_relations(&s);
        for m in &all {
            match m.kind {
                // A lone root has no parent, children or siblings.
                RelationKind::DocumentSelf | RelationKind::SameThread => {
                    assert!(m.get(0, 0), "{}", m.kind)
                }
                _ => assert!(!m.get(0, 0), "{}", m.kind),
            }
        }
    }

    #[test]
    fn two_unrelated_roots() {
        let s = Sample {
            paper_id: "p".into(),
            venue: "v".into(),
            acceptance: Acceptance::Reject,
            meta_review: "m".into(),
            documents: vec![
                Document {
                    doc_id: "r1".into(),
                    parent_id: None,
                    doc_type: DocType::OfficialReview,
                    text: "t".into(),
                    rating: Some(5),
                    confidence: Some(3),
                },
                Document {
                    doc_id: "r2".into(),
                    parent_id: None,
                    doc_type: DocType::OfficialReview,
                    text: "t".into(),
                    rating: Some(6),
                    confidence: Some(2),
                },
            ],
        };
        for kind in [
            RelationKind::Ancestor1,
            RelationKind::AncestorAll,
            RelationKind::Descendant1,
            RelationKind::DescendantAll,
        ] {
            assert_eq!(build_relation(&s, kind).count_ones(), 0, "{kind}");
        }
        let sib = build_relation(&s, RelationKind::Siblings);
        assert!(sib.get(0, 1) && sib.get(1, 0));
        assert!(!sib.get(0, 0) && !sib.get(1, 1));
    }

    /// Floyd-Warshall-style closure oracle over the direct-parent edges.
    fn closure_oracle(direct: &RelationMatrix) -> Vec<Vec<bool>> {
        let n = direct.n;
        let mut reach: Vec<Vec<bool>> = (0..n)
            .map(|i| (0..n).map(|j| direct.get(i, j)).collect())
            .collect();
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if reach[i][k] && reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
        reach
    }

    #[test]
    fn random_forests_match_graph_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..150 {
            let s = crate::synth::random_forest(&mut rng, 15);
            check_sample_against_oracles(&s);
        }
    }

    /// Shared with the acceptance suite (larger instance count there).
    pub(crate) fn check_sample_against_oracles(s: &Sample) {
        let n = s.n_docs();
        let all = build_all_relations(s);
        let a1 = &all[RelationKind::Ancestor1.index()];
        let aa = &all[RelationKind::AncestorAll.index()];
        let d1 = &all[RelationKind::Descendant1.index()];
        let da = &all[RelationKind::DescendantAll.index()];
        let sib = &all[RelationKind::Siblings.index()];
        let own = &all[RelationKind::DocumentSelf.index()];
        let thread = &all[RelationKind::SameThread.index()];

        // Closure of direct parent edges equals ancestor-all.
        let reach = closure_oracle(a1);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(aa.get(i, j), reach[i][j]);
            }
        }

        // Descendant matrices are exactly the transposes.
        assert!(d1.is_transpose_of(a1));
        assert!(da.is_transpose_of(aa));
        assert!(a1.pairs().iter().all(|&(i, j)| aa.get(i, j)));
        assert!(d1.pairs().iter().all(|&(i, j)| da.get(i, j)));

        // Same-thread grouping oracle.
        let roots = thread_root_indices(s);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(thread.get(i, j), roots[i] == roots[j]);
            }
        }
        // Siblings: shared-parent enumeration, roots mutual siblings.
        let parents = s.parent_indices();
        for i in 0..n {
            assert!(!sib.get(i, i));
            assert!(own.get(i, i));
            for j in 0..n {
                assert_eq!(sib.get(i, j), i != j && parents[i] == parents[j]);
                assert_eq!(own.get(i, j), i == j);
                assert_eq!(sib.get(i, j), sib.get(j, i));
                assert_eq!(thread.get(i, j), thread.get(j, i));
            }
        }

        // The union of all seven always covers the diagonal.
        for i in 0..n {
            assert!(all.iter().any(|m| m.get(i, i)));
        }
    }

    #[test]
    fn kind_codes_and_names_round_trip() {
        for (i, kind) in RelationKind::ALL.iter().enumerate() {
            assert_eq!(kind.code() as usize, i + 1);
            assert_eq!(kind.as_str().parse::<RelationKind>().unwrap(), *kind);
        }
        assert!("parent".parse::<RelationKind>().is_err());
    }

    #[test]
    fn grid_output_shape() {
        let s = fixture_forest();
        let grid = build_relation(&s, RelationKind::DocumentSelf).to_grid_string();
        let lines: Vec<&str> = grid.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "1 0 0 0 0");
    }
}
