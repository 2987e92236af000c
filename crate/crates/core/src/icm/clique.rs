//! Maximum clique on a symmetric boolean matrix.
//!
//! Bron–Kerbosch with Tomita pivoting over bitsets. All maximum cliques are
//! visited so the lexicographically smallest index set wins ties.

use serde::{Deserialize, Serialize};

/// Graphs up to this size are always solved exactly.
pub const EXACT_LIMIT: usize = 64;
/// Recursion budget for exact search on larger graphs before falling back
/// to a greedy clique.
pub const CALL_BUDGET: usize = 2_000_000;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
struct BitSet {
    words: Vec<u64>,
}

impl BitSet {
    fn new(n: usize) -> Self {
        Self { words: vec![0; n.div_ceil(64)] }
    }

    fn full(n: usize) -> Self {
        let mut s = Self::new(n);
        for i in 0..n {
            s.insert(i);
        }
        s
    }

    fn insert(&mut self, i: usize) {
        if i / 64 >= self.words.len() {
            self.words.resize(i / 64 + 1, 0);
        }
        self.words[i / 64] |= 1 << (i % 64);
    }

    fn remove(&mut self, i: usize) {
        if let Some(w) = self.words.get_mut(i / 64) {
            *w &= !(1 << (i % 64));
        }
    }

    fn contains(&self, i: usize) -> bool {
        self.words.get(i / 64).is_some_and(|w| w & (1 << (i % 64)) != 0)
    }

    fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    fn and(&self, other: &BitSet) -> BitSet {
        BitSet { words: self.words.iter().zip(other.words.iter().chain(std::iter::repeat(&0))).map(|(a, b)| a & b).collect() }
    }

    fn and_not(&self, other: &BitSet) -> BitSet {
        BitSet { words: self.words.iter().zip(other.words.iter().chain(std::iter::repeat(&0))).map(|(a, b)| a & !b).collect() }
    }

    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    None
                } else {
                    let b = w.trailing_zeros() as usize;
                    w &= w - 1;
                    Some(wi * 64 + b)
                }
            })
        })
    }
}

/// Symmetric boolean adjacency with a true diagonal. Grows one row and
/// column at a time.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyMatrix {
    rows: Vec<BitSet>,
}

impl ConsistencyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new();
        for i in 0..n {
            let row: Vec<bool> = (0..i).map(|j| f(i, j)).collect();
            m.push(&row);
        }
        m
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends a row and column; `consistent[j]` relates the new entry to row `j`.
    pub fn push(&mut self, consistent: &[bool]) {
        assert_eq!(consistent.len(), self.rows.len(), "row length must match matrix size");
        let n = self.rows.len();
        let mut row = BitSet::new(n + 1);
        for (j, &c) in consistent.iter().enumerate() {
            if c {
                row.insert(j);
                self.rows[j].insert(n);
            }
        }
        row.insert(n);
        self.rows.push(row);
    }

    pub fn get(&self, a: usize, b: usize) -> bool {
        self.rows[a].contains(b)
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        let n = self.len();
        (0..n).map(|i| (0..n).map(|j| self.get(i, j)).collect()).collect()
    }

    fn neighbors(&self, v: usize) -> BitSet {
        let mut s = self.rows[v].clone();
        s.remove(v);
        s
    }
}

struct Search<'a> {
    m: &'a ConsistencyMatrix,
    best: Vec<usize>,
    calls: usize,
    budget: Option<usize>,
    exhausted: bool,
}

fn better(candidate: &[usize], best: &[usize]) -> bool {
    candidate.len() > best.len() || (candidate.len() == best.len() && candidate < best)
}

impl Search<'_> {
    fn expand(&mut self, r: &mut Vec<usize>, p: BitSet, x: BitSet) {
        if self.exhausted {
            return;
        }
        self.calls += 1;
        if self.budget.is_some_and(|b| self.calls > b) {
            self.exhausted = true;
            return;
        }
        if p.is_empty() {
            if x.is_empty() {
                let mut c = r.clone();
                c.sort_unstable();
                if better(&c, &self.best) {
                    self.best = c;
                }
            }
            return;
        }
        // Strict bound: equal-size cliques are still needed for the tie-break.
        if r.len() + p.len() < self.best.len() {
            return;
        }
        let pivot = p
            .iter()
            .chain(x.iter())
            .max_by_key(|&u| (p.and(&self.m.neighbors(u)).len(), std::cmp::Reverse(u)))
            .expect("p is non-empty");
        let candidates: Vec<usize> = p.and_not(&self.m.neighbors(pivot)).iter().collect();
        let (mut p, mut x) = (p, x);
        for v in candidates {
            let nv = self.m.neighbors(v);
            r.push(v);
            self.expand(r, p.and(&nv), x.and(&nv));
            r.pop();
            p.remove(v);
            x.insert(v);
        }
    }
}

fn greedy(m: &ConsistencyMatrix) -> Vec<usize> {
    let n = m.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| (std::cmp::Reverse(m.neighbors(v).len()), v));
    let mut clique: Vec<usize> = Vec::new();
    for v in order {
        if clique.iter().all(|&u| m.get(u, v)) {
            clique.push(v);
        }
    }
    clique.sort_unstable();
    clique
}

/// Maximum clique, ties broken by the lexicographically smallest sorted index
/// set. Exact up to [`EXACT_LIMIT`] vertices; beyond that exact within
/// [`CALL_BUDGET`] recursive calls, else the better of the partial result and
/// a greedy clique.
pub fn max_clique(m: &ConsistencyMatrix) -> Vec<usize> {
    let n = m.len();
    let budget = (n > EXACT_LIMIT).then_some(CALL_BUDGET);
    let mut s = Search { m, best: Vec::new(), calls: 0, budget, exhausted: false };
    s.expand(&mut Vec::new(), BitSet::full(n), BitSet::new(n));
    if s.exhausted {
        log::warn!("maximum clique search over {n} closures exceeded its budget; using greedy result");
        let g = greedy(m);
        if better(&g, &s.best) {
            return g;
        }
    }
    s.best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exhaustive(m: &ConsistencyMatrix) -> Vec<usize> {
        let n = m.len();
        let mut best: Vec<usize> = Vec::new();
        for mask in 0u32..(1 << n) {
            let set: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let clique = set.iter().all(|&a| set.iter().all(|&b| m.get(a, b)));
            if clique && better(&set, &best) {
                best = set;
            }
        }
        best
    }

    #[test]
    fn trivial_cases() {
        assert!(max_clique(&ConsistencyMatrix::new()).is_empty());
        let full = ConsistencyMatrix::from_fn(9, |_, _| true);
        assert_eq!(max_clique(&full), (0..9).collect::<Vec<_>>());
        let none = ConsistencyMatrix::from_fn(5, |_, _| false);
        assert_eq!(max_clique(&none), vec![0]);
    }

    #[test]
    fn matrix_is_symmetric_with_true_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = ConsistencyMatrix::from_fn(20, |_, _| rng.random_bool(0.4));
        for i in 0..20 {
            assert!(m.get(i, i));
            for j in 0..20 {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.random_range(0..=15);
            let p = rng.random_range(0.1..0.9);
            let m = ConsistencyMatrix::from_fn(n, |_, _| rng.random_bool(p));
            assert_eq!(max_clique(&m), exhaustive(&m));
        }
    }

    #[test]
    fn large_sparse_graph_is_still_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // A planted clique of 12 inside 120 vertices with sparse noise.
        let planted: Vec<usize> = (0..12).map(|i| i * 9 + 3).collect();
        let m = ConsistencyMatrix::from_fn(120, |i, j| (planted.contains(&i) && planted.contains(&j)) || rng.random_bool(0.05));
        assert_eq!(max_clique(&m), planted);
    }
}
