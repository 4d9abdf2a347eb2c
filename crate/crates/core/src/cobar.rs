//! Cobar words of simplices, their differential, and the chain-map check for `ψ_*`.
//!
//! A letter is a base simplex restricted to a sublist of its vertices. Vertices carry
//! global labels, so faces, fronts and backs are label sublists and composability is
//! label equality. `|σ| = dim σ − 1`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::graded::GradedEndo;
use crate::quad::QuadSpec;
use crate::simplex::{PsiTable, Simplex};
use crate::superconn::Superconnection;

/// A formal simplex `σ_base[v_{l_0}, …, v_{l_p}]` given by global vertex labels.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Letter {
    pub base: u32,
    pub verts: Vec<u32>,
}

impl Letter {
    pub fn new(base: u32, verts: Vec<u32>) -> Result<Letter> {
        if verts.len() < 2 {
            return Err(Error::InvalidInput("cobar letters need dimension at least 1".into()));
        }
        Ok(Letter { base, verts })
    }

    pub fn dim(&self) -> usize {
        self.verts.len() - 1
    }

    /// `|σ| = dim σ − 1`.
    pub fn degree(&self) -> usize {
        self.dim() - 1
    }

    pub fn first(&self) -> u32 {
        self.verts[0]
    }

    pub fn last(&self) -> u32 {
        self.verts[self.verts.len() - 1]
    }

    pub fn face(&self, i: usize) -> Letter {
        let mut verts = self.verts.clone();
        verts.remove(i);
        Letter { base: self.base, verts }
    }

    pub fn front(&self, p: usize) -> Letter {
        Letter { base: self.base, verts: self.verts[..=p].to_vec() }
    }

    pub fn back(&self, q: usize) -> Letter {
        let k = self.dim();
        Letter { base: self.base, verts: self.verts[k - q..].to_vec() }
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vs: Vec<String> = self.verts.iter().map(|v| v.to_string()).collect();
        write!(f, "s{}[{}]", self.base, vs.join(","))
    }
}

/// A word `(σ_1|σ_2|⋯|σ_n)` of composable letters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct BarWord {
    letters: Vec<Letter>,
}

impl BarWord {
    pub fn new(letters: Vec<Letter>) -> Result<BarWord> {
        for pair in letters.windows(2) {
            if pair[0].last() != pair[1].first() {
                return Err(Error::IncompatibleEndpoints(format!(
                    "{} ends at vertex {} but {} starts at {}",
                    pair[0],
                    pair[0].last(),
                    pair[1],
                    pair[1].first()
                )));
            }
        }
        if let Some(l) = letters.iter().find(|l| l.verts.len() < 2) {
            return Err(Error::InvalidInput(format!("letter {l} has dimension 0")));
        }
        Ok(BarWord { letters })
    }

    pub fn single(letter: Letter) -> BarWord {
        BarWord { letters: vec![letter] }
    }

    pub fn letters(&self) -> &[Letter] {
        &self.letters
    }

    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }

    /// `Σ |σ_i|`.
    pub fn degree(&self) -> usize {
        self.letters.iter().map(Letter::degree).sum()
    }

    pub fn first(&self) -> Option<u32> {
        self.letters.first().map(Letter::first)
    }

    pub fn last(&self) -> Option<u32> {
        self.letters.last().map(Letter::last)
    }
}

impl fmt::Display for BarWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ls: Vec<String> = self.letters.iter().map(|l| l.to_string()).collect();
        write!(f, "({})", ls.join("|"))
    }
}

/// Finite integer combination of words.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FormalSum {
    terms: BTreeMap<BarWord, i64>,
}

impl FormalSum {
    pub fn zero() -> FormalSum {
        FormalSum::default()
    }

    pub fn word(w: BarWord) -> FormalSum {
        let mut s = FormalSum::zero();
        s.add_term(w, 1);
        s
    }

    pub fn add_term(&mut self, w: BarWord, c: i64) {
        use std::collections::btree_map::Entry;
        if c == 0 {
            return;
        }
        match self.terms.entry(w) {
            Entry::Vacant(e) => {
                e.insert(c);
            }
            Entry::Occupied(mut e) => {
                *e.get_mut() += c;
                if *e.get() == 0 {
                    e.remove();
                }
            }
        }
    }

    pub fn add(&mut self, other: &FormalSum, scale: i64) {
        for (w, c) in &other.terms {
            self.add_term(w.clone(), c * scale);
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&BarWord, i64)> {
        self.terms.iter().map(|(w, c)| (w, *c))
    }

    pub fn coefficient(&self, w: &BarWord) -> i64 {
        self.terms.get(w).copied().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

impl fmt::Display for FormalSum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (n, (w, c)) in self.terms.iter().enumerate() {
            let sign = if *c < 0 { "-" } else if n > 0 { "+" } else { "" };
            let mag = c.unsigned_abs();
            if n > 0 {
                write!(f, " ")?;
            }
            if mag == 1 {
                write!(f, "{sign}{w}")?;
            } else {
                write!(f, "{sign}{mag}{w}")?;
            }
        }
        Ok(())
    }
}

/// `dσ = Σ_{i=1}^{k−1} (−1)^i ∂_iσ − Σ_{i=1}^{k−1} (−1)^i (f_iσ | b_{k−i}σ)`.
pub fn letter_d(l: &Letter) -> FormalSum {
    let k = l.dim();
    let mut out = FormalSum::zero();
    for i in 1..k {
        let s = if i % 2 == 0 { 1 } else { -1 };
        out.add_term(BarWord::single(l.face(i)), s);
        out.add_term(BarWord { letters: vec![l.front(i), l.back(k - i)] }, -s);
    }
    out
}

/// The cobar differential, extended as a derivation with Koszul signs `(−1)^{|σ_1|+⋯+|σ_{j−1}|}`.
pub fn bar_d(word: &BarWord) -> FormalSum {
    let mut out = FormalSum::zero();
    let mut prefix_deg = 0;
    for (j, l) in word.letters.iter().enumerate() {
        let sign = if prefix_deg % 2 == 0 { 1 } else { -1 };
        for (piece, c) in letter_d(l).terms() {
            let mut letters = word.letters[..j].to_vec();
            letters.extend(piece.letters.iter().cloned());
            letters.extend(word.letters[j + 1..].iter().cloned());
            out.add_term(BarWord { letters }, sign * c);
        }
        prefix_deg += l.degree();
    }
    out
}

pub fn bar_d_sum(s: &FormalSum) -> FormalSum {
    let mut out = FormalSum::zero();
    for (w, c) in s.terms() {
        out.add(&bar_d(w), c);
    }
    out
}

pub fn check_d_squared(word: &BarWord) -> bool {
    bar_d_sum(&bar_d(word)).is_zero()
}

/// Concatenation `(a|b)`; the last vertex of `a` must be the first of `b`.
pub fn compose_words(a: &BarWord, b: &BarWord) -> Result<BarWord> {
    if let (Some(x), Some(y)) = (a.last(), b.first()) {
        if x != y {
            return Err(Error::IncompatibleEndpoints(format!("{a} ends at {x} but {b} starts at {y}")));
        }
    }
    let mut letters = a.letters.clone();
    letters.extend(b.letters.iter().cloned());
    Ok(BarWord { letters })
}

/// Seeded random composable word with total degree at most `max_degree` and at most
/// four letters. Vertex labels increase along the word with random gaps.
pub fn random_word<R: rand::Rng>(rng: &mut R, max_degree: usize) -> BarWord {
    let n = rng.gen_range(1..=4usize);
    let mut budget = max_degree;
    let mut next = rng.gen_range(0..3u32);
    let mut letters = Vec::with_capacity(n);
    for _ in 0..n {
        let deg = rng.gen_range(0..=budget.min(3));
        budget -= deg;
        let mut verts = vec![next];
        for _ in 0..=deg {
            next += rng.gen_range(1..=2);
            verts.push(next);
        }
        letters.push(Letter { base: rng.gen_range(0..4), verts });
    }
    BarWord { letters }
}

/// Concrete simplices for the bases referenced by letters, with vertex labels.
#[derive(Debug, Clone, Default)]
pub struct SimplexTable {
    entries: HashMap<u32, (Simplex, Vec<u32>)>,
}

impl SimplexTable {
    pub fn new() -> SimplexTable {
        SimplexTable::default()
    }

    /// Registers base `id` with its vertex labels (one per vertex, in order).
    pub fn insert(&mut self, id: u32, simplex: Simplex, labels: Vec<u32>) -> Result<()> {
        if labels.len() != simplex.dim() + 1 {
            return Err(Error::DimensionMismatch(format!(
                "a {}-simplex needs {} vertex labels",
                simplex.dim(),
                simplex.dim() + 1
            )));
        }
        self.entries.insert(id, (simplex, labels));
        Ok(())
    }

    pub fn realize(&self, l: &Letter) -> Result<Simplex> {
        let (s, labels) = self
            .entries
            .get(&l.base)
            .ok_or_else(|| Error::InvalidInput(format!("no simplex registered for base {}", l.base)))?;
        let js = l
            .verts
            .iter()
            .map(|v| {
                labels
                    .iter()
                    .position(|x| x == v)
                    .ok_or_else(|| Error::InvalidInput(format!("vertex {v} is not a vertex of base {}", l.base)))
            })
            .collect::<Result<Vec<_>>>()?;
        s.restrict_vertices(&js)
    }

    /// Chart point of a vertex label.
    pub fn vertex_point(&self, label: u32) -> Result<Vec<f64>> {
        for (s, labels) in self.entries.values() {
            if let Some(i) = labels.iter().position(|x| *x == label) {
                return s.vertex_point(i);
            }
        }
        Err(Error::InvalidInput(format!("unknown vertex label {label}")))
    }
}

/// `ψ_*(σ_1|⋯|σ_n) = ψ(σ_1)⋯ψ(σ_n)`.
pub fn psi_word(word: &BarWord, table: &SimplexTable, psi: &mut PsiTable<'_>) -> Result<GradedEndo> {
    let mut acc: Option<GradedEndo> = None;
    for l in &word.letters {
        let v = psi.psi(&table.realize(l)?)?;
        acc = Some(match acc {
            None => v,
            Some(a) => a.compose(&v)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidInput("ψ_* of the empty word needs an endpoint".into()))
}

/// `‖ψ_*(d w) − (∂ψ_*(w) − (−1)^{|w|} ψ_*(w)∂)‖` with `∂ = A_0` at the word's endpoints.
pub fn dg_functor_residual(word: &BarWord, table: &SimplexTable, d: &Superconnection, quad: &QuadSpec) -> Result<f64> {
    let (first, last) = match (word.first(), word.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::InvalidInput("the chain-map check needs a nonempty word".into())),
    };
    let mut psi = PsiTable::new(d, quad);
    let pw = psi_word(word, table, &mut psi)?;
    let a_first = d.a0_at(&table.vertex_point(first)?)?;
    let a_last = d.a0_at(&table.vertex_point(last)?)?;
    let sign = if word.degree() % 2 == 0 { 1.0 } else { -1.0 };
    let rhs = a_first.compose(&pw)?.sub(&pw.compose(&a_last)?.scale(sign))?;
    let mut lhs = GradedEndo::zero(d.dims(), rhs.degree());
    for (w, c) in bar_d(word).terms() {
        lhs.axpy(c as f64, &psi_word(w, table, &mut psi)?);
    }
    Ok(lhs.sub(&rhs)?.op_norm())
}
