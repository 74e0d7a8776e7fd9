//! Local polynomials and the localisation operators.
//!
//! A monomial index lists derivative words (multisets of forward axes) and
//! component labels. Symmetrised monomials S^(m) replace a repeated forward
//! difference by the mixed second difference and average over axis flips with
//! alternating signs, so that summation by parts works underneath the RG map.
//! Localisation matches pairings against lattice polynomials (products of
//! coordinate powers) and is computed through the dual basis of the pairing
//! Gram matrix.
//!
//! Pairings use an explicit coordinate map site -> Z^d and never wrap offsets
//! through the torus, so they coincide with the coordinate-patch definition
//! whenever a genuine patch exists and degrade gracefully at desk scale where
//! the small-set neighbourhood may be the whole torus.

use crate::error::{Result, RgError};
use crate::fieldalg::{Alphabet, Caps, DerivWord, Factor, Poly, Sector, Term};
use crate::geometry::TorusLattice;
use nalgebra::DMatrix;
use std::collections::BTreeMap;

/// Engineering dimensions for both norm regimes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngDims {
    pub phi: f64,
    pub phi_prime: f64,
    pub d_bulk: f64,
    pub d_obs: f64,
    pub d_bulk_prime: f64,
    pub d_obs_prime: f64,
}

pub fn engineering_dims(d: usize, eta: f64) -> EngDims {
    let df = d as f64;
    let phi = (df - 2.0 + eta) / 2.0;
    let phi_prime = df / 4.0;
    EngDims {
        phi,
        phi_prime,
        d_bulk: 3.0 * df - 7.0 + 2.0 * eta,
        d_obs: df - 2.0 + eta,
        d_bulk_prime: (2.0 * df - 3.0).min(6.0 * phi_prime),
        d_obs_prime: df / 2.0,
    }
}

impl EngDims {
    pub fn d_plus(&self, sector: Sector, prime: bool) -> f64 {
        match (sector, prime) {
            (Sector::Bulk, false) => self.d_bulk,
            (Sector::Bulk, true) => self.d_bulk_prime,
            (_, false) => self.d_obs,
            (_, true) => self.d_obs_prime,
        }
    }

    pub fn field_dim(&self, prime: bool) -> f64 {
        if prime {
            self.phi_prime
        } else {
            self.phi
        }
    }
}

/// Derivative index: per factor a sorted multiset of forward axes and a
/// component label; the factor list itself is sorted for canonical equality.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MonomialIndex {
    pub factors: Vec<(Vec<u8>, u8)>,
}

impl MonomialIndex {
    pub fn new(mut factors: Vec<(Vec<u8>, u8)>) -> Self {
        for (w, _) in &mut factors {
            w.sort_unstable();
        }
        factors.sort();
        MonomialIndex { factors }
    }

    pub fn unit() -> Self {
        MonomialIndex { factors: Vec::new() }
    }

    pub fn p(&self) -> usize {
        self.factors.len()
    }

    pub fn q(&self) -> usize {
        self.factors.iter().map(|(w, _)| w.len()).sum()
    }

    pub fn dimension(&self, phi_dim: f64) -> f64 {
        self.q() as f64 + phi_dim * self.p() as f64
    }
}

/// All canonical forward indices of dimension < d_plus over components 0..n.
pub fn enumerate_indices(d: usize, n: usize, phi_dim: f64, d_plus: f64) -> Vec<MonomialIndex> {
    let mut out = Vec::new();
    let mut factors: Vec<(Vec<u8>, u8)> = Vec::new();
    fn words_of_len(d: usize, len: usize, start: u8, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if len == 0 {
            out.push(cur.clone());
            return;
        }
        for a in start..d as u8 {
            cur.push(a);
            words_of_len(d, len - 1, a, cur, out);
            cur.pop();
        }
    }
    fn rec(
        d: usize,
        n: usize,
        phi_dim: f64,
        d_plus: f64,
        q_used: usize,
        factors: &mut Vec<(Vec<u8>, u8)>,
        out: &mut Vec<MonomialIndex>,
    ) {
        let dim = q_used as f64 + phi_dim * factors.len() as f64;
        if dim >= d_plus {
            return;
        }
        out.push(MonomialIndex {
            factors: factors.clone(),
        });
        // extend with one more factor, keeping the list nondecreasing
        let q_room = (d_plus - phi_dim * (factors.len() + 1) as f64 - 1e-12).floor();
        if q_room < q_used as f64 {
            return;
        }
        let max_len = (q_room as usize).saturating_sub(q_used);
        for len in 0..=max_len {
            let mut words = Vec::new();
            words_of_len(d, len, 0, &mut Vec::new(), &mut words);
            for w in words {
                for comp in 0..n as u8 {
                    let cand = (w.clone(), comp);
                    if let Some(last) = factors.last() {
                        if cand < *last {
                            continue;
                        }
                    }
                    factors.push(cand);
                    rec(d, n, phi_dim, d_plus, q_used + len, factors, out);
                    factors.pop();
                }
            }
        }
    }
    rec(d, n, phi_dim, d_plus, 0, &mut factors, &mut out);
    out.sort_by(|a, b| {
        (a.p() + a.q(), a.p(), &a.factors).cmp(&(b.p() + b.q(), b.p(), &b.factors))
    });
    out.dedup();
    out
}

fn signed_word(word: &[u8]) -> Vec<i8> {
    word.iter().map(|&a| a as i8 + 1).collect()
}

/// l-replacement: a repeated forward difference becomes the mixed one.
fn l_replaced(word: &[u8]) -> Vec<i8> {
    if word.len() == 2 && word[0] == word[1] {
        vec![word[0] as i8 + 1, -(word[0] as i8 + 1)]
    } else {
        signed_word(word)
    }
}

/// Symmetrised field monomial S^(m)_x as a polynomial in phi.
pub fn sym_monomial(
    caps: Caps,
    d: usize,
    x: usize,
    idx: &MonomialIndex,
    sector: Sector,
    grade: u8,
) -> Poly {
    let words: Vec<(Vec<i8>, u8)> = idx
        .factors
        .iter()
        .map(|(w, c)| (l_replaced(w), *c))
        .collect();
    let mut out = Poly::zero(caps);
    let norm = 1.0 / (1u64 << d) as f64;
    for flips in 0..(1u32 << d) {
        let mut sign = 1.0;
        let mut factors = Vec::with_capacity(words.len());
        for (w, comp) in &words {
            let flipped: Vec<i8> = w
                .iter()
                .map(|&e| {
                    let axis = e.unsigned_abs() - 1;
                    if flips >> axis & 1 == 1 {
                        sign = -sign;
                        -e
                    } else {
                        e
                    }
                })
                .collect();
            factors.push(Factor::phi_deriv(x, *comp, DerivWord::from_dirs(flipped)));
        }
        out.add_term(
            Term {
                factors,
                sector,
                grade,
            },
            sign * norm,
        );
    }
    out
}

/// Plain (unsymmetrised) field monomial M^(m)_x.
pub fn plain_monomial(caps: Caps, x: usize, idx: &MonomialIndex) -> Poly {
    let mut p = Poly::zero(caps);
    let factors = idx
        .factors
        .iter()
        .map(|(w, c)| Factor::phi_deriv(x, *c, DerivWord::from_dirs(signed_word(w))))
        .collect();
    p.add_term(
        Term {
            factors,
            sector: Sector::Bulk,
            grade: 0,
        },
        1.0,
    );
    p
}

/// Coordinate map for pairings; offsets extend it over Z^d without wrapping.
pub type Coords<'a> = &'a dyn Fn(usize) -> Vec<i64>;

/// Deterministic anchored unwrapping: coordinates relative to an anchor site,
/// each axis unwrapped into [0, side). Agrees with a genuine coordinate patch
/// whenever one anchored there exists.
pub fn anchored_coords(torus: &TorusLattice, anchor: usize) -> impl Fn(usize) -> Vec<i64> {
    let base = torus.coords(anchor);
    let side = torus.side() as i64;
    let torus = torus.clone();
    move |site: usize| {
        torus
            .coords(site)
            .iter()
            .zip(&base)
            .map(|(&c, &a)| (c - a).rem_euclid(side))
            .collect()
    }
}

/// Pairing of one linear factor against one lattice-polynomial slot.
fn factor_slot_pair(
    torus: &TorusLattice,
    coords: Coords,
    factor: &Factor,
    slot: &(Vec<u8>, u8),
) -> f64 {
    if factor.comp != slot.1 {
        return 0.0;
    }
    let base = coords(factor.site);
    let mut v = 0.0;
    for (off, c) in factor.word.expansion(torus.d) {
        let mut prod = c;
        for &mu in &slot.0 {
            prod *= (base[mu as usize] + off[mu as usize]) as f64;
        }
        v += prod;
    }
    v
}

/// <F, pl^(m)>_0 per (sector, grade): for each degree-p(m) monomial, the
/// 1/r!-weighted sum over bijections of factors onto slots.
pub fn pair_poly(
    torus: &TorusLattice,
    coords: Coords,
    f: &Poly,
    idx: &MonomialIndex,
) -> Result<BTreeMap<(Sector, u8), f64>> {
    let r = idx.p();
    let mut out: BTreeMap<(Sector, u8), f64> = BTreeMap::new();
    for (t, coef) in f.terms() {
        if t.degree() != r {
            continue;
        }
        if t.factors.iter().any(|fac| fac.alph == Alphabet::Zeta) {
            return Err(RgError::Localisation {
                context: "pairing".into(),
                reason: "fluctuation alphabet present; integrate zeta first".into(),
            });
        }
        let pairs: Vec<Vec<f64>> = t
            .factors
            .iter()
            .map(|fac| {
                idx.factors
                    .iter()
                    .map(|slot| factor_slot_pair(torus, coords, fac, slot))
                    .collect()
            })
            .collect();
        let total = permanent(&pairs);
        if total != 0.0 {
            let weight = 1.0 / factorial(r as u32);
            *out.entry((t.sector, t.grade)).or_insert(0.0) += coef * total * weight;
        }
    }
    out.retain(|_, v| *v != 0.0);
    Ok(out)
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Sum over bijections of rows onto columns of products of entries.
fn permanent(m: &[Vec<f64>]) -> f64 {
    let r = m.len();
    if r == 0 {
        return 1.0;
    }
    fn rec(m: &[Vec<f64>], row: usize, used: u32) -> f64 {
        if row == m.len() {
            return 1.0;
        }
        let mut acc = 0.0;
        for col in 0..m.len() {
            if used >> col & 1 == 0 && m[row][col] != 0.0 {
                acc += m[row][col] * rec(m, row + 1, used | 1 << col);
            }
        }
        acc
    }
    rec(m, 0, 0)
}

/// An independent family of symmetrised monomials below a dimension cutoff.
#[derive(Debug, Clone)]
pub struct LocFamily {
    pub indices: Vec<MonomialIndex>,
    pub phi_dim: f64,
    pub d_plus: f64,
}

/// Pairing Gram matrix A_ab = <sum_{x in X} S^(m_a)_x, pl^(m_b)>.
pub fn family_gram(
    torus: &TorusLattice,
    coords: Coords,
    caps: Caps,
    family: &LocFamily,
    x_set: &[usize],
) -> Result<DMatrix<f64>> {
    let k = family.indices.len();
    let mut a = DMatrix::zeros(k, k);
    for (ai, idx_a) in family.indices.iter().enumerate() {
        let mut s = Poly::zero(caps);
        for &x in x_set {
            s = s.add(&sym_monomial(caps, torus.d, x, idx_a, Sector::Bulk, 0));
        }
        for (bi, idx_b) in family.indices.iter().enumerate() {
            let paired = pair_poly(torus, coords, &s, idx_b)?;
            a[(ai, bi)] = paired.get(&(Sector::Bulk, 0)).copied().unwrap_or(0.0);
        }
    }
    Ok(a)
}

/// Greedily select indices keeping the square pairing Gram nonsingular on a
/// reference set; deterministic given the canonical candidate order.
pub fn build_family(
    torus: &TorusLattice,
    coords: Coords,
    caps: Caps,
    n: usize,
    phi_dim: f64,
    d_plus: f64,
    ref_set: &[usize],
) -> Result<LocFamily> {
    let candidates = enumerate_indices(torus.d, n, phi_dim, d_plus);
    let mut family = LocFamily {
        indices: Vec::new(),
        phi_dim,
        d_plus,
    };
    for cand in candidates {
        family.indices.push(cand);
        let gram = family_gram(torus, coords, caps, &family, ref_set)?;
        if gram_deficiency(&gram) > 0 {
            family.indices.pop();
        }
    }
    Ok(family)
}

/// Rank deficiency of a pairing Gram by its singular value spectrum.
fn gram_deficiency(a: &DMatrix<f64>) -> usize {
    if a.nrows() == 0 {
        return 0;
    }
    let svd = a.clone().svd(false, false);
    let max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return a.nrows();
    }
    svd.singular_values
        .iter()
        .filter(|&&s| s <= 1e-9 * max)
        .count()
}

/// Dual-basis coefficients: column m gives g^(m) in the pl basis, so that
/// <S^(m')(X), g^(m)> = delta. This is the inverse of the pairing Gram.
pub fn dual_basis(
    torus: &TorusLattice,
    coords: Coords,
    caps: Caps,
    family: &LocFamily,
    x_set: &[usize],
) -> Result<DMatrix<f64>> {
    let a = family_gram(torus, coords, caps, family, x_set)?;
    let deficiency = gram_deficiency(&a);
    if deficiency > 0 {
        return Err(RgError::SingularGram {
            context: "dual basis".into(),
            deficiency,
        });
    }
    a.try_inverse().ok_or_else(|| RgError::SingularGram {
        context: "dual basis".into(),
        deficiency: 1,
    })
}

/// Localisation coefficients per (family index, sector, grade).
pub type LocCoefs = BTreeMap<(usize, Sector, u8), f64>;

/// hat-loc_X F: coefficients of the unique element of the span with matching
/// pairings, c = A^{-T} t.
pub fn loc_coefs(
    torus: &TorusLattice,
    coords: Coords,
    family: &LocFamily,
    f: &Poly,
    x_set: &[usize],
) -> Result<LocCoefs> {
    if x_set.is_empty() || family.indices.is_empty() {
        return Ok(BTreeMap::new());
    }
    let a = family_gram(torus, coords, f.caps, family, x_set)?;
    let k = a.nrows();
    // t_b per (sector, grade)
    let mut t_cols: BTreeMap<(Sector, u8), Vec<f64>> = BTreeMap::new();
    for (bi, idx_b) in family.indices.iter().enumerate() {
        for (key, v) in pair_poly(torus, coords, f, idx_b)? {
            t_cols.entry(key).or_insert_with(|| vec![0.0; k])[bi] = v;
        }
    }
    let at = a.transpose();
    let lu = at.lu();
    let mut out: LocCoefs = BTreeMap::new();
    for ((sector, grade), t) in t_cols {
        let rhs = nalgebra::DVector::from_vec(t);
        let c = lu.solve(&rhs).ok_or_else(|| RgError::SingularGram {
            context: "localisation solve".into(),
            deficiency: 1,
        })?;
        for (ai, &v) in c.iter().enumerate() {
            if v != 0.0 {
                out.insert((ai, sector, grade), v);
            }
        }
    }
    Ok(out)
}

/// Expand localisation coefficients back into a polynomial summed over sites.
pub fn expand_coefs(
    caps: Caps,
    d: usize,
    family: &LocFamily,
    coefs: &LocCoefs,
    sites: &[usize],
) -> Poly {
    let mut out = Poly::zero(caps);
    for (&(ai, sector, grade), &c) in coefs {
        for &x in sites {
            let s = sym_monomial(caps, d, x, &family.indices[ai], sector, grade);
            out = out.add(&s.scale(c));
        }
    }
    out
}

/// hat-loc_X F (X) expanded over the sites of X.
pub fn loc(
    torus: &TorusLattice,
    coords: Coords,
    family: &LocFamily,
    f: &Poly,
    x_set: &[usize],
) -> Result<Poly> {
    let coefs = loc_coefs(torus, coords, family, f, x_set)?;
    Ok(expand_coefs(f.caps, torus.d, family, &coefs, x_set))
}

/// The two observable points o and x on the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObsPoints {
    pub o: usize,
    pub x: usize,
}

/// Sector-resolved localisation Loc_X: the bulk part localises on X, the
/// observable parts on the intersections of X with {o}, {x}, {o,x}.
#[derive(Debug, Clone)]
pub struct Localiser {
    pub bulk: LocFamily,
    pub obs: LocFamily,
    pub obs_points: Option<ObsPoints>,
}

impl Localiser {
    /// Build families at the plain (non-prime) dimensions on a reference set.
    pub fn new(
        torus: &TorusLattice,
        coords: Coords,
        caps: Caps,
        n: usize,
        dims: &EngDims,
        ref_set: &[usize],
        obs_points: Option<ObsPoints>,
    ) -> Result<Self> {
        let bulk = build_family(torus, coords, caps, n, dims.phi, dims.d_bulk, ref_set)?;
        let obs = build_family(torus, coords, caps, n, dims.phi, dims.d_obs, ref_set)?;
        Ok(Localiser {
            bulk,
            obs,
            obs_points,
        })
    }

    fn sector_sites(&self, sector: Sector, x_set: &[usize]) -> Vec<usize> {
        match sector {
            Sector::Bulk => x_set.to_vec(),
            Sector::ObsO => match self.obs_points {
                Some(op) if x_set.contains(&op.o) => vec![op.o],
                _ => Vec::new(),
            },
            Sector::ObsX => match self.obs_points {
                Some(op) if x_set.contains(&op.x) => vec![op.x],
                _ => Vec::new(),
            },
            Sector::ObsOx => {
                let mut v = Vec::new();
                if let Some(op) = self.obs_points {
                    if x_set.contains(&op.o) {
                        v.push(op.o);
                    }
                    if op.x != op.o && x_set.contains(&op.x) {
                        v.push(op.x);
                    }
                }
                v
            }
        }
    }

    /// Loc_X F with per-sector localisation supports.
    pub fn loc_full(
        &self,
        torus: &TorusLattice,
        coords: Coords,
        f: &Poly,
        x_set: &[usize],
    ) -> Result<Poly> {
        let mut out = Poly::zero(f.caps);
        for sector in Sector::ALL {
            let part = f.pi(sector);
            if part.is_zero() {
                continue;
            }
            let sites = self.sector_sites(sector, x_set);
            if sites.is_empty() {
                continue;
            }
            let family = if sector == Sector::Bulk {
                &self.bulk
            } else {
                &self.obs
            };
            out = out.add(&loc(torus, coords, family, &part, &sites)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldalg::random_poly;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn caps() -> Caps {
        Caps::standard(3)
    }

    #[test]
    fn engineering_dim_examples() {
        let e4 = engineering_dims(4, 0.0);
        assert_relative_eq!(e4.phi, 1.0);
        assert_relative_eq!(e4.d_bulk, 5.0);
        assert_relative_eq!(e4.d_obs, 2.0);
        let e5 = engineering_dims(5, 0.0);
        assert_relative_eq!(e5.d_bulk, 8.0);
        assert_relative_eq!(e5.d_bulk_prime, 7.0);
        let e4q = engineering_dims(4, 0.25);
        assert_relative_eq!(e4q.phi, 9.0 / 8.0);
        assert_relative_eq!(e4q.d_bulk, 5.5);
    }

    #[test]
    fn index_enumeration_d3() {
        // d=3, eta=0: phi dim 1/2, bulk cutoff 2 -> {1, phi, grad phi (3 axes),
        // phi phi, phi phi phi} for n=1
        let idx = enumerate_indices(3, 1, 0.5, 2.0);
        assert_eq!(idx.len(), 7);
        let ps: Vec<usize> = idx.iter().map(|i| i.p()).collect();
        assert_eq!(ps, vec![0, 1, 1, 1, 1, 2, 3]);
        // observable cutoff 1: {1, phi}
        let obs = enumerate_indices(3, 1, 0.5, 1.0);
        assert_eq!(obs.len(), 2);
    }

    #[test]
    fn sym_monomial_flip_covariance() {
        // Theta S = lambda(Theta, m) S for a single-derivative index
        let caps = caps();
        let idx = MonomialIndex::new(vec![(vec![0], 0)]);
        let s = sym_monomial(caps, 2, 0, &idx, Sector::Bulk, 0);
        // flip axis 0: word entries on axis 0 change sign; lambda = -1
        let flipped = s.map_factors(|f| {
            let w: Vec<i8> = f.word.0.iter().map(|&e| if e.abs() == 1 { -e } else { e }).collect();
            (
                Factor::phi_deriv(f.site, f.comp, DerivWord::from_dirs(w)),
                1.0,
            )
        });
        assert!(flipped.max_coef_diff(&s.scale(-1.0)) < 1e-15);
        // l-replacement: repeated forward difference index is mixed and even
        let idx2 = MonomialIndex::new(vec![(vec![1, 1], 0)]);
        let s2 = sym_monomial(caps, 2, 0, &idx2, Sector::Bulk, 0);
        let flipped2 = s2.map_factors(|f| {
            let w: Vec<i8> = f.word.0.iter().map(|&e| if e.abs() == 2 { -e } else { e }).collect();
            (
                Factor::phi_deriv(f.site, f.comp, DerivWord::from_dirs(w)),
                1.0,
            )
        });
        assert!(flipped2.max_coef_diff(&s2) < 1e-15);
    }

    fn setup_d3() -> (TorusLattice, LocFamily, Vec<usize>) {
        let torus = TorusLattice::new(3, 2, 2).unwrap();
        let coords = anchored_coords(&torus, 0);
        let block: Vec<usize> = torus.block_sites(1, 0);
        let family = build_family(&torus, &coords, caps(), 1, 0.5, 2.0, &block).unwrap();
        (torus, family, block)
    }

    #[test]
    fn family_is_full_and_dual_biorthogonal() {
        let (torus, family, block) = setup_d3();
        assert_eq!(family.indices.len(), 7);
        let coords = anchored_coords(&torus, 0);
        let dual = dual_basis(&torus, &coords, caps(), &family, &block).unwrap();
        let gram = family_gram(&torus, &coords, caps(), &family, &block).unwrap();
        let prod = gram * dual;
        for i in 0..7 {
            for j in 0..7 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn loc_reproduces_family_members() {
        let (torus, family, block) = setup_d3();
        let coords = anchored_coords(&torus, 0);
        for (ai, idx) in family.indices.iter().enumerate() {
            let mut s = Poly::zero(caps());
            for &x in &block {
                s = s.add(&sym_monomial(caps(), 3, x, idx, Sector::Bulk, 0));
            }
            let coefs = loc_coefs(&torus, &coords, &family, &s, &block).unwrap();
            for (&(a, _, _), &c) in &coefs {
                let want = if a == ai { 1.0 } else { 0.0 };
                assert!((c - want).abs() < 1e-9, "index {ai}: got {coefs:?}");
            }
        }
    }

    #[test]
    fn loc_idempotent_and_annihilating() {
        let (torus, family, block) = setup_d3();
        let coords = anchored_coords(&torus, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let f = random_poly(&mut rng, &torus, caps(), 1, 6, 3);
            let lf = loc(&torus, &coords, &family, &f, &block).unwrap();
            let llf = loc(&torus, &coords, &family, &lf, &block).unwrap();
            assert!(llf.max_coef_diff(&lf) < 1e-9);
            // Loc (1 - Loc) F = 0
            let resid = f.sub(&lf);
            let lr = loc(&torus, &coords, &family, &resid, &block).unwrap();
            assert!(lr.max_abs_coef() < 1e-9);
        }
    }

    #[test]
    fn loc_vanishes_on_high_order_input() {
        // all derivatives of order < d_+/[[phi]] = 4 vanish at 0 for phi^4
        let (torus, family, block) = setup_d3();
        let coords = anchored_coords(&torus, 0);
        let mut f = Poly::zero(caps());
        f.add_term(
            Term {
                factors: vec![Factor::phi(0, 0); 4],
                sector: Sector::Bulk,
                grade: 0,
            },
            1.0,
        );
        let lf = loc(&torus, &coords, &family, &f, &block).unwrap();
        assert!(lf.is_zero());
    }

    #[test]
    fn loc_product_annihilation() {
        // if loc F = 0 then loc F' F = 0 (checked with F = (1-loc)G)
        let (torus, family, block) = setup_d3();
        let coords = anchored_coords(&torus, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let g = random_poly(&mut rng, &torus, caps(), 1, 4, 2);
            let f = g.sub(&loc(&torus, &coords, &family, &g, &block).unwrap());
            let fp = random_poly(&mut rng, &torus, caps(), 1, 3, 1);
            let prod = fp.mul(&f).unwrap();
            let lp = loc(&torus, &coords, &family, &prod, &block).unwrap();
            assert!(lp.max_abs_coef() < 1e-8);
        }
    }

    #[test]
    fn patch_shift_invariance() {
        let (torus, family, block) = setup_d3();
        let c0 = anchored_coords(&torus, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        // shifted coordinates: add a constant offset per axis
        let c1 = |site: usize| {
            let mut v = anchored_coords(&torus, 0)(site);
            for (a, slot) in v.iter_mut().enumerate() {
                *slot += 3 + a as i64;
            }
            v
        };
        for _ in 0..10 {
            let f = random_poly(&mut rng, &torus, caps(), 1, 5, 3);
            let l0 = loc(&torus, &c0, &family, &f, &block).unwrap();
            let l1 = loc(&torus, &c1, &family, &f, &block).unwrap();
            assert!(l0.max_coef_diff(&l1) < 1e-9);
        }
    }

    #[test]
    fn observable_sector_routing() {
        let (torus, _, block) = setup_d3();
        let coords = anchored_coords(&torus, 0);
        let dims = engineering_dims(3, 0.0);
        let op = ObsPoints { o: 0, x: 7 };
        let localiser =
            Localiser::new(&torus, &coords, caps(), 1, &dims, &block, Some(op)).unwrap();
        assert_eq!(localiser.obs.indices.len(), 2);
        // o-sector content with o inside X localises at {o}
        let mut f = Poly::zero(caps());
        f.add_term(
            Term {
                factors: vec![Factor::phi(0, 0)],
                sector: Sector::ObsO,
                grade: 1,
            },
            1.0,
        );
        let lf = localiser.loc_full(&torus, &coords, &f, &block).unwrap();
        assert!(lf.max_coef_diff(&f) < 1e-10);
        // x-sector with x = 7 outside the block: localisation is zero
        let mut g = Poly::zero(caps());
        g.add_term(
            Term {
                factors: vec![Factor::phi(1, 0)],
                sector: Sector::ObsX,
                grade: 1,
            },
            1.0,
        );
        let lg = localiser.loc_full(&torus, &coords, &g, &block).unwrap();
        assert!(lg.is_zero());
    }

    #[test]
    fn loc_commutes_with_sector_projections() {
        let (torus, _, block) = setup_d3();
        let coords = anchored_coords(&torus, 0);
        let dims = engineering_dims(3, 0.0);
        let op = ObsPoints { o: 0, x: 1 };
        let localiser =
            Localiser::new(&torus, &coords, caps(), 1, &dims, &block, Some(op)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut f = random_poly(&mut rng, &torus, caps(), 1, 4, 2);
        f.add_term(
            Term {
                factors: vec![Factor::phi(0, 0)],
                sector: Sector::ObsO,
                grade: 1,
            },
            0.5,
        );
        let lf = localiser.loc_full(&torus, &coords, &f, &block).unwrap();
        for sector in Sector::ALL {
            let a = lf.pi(sector);
            let b = localiser
                .loc_full(&torus, &coords, &f.pi(sector), &block)
                .unwrap();
            assert!(a.max_coef_diff(&b) < 1e-10);
        }
    }

    #[test]
    fn zeta_content_is_refused() {
        let (torus, family, block) = setup_d3();
        let coords = anchored_coords(&torus, 0);
        let f = Poly::from_factor(caps(), Factor::phi(0, 0), 0).theta();
        assert!(loc(&torus, &coords, &family, &f, &block).is_err());
    }
}
