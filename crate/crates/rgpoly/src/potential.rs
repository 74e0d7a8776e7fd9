//! Effective potentials: the invariant coefficient basis (nu, g, lambda, q,
//! u), their expansion into field polynomials, projection of polynomials back
//! onto the basis, and the map that removes constants and transfers the
//! gradient-square coupling to the Laplacian one.
//!
//! Coupling values are graded series in the coupling order so that algebraic
//! identities can be checked grade by grade; numeric flows read the totals.

use crate::error::{Result, RgError};
use crate::fieldalg::{Caps, Factor, Poly, Sector, Term};
use crate::geometry::TorusLattice;
use crate::localisation::{engineering_dims, sym_monomial, EngDims, MonomialIndex, ObsPoints};
use nalgebra::DMatrix;
use std::collections::BTreeMap;

/// Graded coupling value: slot k is the order-k part.
pub type Series = Vec<f64>;

pub fn series_zero(m: u8) -> Series {
    vec![0.0; m as usize + 1]
}

pub fn series_from(m: u8, grade: u8, v: f64) -> Series {
    let mut s = series_zero(m);
    s[grade as usize] = v;
    s
}

pub fn series_total(s: &Series) -> f64 {
    s.iter().sum()
}

pub fn series_add(a: &Series, b: &Series) -> Series {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn series_sub(a: &Series, b: &Series) -> Series {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn series_max_abs(s: &Series) -> f64 {
    s.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// One invariant quadratic bulk entry: a flip-even orbit of derivative-word
/// pairs under axis permutations, contracted over components.
#[derive(Debug, Clone, PartialEq)]
pub struct BulkEntry {
    pub q: usize,
    pub pairs: Vec<(Vec<u8>, Vec<u8>)>,
    /// Overall sign/scale; -1 for the Laplacian entry so it reads phi.(lap
    /// phi) with the negative-definite lattice Laplacian.
    pub weight: f64,
}

impl BulkEntry {
    /// Per-site polynomial weight * sum_alpha sum_pairs S^((w1,a),(w2,a))_x.
    pub fn poly_at(&self, caps: Caps, d: usize, n: usize, x: usize) -> Poly {
        let mut out = Poly::zero(caps);
        for (w1, w2) in &self.pairs {
            for alpha in 0..n as u8 {
                let idx = MonomialIndex::new(vec![(w1.clone(), alpha), (w2.clone(), alpha)]);
                out = out.add(&sym_monomial(caps, d, x, &idx, Sector::Bulk, 0));
            }
        }
        out.scale(self.weight)
    }
}

fn words_of_len(d: usize, len: usize) -> Vec<Vec<u8>> {
    fn rec(d: usize, len: usize, start: u8, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if len == 0 {
            out.push(cur.clone());
            return;
        }
        for a in start..d as u8 {
            cur.push(a);
            rec(d, len - 1, a, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, len, 0, &mut Vec::new(), &mut out);
    out
}

fn permutations(d: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut cur: Vec<u8> = (0..d as u8).collect();
    fn heap(k: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if k == 1 {
            out.push(cur.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, cur, out);
            if k % 2 == 0 {
                cur.swap(i, k - 1);
            } else {
                cur.swap(0, k - 1);
            }
        }
    }
    heap(d, &mut cur, &mut out);
    out
}

fn apply_perm(perm: &[u8], pair: &(Vec<u8>, Vec<u8>)) -> (Vec<u8>, Vec<u8>) {
    let map = |w: &Vec<u8>| {
        let mut v: Vec<u8> = w.iter().map(|&a| perm[a as usize]).collect();
        v.sort_unstable();
        v
    };
    let mut a = map(&pair.0);
    let mut b = map(&pair.1);
    if a > b {
        std::mem::swap(&mut a, &mut b);
    }
    (a, b)
}

/// Flip-even axis-permutation orbits of unordered word pairs with total
/// derivative order q; these index the invariant quadratic gradient terms.
pub fn grad_pair_orbits(d: usize, q: usize) -> Vec<Vec<(Vec<u8>, Vec<u8>)>> {
    let perms = permutations(d);
    let mut seen: BTreeMap<(Vec<u8>, Vec<u8>), bool> = BTreeMap::new();
    let mut orbits = Vec::new();
    for l1 in 0..=q / 2 {
        for w1 in words_of_len(d, l1) {
            for w2 in words_of_len(d, q - l1) {
                let mut pair = (w1.clone(), w2.clone());
                if pair.0 > pair.1 {
                    std::mem::swap(&mut pair.0, &mut pair.1);
                }
                if seen.contains_key(&pair) {
                    continue;
                }
                // flip-evenness: every axis appears an even number of times
                let mut counts = vec![0usize; d];
                for &a in pair.0.iter().chain(pair.1.iter()) {
                    counts[a as usize] += 1;
                }
                let even = counts.iter().all(|c| c % 2 == 0);
                let mut orbit: Vec<(Vec<u8>, Vec<u8>)> = perms
                    .iter()
                    .map(|p| apply_perm(p, &pair))
                    .collect();
                orbit.sort();
                orbit.dedup();
                for member in &orbit {
                    seen.insert(member.clone(), true);
                }
                if even {
                    orbits.push(orbit);
                }
            }
        }
    }
    orbits
}

#[derive(Debug, Clone)]
pub struct PotentialBasis {
    pub d: usize,
    pub n: usize,
    pub eta: f64,
    pub dims: EngDims,
    /// nu entries: index 0 is |phi|^2; the rest are gradient orbits with
    /// increasing q. Index of the Laplacian-type and gradient-square entries
    /// (q = 2), when present.
    pub nu_entries: Vec<BulkEntry>,
    pub idx_delta: Option<usize>,
    pub idx_gradgrad: Option<usize>,
    /// g entries: index 0 is |phi|^4. Quartic gradient entries exist only for
    /// d >= 6 and are not generated here; the exercised dimensions have none.
    pub g_entries: Vec<BulkEntry>,
    /// lambda entries: p = 1, component 1 indices with q < [phi].
    pub lam_entries: Vec<MonomialIndex>,
}

impl PotentialBasis {
    pub fn new(d: usize, n: usize, eta: f64) -> Self {
        let dims = engineering_dims(d, eta);
        // |phi|^2
        let mut nu_entries = vec![BulkEntry {
            q: 0,
            pairs: vec![(Vec::new(), Vec::new())],
            weight: 1.0,
        }];
        let mut idx_delta = None;
        let mut idx_gradgrad = None;
        let q_max = dims.d_bulk - 2.0 * dims.phi;
        let mut q = 2;
        while (q as f64) < q_max {
            for orbit in grad_pair_orbits(d, q) {
                let mut weight = 1.0;
                if q == 2 {
                    // identify by the first representative's shape
                    if orbit[0].0.is_empty() {
                        idx_delta = Some(nu_entries.len());
                        weight = -1.0;
                    } else {
                        idx_gradgrad = Some(nu_entries.len());
                    }
                }
                nu_entries.push(BulkEntry { q, pairs: orbit, weight });
            }
            q += 2;
        }
        let g_entries = vec![BulkEntry {
            q: 0,
            pairs: vec![(Vec::new(), Vec::new())],
            weight: 1.0,
        }];
        let mut lam_entries = vec![MonomialIndex::new(vec![(Vec::new(), 0)])];
        let mut ql = 1;
        while (ql as f64) < dims.phi {
            for w in words_of_len(d, ql) {
                lam_entries.push(MonomialIndex::new(vec![(w, 0)]));
            }
            ql += 1;
        }
        PotentialBasis {
            d,
            n,
            eta,
            dims,
            nu_entries,
            idx_delta,
            idx_gradgrad,
            g_entries,
            lam_entries,
        }
    }

    /// |phi_x|^2 as a polynomial (no 1/2).
    pub fn phi_sq(&self, caps: Caps, x: usize) -> Poly {
        self.nu_entries[0].poly_at(caps, self.d, self.n, x)
    }

    /// |phi_x|^4 as a polynomial (no 1/4).
    pub fn phi_quart(&self, caps: Caps, x: usize) -> Poly {
        let sq = self.phi_sq(caps, x);
        sq.mul(&sq).expect("degree cap too small for |phi|^4")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalPotential {
    pub u0: Series,
    pub nu: Vec<Series>,
    pub g: Vec<Series>,
    pub lam_o: Vec<Series>,
    pub lam_x: Vec<Series>,
    pub q_o: Series,
    pub q_x: Series,
}

impl LocalPotential {
    pub fn zero(basis: &PotentialBasis, m: u8) -> Self {
        LocalPotential {
            u0: series_zero(m),
            nu: vec![series_zero(m); basis.nu_entries.len()],
            g: vec![series_zero(m); basis.g_entries.len()],
            lam_o: vec![series_zero(m); basis.lam_entries.len()],
            lam_x: vec![series_zero(m); basis.lam_entries.len()],
            q_o: series_zero(m),
            q_x: series_zero(m),
        }
    }

    /// Order-1 bulk potential with the two leading couplings.
    pub fn bulk(basis: &PotentialBasis, m: u8, nu0: f64, g0: f64) -> Self {
        let mut v = LocalPotential::zero(basis, m);
        v.nu[0] = series_from(m, 1, nu0);
        v.g[0] = series_from(m, 1, g0);
        v
    }

    pub fn nu_total(&self) -> f64 {
        series_total(&self.nu[0])
    }

    pub fn g_total(&self) -> f64 {
        series_total(&self.g[0])
    }

    pub fn add(&self, other: &LocalPotential) -> LocalPotential {
        LocalPotential {
            u0: series_add(&self.u0, &other.u0),
            nu: self.nu.iter().zip(&other.nu).map(|(a, b)| series_add(a, b)).collect(),
            g: self.g.iter().zip(&other.g).map(|(a, b)| series_add(a, b)).collect(),
            lam_o: self
                .lam_o
                .iter()
                .zip(&other.lam_o)
                .map(|(a, b)| series_add(a, b))
                .collect(),
            lam_x: self
                .lam_x
                .iter()
                .zip(&other.lam_x)
                .map(|(a, b)| series_add(a, b))
                .collect(),
            q_o: series_add(&self.q_o, &other.q_o),
            q_x: series_add(&self.q_x, &other.q_x),
        }
    }

    pub fn sub(&self, other: &LocalPotential) -> LocalPotential {
        LocalPotential {
            u0: series_sub(&self.u0, &other.u0),
            nu: self.nu.iter().zip(&other.nu).map(|(a, b)| series_sub(a, b)).collect(),
            g: self.g.iter().zip(&other.g).map(|(a, b)| series_sub(a, b)).collect(),
            lam_o: self
                .lam_o
                .iter()
                .zip(&other.lam_o)
                .map(|(a, b)| series_sub(a, b))
                .collect(),
            lam_x: self
                .lam_x
                .iter()
                .zip(&other.lam_x)
                .map(|(a, b)| series_sub(a, b))
                .collect(),
            q_o: series_sub(&self.q_o, &other.q_o),
            q_x: series_sub(&self.q_x, &other.q_x),
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = series_max_abs(&self.u0)
            .max(series_max_abs(&self.q_o))
            .max(series_max_abs(&self.q_x));
        for s in self.nu.iter().chain(&self.g).chain(&self.lam_o).chain(&self.lam_x) {
            m = m.max(series_max_abs(s));
        }
        m
    }
}

struct CouplingTemplates {
    /// (template polynomial at grade 0, read/write accessor index)
    entries: Vec<(Poly, CouplingRef)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CouplingRef {
    U0,
    Nu(usize),
    G(usize),
    LamO(usize),
    LamX(usize),
    QO,
    QX,
}

fn templates(
    basis: &PotentialBasis,
    torus: &TorusLattice,
    caps: Caps,
    sites: &[usize],
    obs: Option<ObsPoints>,
) -> CouplingTemplates {
    let mut entries = Vec::new();
    let mut unit = Poly::zero(caps);
    unit.add_term(
        Term {
            factors: Vec::new(),
            sector: Sector::Bulk,
            grade: 0,
        },
        sites.len() as f64,
    );
    entries.push((unit, CouplingRef::U0));
    for (i, e) in basis.nu_entries.iter().enumerate() {
        let mut p = Poly::zero(caps);
        for &x in sites {
            p = p.add(&e.poly_at(caps, basis.d, basis.n, x));
        }
        entries.push((p.scale(0.5), CouplingRef::Nu(i)));
    }
    for (i, _) in basis.g_entries.iter().enumerate() {
        let mut p = Poly::zero(caps);
        for &x in sites {
            p = p.add(&basis.phi_quart(caps, x));
        }
        entries.push((p.scale(0.25), CouplingRef::G(i)));
    }
    if let Some(op) = obs {
        for (i, idx) in basis.lam_entries.iter().enumerate() {
            if sites.contains(&op.o) {
                let s = sym_monomial(caps, basis.d, op.o, idx, Sector::ObsO, 0);
                entries.push((s, CouplingRef::LamO(i)));
            }
            if sites.contains(&op.x) {
                let s = sym_monomial(caps, basis.d, op.x, idx, Sector::ObsX, 0);
                entries.push((s, CouplingRef::LamX(i)));
            }
        }
        if sites.contains(&op.o) {
            entries.push((
                Poly::constant(caps, 0.5, Sector::ObsOx, 0),
                CouplingRef::QO,
            ));
        }
        if sites.contains(&op.x) {
            entries.push((
                Poly::constant(caps, 0.5, Sector::ObsOx, 0),
                CouplingRef::QX,
            ));
        }
    }
    let _ = torus;
    CouplingTemplates { entries }
}

fn coupling_series<'a>(v: &'a LocalPotential, r: CouplingRef) -> &'a Series {
    match r {
        CouplingRef::U0 => &v.u0,
        CouplingRef::Nu(i) => &v.nu[i],
        CouplingRef::G(i) => &v.g[i],
        CouplingRef::LamO(i) => &v.lam_o[i],
        CouplingRef::LamX(i) => &v.lam_x[i],
        CouplingRef::QO => &v.q_o,
        CouplingRef::QX => &v.q_x,
    }
}

fn coupling_series_mut<'a>(v: &'a mut LocalPotential, r: CouplingRef) -> &'a mut Series {
    match r {
        CouplingRef::U0 => &mut v.u0,
        CouplingRef::Nu(i) => &mut v.nu[i],
        CouplingRef::G(i) => &mut v.g[i],
        CouplingRef::LamO(i) => &mut v.lam_o[i],
        CouplingRef::LamX(i) => &mut v.lam_x[i],
        CouplingRef::QO => &mut v.q_o,
        CouplingRef::QX => &mut v.q_x,
    }
}

/// U(X) as a field polynomial over the given sites.
pub fn potential_poly(
    basis: &PotentialBasis,
    torus: &TorusLattice,
    caps: Caps,
    v: &LocalPotential,
    sites: &[usize],
    obs: Option<ObsPoints>,
) -> Poly {
    let t = templates(basis, torus, caps, sites, obs);
    let mut out = Poly::zero(caps);
    for (template, cref) in &t.entries {
        let series = coupling_series(v, *cref);
        for (grade, &c) in series.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (term, coef) in template.terms() {
                out.add_term(
                    Term {
                        factors: term.factors.clone(),
                        sector: term.sector,
                        grade: grade as u8,
                    },
                    c * coef,
                );
            }
        }
    }
    out
}

/// Least-squares projection of a polynomial onto the coupling basis over the
/// given sites; returns the potential and the residual (max leftover
/// coefficient). Grades are projected independently.
pub fn project_poly(
    basis: &PotentialBasis,
    torus: &TorusLattice,
    caps: Caps,
    f: &Poly,
    sites: &[usize],
    obs: Option<ObsPoints>,
) -> Result<(LocalPotential, f64)> {
    let t = templates(basis, torus, caps, sites, obs);
    let m = caps.grade;
    // term universe over templates
    let mut universe: BTreeMap<(Vec<Factor>, Sector), usize> = BTreeMap::new();
    for (template, _) in &t.entries {
        for (term, _) in template.terms() {
            let key = (term.factors.clone(), term.sector);
            let next = universe.len();
            universe.entry(key).or_insert(next);
        }
    }
    let rows = universe.len();
    let cols = t.entries.len();
    let mut a = DMatrix::zeros(rows, cols);
    for (ci, (template, _)) in t.entries.iter().enumerate() {
        for (term, coef) in template.terms() {
            let ri = universe[&(term.factors.clone(), term.sector)];
            a[(ri, ci)] += coef;
        }
    }
    let svd = a.clone().svd(true, true);
    let mut out = LocalPotential::zero(basis, m);
    let mut residual = 0.0f64;
    for grade in 0..=m {
        let mut b = nalgebra::DVector::zeros(rows);
        let mut any = false;
        for (term, coef) in f.terms() {
            if term.grade != grade {
                continue;
            }
            match universe.get(&(term.factors.clone(), term.sector)) {
                Some(&ri) => {
                    b[ri] += coef;
                    any = true;
                }
                None => {
                    residual = residual.max(coef.abs());
                }
            }
        }
        if !any {
            continue;
        }
        let c = svd
            .solve(&b, 1e-12)
            .map_err(|e| RgError::Serde(format!("projection solve: {e}")))?;
        let fit = &a * &c;
        residual = residual.max((&b - fit).amax());
        for (ci, (_, cref)) in t.entries.iter().enumerate() {
            coupling_series_mut(&mut out, *cref)[grade as usize] += c[ci];
        }
    }
    Ok((out, residual))
}

/// Remove the constant and observable-constant parts and transfer the
/// gradient-square coupling to the Laplacian one; returns (V_plus, delta_u)
/// where delta_u keeps only (u0, q_o, q_x).
pub fn v0_map(basis: &PotentialBasis, u: &LocalPotential) -> (LocalPotential, LocalPotential) {
    let m = (u.u0.len() - 1) as u8;
    let mut v = u.clone();
    let mut du = LocalPotential::zero(basis, m);
    du.u0 = std::mem::replace(&mut v.u0, series_zero(m));
    du.q_o = std::mem::replace(&mut v.q_o, series_zero(m));
    du.q_x = std::mem::replace(&mut v.q_x, series_zero(m));
    if let (Some(id), Some(ig)) = (basis.idx_delta, basis.idx_gradgrad) {
        let grad = std::mem::replace(&mut v.nu[ig], series_zero(m));
        v.nu[id] = series_sub(&v.nu[id], &grad);
    }
    (v, du)
}
