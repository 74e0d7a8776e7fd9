//! Sparse polynomial algebra over lattice fields with forward differences,
//! graded by observable sector and coupling order, plus the Gaussian calculus:
//! Delta_C, the heat semigroups e^{+-Delta_C/2}, F_C, Cov_C and their
//! pi-variants, and an independent Wick-pairing oracle for tests.
//!
//! Two field alphabets coexist: phi (the external field) and zeta (the
//! fluctuation field introduced by theta). Gaussian operations act on a chosen
//! alphabet, so "shift then integrate the fluctuation" is a first-class
//! composite while phi stays symbolic.

use crate::covariance::CovarianceMatrix;
use crate::error::{Result, RgError};
use crate::geometry::TorusLattice;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Alphabet {
    Phi,
    Zeta,
}

/// Observable sector with sigma_o^2 = sigma_x^2 = 0 and sigma_o sigma_x = sigma_ox.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sector {
    Bulk,
    ObsO,
    ObsX,
    ObsOx,
}

impl Sector {
    pub fn mul(self, other: Sector) -> Option<Sector> {
        use Sector::*;
        match (self, other) {
            (Bulk, s) | (s, Bulk) => Some(s),
            (ObsO, ObsX) | (ObsX, ObsO) => Some(ObsOx),
            _ => None,
        }
    }

    pub const ALL: [Sector; 4] = [Sector::Bulk, Sector::ObsO, Sector::ObsX, Sector::ObsOx];
}

/// Difference word: sorted signed axes, entry a+1 for the forward difference
/// along axis a and -(a+1) for the backward one. grad^{+e} f(x) = f(x+e) - f(x).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct DerivWord(pub Vec<i8>);

impl DerivWord {
    pub fn empty() -> Self {
        DerivWord(Vec::new())
    }

    pub fn from_dirs(mut dirs: Vec<i8>) -> Self {
        dirs.sort_unstable();
        DerivWord(dirs)
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    /// Signed point-evaluation expansion: grad^w f(x) = sum_i c_i f(x + o_i).
    pub fn expansion(&self, d: usize) -> Vec<(Vec<i64>, f64)> {
        let mut terms: Vec<(Vec<i64>, f64)> = vec![(vec![0i64; d], 1.0)];
        for &e in &self.0 {
            let axis = (e.unsigned_abs() as usize) - 1;
            let sign: i64 = if e > 0 { 1 } else { -1 };
            let mut next = Vec::with_capacity(terms.len() * 2);
            for (off, c) in &terms {
                let mut shifted = off.clone();
                shifted[axis] += sign;
                next.push((shifted, *c));
                next.push((off.clone(), -*c));
            }
            terms = next;
        }
        terms
    }
}

/// One linear field factor: grad^word alphabet_site^{(comp)}.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Factor {
    pub alph: Alphabet,
    pub site: usize,
    pub word: DerivWord,
    pub comp: u8,
}

impl Factor {
    pub fn phi(site: usize, comp: u8) -> Self {
        Factor {
            alph: Alphabet::Phi,
            site,
            word: DerivWord::empty(),
            comp,
        }
    }

    pub fn phi_deriv(site: usize, comp: u8, word: DerivWord) -> Self {
        Factor {
            alph: Alphabet::Phi,
            site,
            word,
            comp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Term {
    pub factors: Vec<Factor>,
    pub sector: Sector,
    pub grade: u8,
}

impl Term {
    pub fn unit(grade: u8) -> Self {
        Term {
            factors: Vec::new(),
            sector: Sector::Bulk,
            grade,
        }
    }

    pub fn degree(&self) -> usize {
        self.factors.len()
    }

    fn normalised(mut self) -> Self {
        self.factors.sort();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Caps {
    /// Coupling-grade truncation order M; product grades above it are dropped.
    pub grade: u8,
    /// Field-degree cap D; exceeding it is an error, never silent truncation.
    pub degree: usize,
}

impl Caps {
    pub fn standard(m: u8) -> Self {
        Caps {
            grade: m,
            degree: 4 * m as usize + 8,
        }
    }
}

pub type Graded = BTreeMap<(Sector, u8), f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    pub caps: Caps,
    terms: BTreeMap<Term, f64>,
}

impl Poly {
    pub fn zero(caps: Caps) -> Self {
        Poly {
            caps,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(caps: Caps, c: f64, sector: Sector, grade: u8) -> Self {
        let mut p = Poly::zero(caps);
        p.add_term(
            Term {
                factors: Vec::new(),
                sector,
                grade,
            },
            c,
        );
        p
    }

    pub fn one(caps: Caps) -> Self {
        Poly::constant(caps, 1.0, Sector::Bulk, 0)
    }

    pub fn from_factor(caps: Caps, f: Factor, grade: u8) -> Self {
        let mut p = Poly::zero(caps);
        p.add_term(
            Term {
                factors: vec![f],
                sector: Sector::Bulk,
                grade,
            },
            1.0,
        );
        p
    }

    pub fn add_term(&mut self, term: Term, c: f64) {
        if c == 0.0 || term.grade > self.caps.grade {
            return;
        }
        let term = term.normalised();
        let slot = self.terms.entry(term.clone()).or_insert(0.0);
        *slot += c;
        if *slot == 0.0 {
            self.terms.remove(&term);
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Term, f64)> {
        self.terms.iter().map(|(t, &c)| (t, c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn max_degree(&self) -> usize {
        self.terms.keys().map(|t| t.degree()).max().unwrap_or(0)
    }

    pub fn add(&self, other: &Poly) -> Poly {
        assert_eq!(self.caps, other.caps, "cap mismatch in add");
        let mut out = self.clone();
        for (t, c) in other.terms() {
            out.add_term(t.clone(), c);
        }
        out
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Poly {
        if c == 0.0 {
            return Poly::zero(self.caps);
        }
        Poly {
            caps: self.caps,
            terms: self.terms.iter().map(|(t, v)| (t.clone(), c * v)).collect(),
        }
    }

    pub fn mul(&self, other: &Poly) -> Result<Poly> {
        self.mul_capped(other, self.caps.grade)
    }

    /// Product with an explicit grade cap, pruning during expansion.
    pub fn mul_capped(&self, other: &Poly, grade_cap: u8) -> Result<Poly> {
        assert_eq!(self.caps, other.caps, "cap mismatch in mul");
        let cap = grade_cap.min(self.caps.grade);
        let mut out = Poly::zero(self.caps);
        for (ta, ca) in self.terms() {
            if ta.grade > cap {
                continue;
            }
            for (tb, cb) in other.terms() {
                let grade = ta.grade + tb.grade;
                if grade > cap {
                    continue;
                }
                let sector = match ta.sector.mul(tb.sector) {
                    Some(s) => s,
                    None => continue,
                };
                let degree = ta.degree() + tb.degree();
                if degree > self.caps.degree {
                    return Err(RgError::DegreeOverflow {
                        degree,
                        cap: self.caps.degree,
                        context: "polynomial product".into(),
                    });
                }
                let mut factors = ta.factors.clone();
                factors.extend(tb.factors.iter().cloned());
                out.add_term(
                    Term {
                        factors,
                        sector,
                        grade,
                    },
                    ca * cb,
                );
            }
        }
        Ok(out)
    }

    /// Keep only the given observable sector.
    pub fn pi(&self, sector: Sector) -> Poly {
        Poly {
            caps: self.caps,
            terms: self
                .terms
                .iter()
                .filter(|(t, _)| t.sector == sector)
                .map(|(t, v)| (t.clone(), *v))
                .collect(),
        }
    }

    /// Keep only the given coupling grade.
    pub fn grade_part(&self, grade: u8) -> Poly {
        Poly {
            caps: self.caps,
            terms: self
                .terms
                .iter()
                .filter(|(t, _)| t.grade == grade)
                .map(|(t, v)| (t.clone(), *v))
                .collect(),
        }
    }

    pub fn min_grade(&self) -> Option<u8> {
        self.terms.keys().map(|t| t.grade).min()
    }

    /// theta: substitute phi <- phi + zeta in every factor.
    pub fn theta(&self) -> Poly {
        let mut out = Poly::zero(self.caps);
        for (t, c) in self.terms() {
            // expand each phi-factor into (phi + zeta)
            let mut expansions: Vec<(Vec<Factor>, f64)> = vec![(Vec::new(), c)];
            for f in &t.factors {
                if f.alph == Alphabet::Phi {
                    let mut z = f.clone();
                    z.alph = Alphabet::Zeta;
                    let mut next = Vec::with_capacity(expansions.len() * 2);
                    for (fs, w) in &expansions {
                        let mut a = fs.clone();
                        a.push(f.clone());
                        next.push((a, *w));
                        let mut b = fs.clone();
                        b.push(z.clone());
                        next.push((b, *w));
                    }
                    expansions = next;
                } else {
                    for (fs, _) in &mut expansions {
                        fs.push(f.clone());
                    }
                }
            }
            for (factors, w) in expansions {
                out.add_term(
                    Term {
                        factors,
                        sector: t.sector,
                        grade: t.grade,
                    },
                    w,
                );
            }
        }
        out
    }

    /// Drop every term containing a zeta factor (evaluation at zeta = 0).
    pub fn set_zeta_zero(&self) -> Poly {
        Poly {
            caps: self.caps,
            terms: self
                .terms
                .iter()
                .filter(|(t, _)| t.factors.iter().all(|f| f.alph == Alphabet::Phi))
                .map(|(t, v)| (t.clone(), *v))
                .collect(),
        }
    }

    /// Linear substitution factor -> (factor', sign); used by symmetrisation.
    pub fn map_factors(&self, f: impl Fn(&Factor) -> (Factor, f64)) -> Poly {
        let mut out = Poly::zero(self.caps);
        for (t, c) in self.terms() {
            let mut sign = 1.0;
            let factors: Vec<Factor> = t
                .factors
                .iter()
                .map(|fac| {
                    let (nf, s) = f(fac);
                    sign *= s;
                    nf
                })
                .collect();
            out.add_term(
                Term {
                    factors,
                    sector: t.sector,
                    grade: t.grade,
                },
                c * sign,
            );
        }
        out
    }

    pub fn evaluate(&self, torus: &TorusLattice, config: &FieldConfig) -> Graded {
        let mut out: Graded = BTreeMap::new();
        for (t, c) in self.terms() {
            let mut v = c;
            for f in &t.factors {
                v *= config.factor_value(torus, f);
                if v == 0.0 {
                    break;
                }
            }
            if v != 0.0 {
                *out.entry((t.sector, t.grade)).or_insert(0.0) += v;
            }
        }
        out.retain(|_, v| *v != 0.0);
        out
    }

    pub fn max_abs_coef(&self) -> f64 {
        self.terms.values().fold(0.0f64, |a, &v| a.max(v.abs()))
    }

    pub fn max_coef_diff(&self, other: &Poly) -> f64 {
        let mut m = 0.0f64;
        for (t, c) in self.terms() {
            m = m.max((c - other.terms.get(t).copied().unwrap_or(0.0)).abs());
        }
        for (t, c) in other.terms() {
            if !self.terms.contains_key(t) {
                m = m.max(c.abs());
            }
        }
        m
    }
}

/// Field values per site and component; zeta defaults to zero.
#[derive(Debug, Clone)]
pub struct FieldConfig {
    pub n: usize,
    pub phi: Vec<Vec<f64>>,
    pub zeta: Option<Vec<Vec<f64>>>,
}

impl FieldConfig {
    pub fn zero(torus: &TorusLattice, n: usize) -> Self {
        FieldConfig {
            n,
            phi: vec![vec![0.0; n]; torus.volume()],
            zeta: None,
        }
    }

    pub fn factor_value(&self, torus: &TorusLattice, f: &Factor) -> f64 {
        let table = match f.alph {
            Alphabet::Phi => &self.phi,
            Alphabet::Zeta => match &self.zeta {
                Some(z) => z,
                None => return 0.0,
            },
        };
        let mut v = 0.0;
        for (off, c) in f.word.expansion(torus.d) {
            v += c * table[torus.shift(f.site, &off)][f.comp as usize];
        }
        v
    }
}

/// Covariance pairing of two linear factors: delta_{comp} grad_x^w grad_y^w' C.
fn factor_pair(c: &CovarianceMatrix, a: &Factor, b: &Factor) -> f64 {
    if a.comp != b.comp {
        return 0.0;
    }
    let torus = &c.torus;
    let mut v = 0.0;
    for (oa, ca) in a.word.expansion(torus.d) {
        let xa = torus.shift(a.site, &oa);
        for (ob, cb) in b.word.expansion(torus.d) {
            v += ca * cb * c.value(xa, torus.shift(b.site, &ob));
        }
    }
    v
}

/// Delta_C acting on the chosen alphabet:
/// sum_{x,y,alpha} C(x,y) d^2 / d phi_x^{(alpha)} d phi_y^{(alpha)}.
pub fn laplacian(f: &Poly, c: &CovarianceMatrix, alph: Alphabet) -> Poly {
    let mut out = Poly::zero(f.caps);
    if c.is_zero() {
        return out;
    }
    for (t, coef) in f.terms() {
        let slots: Vec<usize> = (0..t.factors.len())
            .filter(|&i| t.factors[i].alph == alph)
            .collect();
        for (si, &i) in slots.iter().enumerate() {
            for &j in &slots[si + 1..] {
                let p = factor_pair(c, &t.factors[i], &t.factors[j]);
                if p == 0.0 {
                    continue;
                }
                let factors: Vec<Factor> = t
                    .factors
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != i && k != j)
                    .map(|(_, f)| f.clone())
                    .collect();
                out.add_term(
                    Term {
                        factors,
                        sector: t.sector,
                        grade: t.grade,
                    },
                    2.0 * p * coef,
                );
            }
        }
    }
    out
}

/// e^{sign Delta_C / 2} on polynomials; the series terminates by nilpotency.
pub fn heat_semigroup(f: &Poly, c: &CovarianceMatrix, sign: f64, alph: Alphabet) -> Poly {
    let mut out = f.clone();
    let mut power = f.clone();
    let mut k = 1.0f64;
    loop {
        power = laplacian(&power, c, alph);
        if power.is_zero() {
            break;
        }
        let coef = sign.powi(k as i32) / (2.0f64.powi(k as i32) * factorial(k as u32));
        out = out.add(&power.scale(coef));
        k += 1.0;
    }
    out
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// E_C theta F = e^{Delta_C/2} F, acting on phi.
pub fn gaussian_expect_theta(f: &Poly, c: &CovarianceMatrix) -> Poly {
    heat_semigroup(f, c, 1.0, Alphabet::Phi)
}

/// Integrate out the zeta alphabet: e^{Delta_C/2} on zeta, then zeta = 0.
pub fn expect_zeta(f: &Poly, c: &CovarianceMatrix) -> Poly {
    heat_semigroup(f, c, 1.0, Alphabet::Zeta).set_zeta_zero()
}

/// E[F(zeta)] over the chosen alphabet by explicit Isserlis pairing
/// enumeration; independent of the semigroup code, for tests only.
pub fn wick_oracle(f: &Poly, c: &CovarianceMatrix, alph: Alphabet) -> Result<Graded> {
    let mut out: Graded = BTreeMap::new();
    for (t, coef) in f.terms() {
        let slots: Vec<&Factor> = t.factors.iter().filter(|f| f.alph == alph).collect();
        if t.factors.len() != slots.len() {
            return Err(RgError::Refused(
                "wick oracle on a mixed-alphabet monomial".into(),
            ));
        }
        if slots.len() > 12 {
            return Err(RgError::Refused(format!(
                "wick pairing enumeration for degree {} (cap 12)",
                slots.len()
            )));
        }
        if slots.len() % 2 == 1 {
            continue;
        }
        let v = pairing_sum(&slots, c);
        if v != 0.0 {
            *out.entry((t.sector, t.grade)).or_insert(0.0) += coef * v;
        }
    }
    out.retain(|_, v| *v != 0.0);
    Ok(out)
}

fn pairing_sum(slots: &[&Factor], c: &CovarianceMatrix) -> f64 {
    if slots.is_empty() {
        return 1.0;
    }
    let first = slots[0];
    let mut total = 0.0;
    for i in 1..slots.len() {
        let p = factor_pair(c, first, slots[i]);
        if p == 0.0 {
            continue;
        }
        let rest: Vec<&Factor> = slots[1..]
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i - 1)
            .map(|(_, f)| *f)
            .collect();
        total += p * pairing_sum(&rest, c);
    }
    total
}

/// F_C[A;B] = e^{Delta_C/2}[(e^{-Delta_C/2}A)(e^{-Delta_C/2}B)] - AB.
pub fn f_c(a: &Poly, b: &Poly, c: &CovarianceMatrix) -> Result<Poly> {
    let am = heat_semigroup(a, c, -1.0, Alphabet::Phi);
    let bm = heat_semigroup(b, c, -1.0, Alphabet::Phi);
    let prod = am.mul(&bm)?;
    let lifted = heat_semigroup(&prod, c, 1.0, Alphabet::Phi);
    Ok(lifted.sub(&a.mul(b)?))
}

/// Cov_C[A;B] = F_C[E_C theta A; E_C theta B].
pub fn cov_c(a: &Poly, b: &Poly, c: &CovarianceMatrix) -> Result<Poly> {
    f_c(
        &gaussian_expect_theta(a, c),
        &gaussian_expect_theta(b, c),
        c,
    )
}

/// F_{pi,C}[A;B] = F_C[A; pi_0 B] + F_C[(1 - pi_0)A; B].
pub fn f_pi_c(a: &Poly, b: &Poly, c: &CovarianceMatrix) -> Result<Poly> {
    let b0 = b.pi(Sector::Bulk);
    let a_obs = a.sub(&a.pi(Sector::Bulk));
    Ok(f_c(a, &b0, c)?.add(&f_c(&a_obs, b, c)?))
}

/// Cov_{pi,C}[A;B] = F_{pi,C}[E_C theta A; E_C theta B].
pub fn cov_pi_c(a: &Poly, b: &Poly, c: &CovarianceMatrix) -> Result<Poly> {
    f_pi_c(
        &gaussian_expect_theta(a, c),
        &gaussian_expect_theta(b, c),
        c,
    )
}

/// Verifies E_{C1+C2} theta F = E_{C1} theta (E_{C2} theta F) coefficientwise.
pub fn covariance_splitting_check(
    f: &Poly,
    c1: &CovarianceMatrix,
    c2: &CovarianceMatrix,
    tol: f64,
) -> Result<bool> {
    let sum = c1.add(c2)?;
    let lhs = gaussian_expect_theta(f, &sum);
    let rhs = gaussian_expect_theta(&gaussian_expect_theta(f, c2), c1);
    Ok(lhs.max_coef_diff(&rhs) <= tol)
}

/// Deterministic random polynomial with dyadic coefficients, for test suites.
pub fn random_poly(
    rng: &mut impl rand::Rng,
    torus: &TorusLattice,
    caps: Caps,
    n: usize,
    num_terms: usize,
    max_degree: usize,
) -> Poly {
    let mut p = Poly::zero(caps);
    let v = torus.volume();
    for _ in 0..num_terms {
        let deg = rng.gen_range(0..=max_degree.min(caps.degree));
        let factors: Vec<Factor> = (0..deg)
            .map(|_| Factor::phi(rng.gen_range(0..v), rng.gen_range(0..n) as u8))
            .collect();
        let coef = rng.gen_range(-16i32..=16) as f64 / 16.0;
        p.add_term(
            Term {
                factors,
                sector: Sector::Bulk,
                grade: 0,
            },
            coef,
        );
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::exact_covariance;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn caps() -> Caps {
        Caps::standard(3)
    }

    fn torus() -> TorusLattice {
        TorusLattice::new(1, 2, 2).unwrap()
    }

    fn cov(t: &TorusLattice) -> CovarianceMatrix {
        exact_covariance(t, 0.0, 1.0, false).unwrap()
    }

    fn phi_pow(site: usize, k: usize) -> Poly {
        let mut p = Poly::one(caps());
        for _ in 0..k {
            p = p.mul(&Poly::from_factor(caps(), Factor::phi(site, 0), 0)).unwrap();
        }
        p
    }

    #[test]
    fn theta_shifts_factors() {
        let p = Poly::from_factor(caps(), Factor::phi(0, 0), 0);
        let shifted = p.theta();
        assert_eq!(shifted.num_terms(), 2);
        assert_eq!(shifted.set_zeta_zero(), p);
        // theta(phi^2) at zeta = 0 is phi^2
        assert_eq!(phi_pow(0, 2).theta().set_zeta_zero(), phi_pow(0, 2));
    }

    #[test]
    fn sector_nilpotency() {
        let mut o = Poly::zero(caps());
        o.add_term(
            Term {
                factors: vec![Factor::phi(0, 0)],
                sector: Sector::ObsO,
                grade: 1,
            },
            1.0,
        );
        let mut x = Poly::zero(caps());
        x.add_term(
            Term {
                factors: vec![Factor::phi(1, 0)],
                sector: Sector::ObsX,
                grade: 1,
            },
            1.0,
        );
        let ox = o.mul(&x).unwrap();
        assert_eq!(ox.num_terms(), 1);
        let (t, c) = ox.terms().next().unwrap();
        assert_eq!(t.sector, Sector::ObsOx);
        assert_eq!(c, 1.0);
        assert!(o.mul(&o).unwrap().is_zero());
        assert!(ox.mul(&o).unwrap().is_zero());
    }

    #[test]
    fn grade_truncation_in_products() {
        let g2 = Poly::constant(caps(), 1.0, Sector::Bulk, 2);
        assert!(g2.mul(&g2).unwrap().is_zero());
        let g1 = Poly::constant(caps(), 2.0, Sector::Bulk, 1);
        let p = g1.mul(&g2).unwrap();
        assert_eq!(p.terms().next().unwrap().0.grade, 3);
    }

    #[test]
    fn degree_overflow_is_loud() {
        let t = torus();
        let _ = t;
        let small = Caps { grade: 3, degree: 3 };
        let mut p = Poly::one(small);
        for _ in 0..3 {
            p = p.mul(&Poly::from_factor(small, Factor::phi(0, 0), 0)).unwrap();
        }
        let err = p.mul(&Poly::from_factor(small, Factor::phi(0, 0), 0));
        assert!(matches!(err, Err(RgError::DegreeOverflow { .. })));
    }

    #[test]
    fn laplacian_basics() {
        let t = torus();
        let c = cov(&t);
        // Delta_C(phi_x phi_y) = 2 C(x,y)
        let p = Poly::from_factor(caps(), Factor::phi(0, 0), 0)
            .mul(&Poly::from_factor(caps(), Factor::phi(1, 0), 0))
            .unwrap();
        let lap = laplacian(&p, &c, Alphabet::Phi);
        assert_eq!(lap.num_terms(), 1);
        assert_relative_eq!(lap.terms().next().unwrap().1, 2.0 * c.value(0, 1));
        assert!(laplacian(&Poly::one(caps()), &c, Alphabet::Phi).is_zero());
    }

    #[test]
    fn laplacian_of_phi4_norm() {
        // Delta_C |phi_x|^4 = (4n+8) C(x,x) |phi_x|^2
        let t = torus();
        let c = cov(&t);
        for n in [1u8, 2, 3] {
            let mut sq = Poly::zero(caps());
            for a in 0..n {
                sq.add_term(
                    Term {
                        factors: vec![Factor::phi(0, a), Factor::phi(0, a)],
                        sector: Sector::Bulk,
                        grade: 0,
                    },
                    1.0,
                );
            }
            let quart = sq.mul(&sq).unwrap();
            let lap = laplacian(&quart, &c, Alphabet::Phi);
            let expected = sq.scale((4.0 * n as f64 + 8.0) * c.value(0, 0));
            assert!(lap.max_coef_diff(&expected) < 1e-12, "n = {n}");
        }
    }

    #[test]
    fn expect_theta_wick_examples() {
        let t = torus();
        let c = cov(&t);
        let cxx = c.value(0, 0);
        // E theta phi^2 = phi^2 + C(x,x)
        let e2 = gaussian_expect_theta(&phi_pow(0, 2), &c);
        let want = phi_pow(0, 2).add(&Poly::constant(caps(), cxx, Sector::Bulk, 0));
        assert!(e2.max_coef_diff(&want) < 1e-14);
        // E theta phi^4 = phi^4 + 6 C phi^2 + 3 C^2
        let e4 = gaussian_expect_theta(&phi_pow(0, 4), &c);
        let want4 = phi_pow(0, 4)
            .add(&phi_pow(0, 2).scale(6.0 * cxx))
            .add(&Poly::constant(caps(), 3.0 * cxx * cxx, Sector::Bulk, 0));
        assert!(e4.max_coef_diff(&want4) < 1e-14);
    }

    #[test]
    fn semigroup_inverse_on_random_polys() {
        let t = torus();
        let c = cov(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..25 {
            let p = random_poly(&mut rng, &t, caps(), 1, 6, 8);
            let back = heat_semigroup(
                &heat_semigroup(&p, &c, 1.0, Alphabet::Phi),
                &c,
                -1.0,
                Alphabet::Phi,
            );
            assert!(back.max_coef_diff(&p) < 1e-10);
        }
    }

    #[test]
    fn semigroup_matches_wick_oracle() {
        let t = torus();
        let c = cov(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let p = random_poly(&mut rng, &t, caps(), 2, 5, 8);
            let semi = gaussian_expect_theta(&p, &c);
            // constant part of e^{Delta/2} F equals E[F(zeta)]
            let mut consts: Graded = BTreeMap::new();
            for (term, coef) in semi.terms() {
                if term.degree() == 0 {
                    *consts.entry((term.sector, term.grade)).or_insert(0.0) += coef;
                }
            }
            consts.retain(|_, v| *v != 0.0);
            let wick = wick_oracle(&p, &c, Alphabet::Phi).unwrap();
            for (k, v) in &wick {
                let s = consts.get(k).copied().unwrap_or(0.0);
                assert!((s - v).abs() <= 1e-9 * v.abs().max(1.0));
            }
            for (k, v) in &consts {
                if !wick.contains_key(k) {
                    assert!(v.abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn wick_oracle_examples() {
        let t = torus();
        let c = cov(&t);
        let zx = Factor {
            alph: Alphabet::Zeta,
            site: 0,
            word: DerivWord::empty(),
            comp: 0,
        };
        let zy = Factor {
            alph: Alphabet::Zeta,
            site: 1,
            word: DerivWord::empty(),
            comp: 0,
        };
        let mut p = Poly::zero(caps());
        p.add_term(
            Term {
                factors: vec![zx.clone(), zy.clone()],
                sector: Sector::Bulk,
                grade: 0,
            },
            1.0,
        );
        let e = wick_oracle(&p, &c, Alphabet::Zeta).unwrap();
        assert_relative_eq!(e[&(Sector::Bulk, 0)], c.value(0, 1));
        // E[z_x^2 z_y^2] = Cxx Cyy + 2 Cxy^2
        let mut p2 = Poly::zero(caps());
        p2.add_term(
            Term {
                factors: vec![zx.clone(), zx.clone(), zy.clone(), zy.clone()],
                sector: Sector::Bulk,
                grade: 0,
            },
            1.0,
        );
        let e2 = wick_oracle(&p2, &c, Alphabet::Zeta).unwrap();
        let want = c.value(0, 0) * c.value(1, 1) + 2.0 * c.value(0, 1).powi(2);
        assert_relative_eq!(e2[&(Sector::Bulk, 0)], want, epsilon = 1e-12);
        // odd monomial vanishes
        let mut p3 = Poly::zero(caps());
        p3.add_term(
            Term {
                factors: vec![zx.clone(), zx.clone(), zy],
                sector: Sector::Bulk,
                grade: 0,
            },
            1.0,
        );
        assert!(wick_oracle(&p3, &c, Alphabet::Zeta).unwrap().is_empty());
        // degree cap refusal
        let mut p4 = Poly::zero(caps());
        p4.add_term(
            Term {
                factors: vec![zx; 14],
                sector: Sector::Bulk,
                grade: 0,
            },
            1.0,
        );
        assert!(wick_oracle(&p4, &c, Alphabet::Zeta).is_err());
    }

    #[test]
    fn f_c_degree_one_gives_covariance() {
        let t = torus();
        let c = cov(&t);
        let a = Poly::from_factor(caps(), Factor::phi(0, 0), 0);
        let b = Poly::from_factor(caps(), Factor::phi(1, 0), 0);
        let f = f_c(&a, &b, &c).unwrap();
        assert_eq!(f.num_terms(), 1);
        assert_relative_eq!(f.terms().next().unwrap().1, c.value(0, 1));
    }

    #[test]
    fn cov_c_examples() {
        let t = torus();
        let c = cov(&t);
        let k = Poly::constant(caps(), 2.0, Sector::Bulk, 0);
        assert!(cov_c(&k, &k, &c).unwrap().is_zero());
        // Cov[phi_x^2; phi_y^2] = 4 C(x,y) phi_x phi_y + 2 C(x,y)^2
        let a = phi_pow(0, 2);
        let b = phi_pow(1, 2);
        let got = cov_c(&a, &b, &c).unwrap();
        let cxy = c.value(0, 1);
        let cross = Poly::from_factor(caps(), Factor::phi(0, 0), 0)
            .mul(&Poly::from_factor(caps(), Factor::phi(1, 0), 0))
            .unwrap();
        let want = cross
            .scale(4.0 * cxy)
            .add(&Poly::constant(caps(), 2.0 * cxy * cxy, Sector::Bulk, 0));
        assert!(got.max_coef_diff(&want) < 1e-12);
    }

    #[test]
    fn pi_variant_routes_observables() {
        let t = torus();
        let c = cov(&t);
        // purely bulk inputs: F_pi = F (both routes add up to the plain one)
        let a = phi_pow(0, 2);
        let b = phi_pow(1, 2);
        assert!(f_pi_c(&a, &b, &c)
            .unwrap()
            .max_coef_diff(&f_c(&a, &b, &c).unwrap())
            < 1e-13);
        // observable A with bulk B: both summands fire, giving 2 F[A;B]
        let mut o = Poly::zero(caps());
        o.add_term(
            Term {
                factors: vec![Factor::phi(0, 0)],
                sector: Sector::ObsO,
                grade: 1,
            },
            1.0,
        );
        let f = f_pi_c(&o, &a, &c).unwrap();
        assert!(f.max_coef_diff(&f_c(&o, &a, &c).unwrap().scale(2.0)) < 1e-13);
        // observable x observable: only the second summand contributes
        let mut x = Poly::zero(caps());
        x.add_term(
            Term {
                factors: vec![Factor::phi(1, 0)],
                sector: Sector::ObsX,
                grade: 1,
            },
            1.0,
        );
        let fo = f_pi_c(&o, &x, &c).unwrap();
        assert!(fo.max_coef_diff(&f_c(&o, &x, &c).unwrap()) < 1e-15);
    }

    #[test]
    fn splitting_check_holds() {
        let t = torus();
        let c1 = cov(&t);
        let c2 = c1.scale_by(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = random_poly(&mut rng, &t, caps(), 1, 5, 8);
            assert!(covariance_splitting_check(&p, &c1, &c2, 1e-10).unwrap());
        }
        let zero = CovarianceMatrix::zero(&t);
        let p = phi_pow(0, 2);
        assert!(covariance_splitting_check(&p, &c1, &zero, 0.0).unwrap());
    }

    #[test]
    fn expect_zeta_integrates_only_zeta() {
        let t = torus();
        let c = cov(&t);
        // theta(phi_x^2) = phi^2 + 2 phi zeta + zeta^2; E_zeta gives phi^2 + C(x,x)
        let p = phi_pow(0, 2).theta();
        let e = expect_zeta(&p, &c);
        let want = phi_pow(0, 2).add(&Poly::constant(caps(), c.value(0, 0), Sector::Bulk, 0));
        assert!(e.max_coef_diff(&want) < 1e-14);
    }

    #[test]
    fn evaluation_with_derivative_words() {
        let t = torus();
        let mut config = FieldConfig::zero(&t, 1);
        for (x, row) in config.phi.iter_mut().enumerate() {
            row[0] = (x * x) as f64;
        }
        // forward difference along the single axis at site 1: phi(2) - phi(1) = 3
        let f = Factor::phi_deriv(1, 0, DerivWord::from_dirs(vec![1]));
        let p = Poly::from_factor(caps(), f, 0);
        let v = p.evaluate(&t, &config);
        assert_relative_eq!(v[&(Sector::Bulk, 0)], 3.0);
        // backward difference at site 1: phi(0) - phi(1) = -1
        let b = Factor::phi_deriv(1, 0, DerivWord::from_dirs(vec![-1]));
        let v2 = Poly::from_factor(caps(), b, 0).evaluate(&t, &config);
        assert_relative_eq!(v2[&(Sector::Bulk, 0)], -1.0);
    }
}
