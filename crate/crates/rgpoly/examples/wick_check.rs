//! Gaussian expectation of phi(x)^4 two ways: through the heat semigroup
//! acting on the polynomial, and by counting Wick pairings by hand.

use rgpoly::covariance::CovarianceMatrix;
use rgpoly::fieldalg::{gaussian_expect_theta, Caps, Factor, FieldConfig, Poly, Sector, Term};
use rgpoly::geometry::TorusLattice;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let torus = TorusLattice::new(1, 4, 1)?;
    let v = torus.volume();

    // a translation-invariant covariance with some off-diagonal mass
    let mut row = vec![0.0; v];
    row[0] = 1.0;
    row[1] = 0.25;
    row[v - 1] = 0.25;
    let c = CovarianceMatrix::from_row(&torus, row);

    let caps = Caps { grade: 1, degree: 8 };
    for x in [0usize, 1] {
        let mut p = Poly::zero(caps);
        p.add_term(
            Term {
                factors: vec![Factor::phi(x, 0); 4],
                sector: Sector::Bulk,
                grade: 0,
            },
            1.0,
        );
        let e = gaussian_expect_theta(&p, &c);
        let got = e.evaluate(&torus, &FieldConfig::zero(&torus, 1));
        // E phi^4 = 3 C(x,x)^2, three pairings of four legs
        let want = 3.0 * c.value(x, x).powi(2);
        let val = got.get(&(Sector::Bulk, 0)).copied().unwrap_or(0.0);
        println!("E[phi({x})^4] = {val}   hand count = {want}");
    }

    // a mixed moment E phi(0)^2 phi(1)^2 = C00 C11 + 2 C01^2
    let mut p = Poly::zero(caps);
    p.add_term(
        Term {
            factors: vec![
                Factor::phi(0, 0),
                Factor::phi(0, 0),
                Factor::phi(1, 0),
                Factor::phi(1, 0),
            ],
            sector: Sector::Bulk,
            grade: 0,
        },
        1.0,
    );
    let got = gaussian_expect_theta(&p, &c).evaluate(&torus, &FieldConfig::zero(&torus, 1));
    let want = c.value(0, 0) * c.value(1, 1) + 2.0 * c.value(0, 1).powi(2);
    println!(
        "E[phi(0)^2 phi(1)^2] = {}   hand count = {want}",
        got.get(&(Sector::Bulk, 0)).copied().unwrap_or(0.0)
    );
    Ok(())
}
