//! Build a hierarchical finite-range decomposition and print a per-scale
//! profile: the scaling constant of each shell, the decay of the diagonal,
//! and the validation report against the exact total covariance.

use rgpoly::covariance::{hierarchical_frd, validate_frd};
use rgpoly::geometry::TorusLattice;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let d = 3;
    let l = 2;
    let n_scales = 5;
    let eta = 0.0;
    let torus = TorusLattice::new(d, l, n_scales)?;
    println!(
        "torus: d={d} L={l} N={n_scales}, {} sites, side {}",
        torus.volume(),
        torus.side()
    );

    let decomp = hierarchical_frd(&torus, eta, 0.0);
    println!("\n  j   Gamma_j(0,0)       ratio");
    let mut prev = None;
    for j in 1..=n_scales {
        let g = decomp.gamma(j);
        let diag = g.value(0, 0);
        match prev {
            Some(p) => println!("{j:>3}   {diag:<16.10} {:.6}", diag / p),
            None => println!("{j:>3}   {diag:<16.10}"),
        }
        prev = Some(diag);
    }
    println!("expected ratio L^(2-d-eta) = {:.6}", (l as f64).powf(2.0 - d as f64 - eta));

    let total = decomp.total()?;
    let report = validate_frd(&decomp, &total)?;
    println!("\nreconstruction residual: {:.3e}", report.reconstruction_residual);
    println!("range violations:        {}", report.range_violations);
    println!("fitted scaling constants per scale: {:?}", report.fitted_c_by_scale[0]);
    Ok(())
}
