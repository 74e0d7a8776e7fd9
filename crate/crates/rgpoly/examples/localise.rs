//! Localise a random field polynomial onto a block and show what survives.
//!
//! The operator keeps the expanding directions (constants, mass terms,
//! gradient-squared terms and so on up to the dimension cutoff) and kills
//! everything irrelevant, and applying it twice changes nothing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rgpoly::fieldalg::{random_poly, Caps};
use rgpoly::geometry::TorusLattice;
use rgpoly::localisation::{anchored_coords, build_family, loc};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let torus = TorusLattice::new(3, 2, 2)?;
    let caps = Caps::standard(3);
    let coords = anchored_coords(&torus, 0);
    let block = torus.block_sites(1, 0);
    let family = build_family(&torus, &coords, caps, 1, 0.5, 2.0, &block)?;
    println!("localising family has {} generators:", family.indices.len());
    for idx in &family.indices {
        println!("  {idx:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = random_poly(&mut rng, &torus, caps, 1, 8, 3);
    let lf = loc(&torus, &coords, &family, &f, &block)?;
    let llf = loc(&torus, &coords, &family, &lf, &block)?;

    println!("\ninput terms:      {}", f.num_terms());
    println!("localised terms:  {}", lf.num_terms());
    println!("idempotence gap:  {:.3e}", llf.max_coef_diff(&lf));

    let rest = loc(&torus, &coords, &family, &f.sub(&lf), &block)?;
    println!("complement leak:  {:.3e}", rest.max_abs_coef());
    Ok(())
}
