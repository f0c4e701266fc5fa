//! The reverse-mode tape, Adam, and central-difference gradient checks.

use quadfit::diffopt::{check_gradient, grad, Adam};
use quadfit::gradsuite::run_suite;

fn main() -> quadfit::Result<()> {
    // f(x) = sum(sin(x) * x^2)
    let f = |x: &[f64]| grad(x, |_, v| Ok((v.sin() * v.square()).sum()));
    let x = [0.3, -1.2, 2.0];
    let (value, g) = f(&x)?;
    println!("f = {value:.6}, grad = {g:?}");
    println!("check: {:?}", check_gradient(f, &x, 1e-5, 1e-4)?);

    // Adam on a quadratic bowl.
    let mut p = vec![3.0, -2.0];
    let mut opt = Adam::new(2, 0.1);
    for _ in 0..300 {
        let (_, g) = grad(&p, |tape, v| Ok((v - tape.constant(vec![1.0, 1.0], 2, 1)).square().sum()))?;
        opt.step(&mut p, &g);
    }
    println!("adam minimum near (1, 1): {p:?}");

    for e in run_suite(3, 0)? {
        println!("{:<20} max rel err {:.2e} (tol {:.0e})", e.op, e.max_rel_err, e.tol);
    }
    Ok(())
}
