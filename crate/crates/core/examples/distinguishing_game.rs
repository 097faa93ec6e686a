//! Monte Carlo distinguishing game against the Bayes-optimal adversary,
//! compared with the l1 bound and the exact product-form distance.

use remo::privacy::{game_grid, run_distinguishing_game, tv_exact_small, tv_product, GameConfig};

fn main() -> remo::Result<()> {
    println!("ratio  empirical  optimal  bound");
    for r in game_grid(&[0.0, 0.1, 0.5, 1.0, 2.0], 4, 1.0, 200_000, 9)? {
        println!("{:<5}  {:.4}     {:.4}   {:.4}", r.norm_ratio, r.empirical, r.optimal, r.bound);
    }
    let scalar = run_distinguishing_game(&GameConfig { e1: vec![0.0], e2: vec![1.0], lambda: 10.0, trials: 1_000_000, seed: 1 })?;
    println!("scalar, lambda 10, offset 1: {:.4} +- {:.4} (analytic 0.55)", scalar.empirical, scalar.stderr);

    let (z, d) = ([0.0, 0.0], [0.5, 0.5]);
    println!("2-d offset (1/2, 1/2): grid TV {:.4}, product form {:.4}", tv_exact_small(&z, &d, 1.0, 400)?, tv_product(&z, &d, 1.0));
    Ok(())
}
