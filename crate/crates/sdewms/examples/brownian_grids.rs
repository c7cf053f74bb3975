//! Nested Brownian grids: coarsening, bridge evaluation at off-grid times,
//! and iterated-integral approximation quality.
//!
//! ```text
//! cargo run --release --example brownian_grids
//! ```

use sdewms::noise::{generate_brownian, iterated_integrals, IteratedMode};
use sdewms::seed::{stream, StreamRole};

fn main() {
    let mut rng = stream(7, 0, StreamRole::Brownian);
    let mut grid = generate_brownian(2, 1.0, 64, &mut rng).unwrap();
    println!("fine grid: {} steps of {}", grid.n_fine(), grid.fine_step());

    // Coarse increments are read off the same stored path.
    let coarse = grid.coarse_increment(4, 0).unwrap();
    println!(
        "coarse step 0 of 4: dW = ({:.5}, {:.5})",
        coarse[0], coarse[1]
    );
    let w = grid.value_at_index(16);
    println!("path value at t = 0.25: ({:.5}, {:.5})", w[0], w[1]);

    // Bridge evaluation between grid points; repeated queries are cached.
    let mut bridge = stream(7, 0, StreamRole::Bridge);
    let t = 0.2371;
    let v1 = grid.value_at(t, &mut bridge).unwrap();
    let v2 = grid.value_at(t, &mut bridge).unwrap();
    println!(
        "bridge value at t = {t}: ({:.5}, {:.5}), cached on repeat: {}",
        v1[0],
        v1[1],
        v1 == v2
    );

    // Diagonal iterated integrals are exact; the off-diagonal fine_sum
    // approximation symmetrizes to dW0 dW1 up to a defect that shrinks like
    // 1/sqrt(ratio).
    let it = iterated_integrals(&grid, 4, 0, IteratedMode::FineSum).unwrap();
    let h = 0.25;
    println!(
        "\nI[0][0] = {:.6} vs closed form {:.6}",
        it.get(0, 0),
        (coarse[0] * coarse[0] - h) / 2.0
    );
    println!(
        "I[0][1] + I[1][0] - dW0 dW1 = {:.3e} (reported defect {:.3e})",
        it.get(0, 1) + it.get(1, 0) - coarse[0] * coarse[1],
        it.sym_residual_max
    );

    println!("\nsymmetrization defect RMS over 1000 steps:");
    for ratio in [4usize, 16, 64] {
        let mut rng = stream(8, ratio as u64, StreamRole::Brownian);
        let g = generate_brownian(2, 1.0, 1000 * ratio, &mut rng).unwrap();
        let mut sum_sq = 0.0;
        for k in 0..1000 {
            let it = iterated_integrals(&g, 1000, k, IteratedMode::FineSum).unwrap();
            sum_sq += it.sym_residual_max * it.sym_residual_max;
        }
        println!("  ratio {ratio:>3}: rms = {:.4e}", (sum_sq / 1000.0).sqrt());
    }
}
