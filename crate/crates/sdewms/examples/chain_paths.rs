//! Exact continuous-time Markov chain simulation: holding times, occupation
//! fractions, and the per-step jump-count bounds.
//!
//! ```text
//! cargo run --release --example chain_paths
//! ```

use sdewms::chain::{jump_count_statistics, sample_chain_path, GeneratorMatrix};
use sdewms::seed::{stream, StreamRole};

fn main() {
    let gen = GeneratorMatrix::validate(vec![vec![-2.0, 2.0], vec![3.0, -3.0]]).unwrap();
    println!("generator q_max = {}", gen.q_max());

    let mut rng = stream(2024, 0, StreamRole::Chain);
    let path = sample_chain_path(&gen, 0, 10.0, &mut rng).unwrap();
    println!(
        "\none path on [0, 10], {} jumps; first few:",
        path.num_jumps()
    );
    for (t, s) in path
        .jump_times()
        .iter()
        .zip(path.post_jump_states())
        .take(6)
    {
        println!("  t = {t:.4} -> state {s}");
    }

    // Long-run occupation vs the stationary distribution pi Q = 0:
    // pi = (3/5, 2/5) for this generator.
    let horizon = 5000.0;
    let long = sample_chain_path(&gen, 0, horizon, &mut rng).unwrap();
    let occ = long.occupation_times(2, horizon).unwrap();
    println!(
        "\nlong-run fraction in state 0: {:.4} (stationary: 0.6)",
        occ[0] / horizon
    );

    // Single-step jump statistics against the tail bounds P(N >= k) <= (qh)^k.
    println!(
        "\n{:<8} {:>12} {:>12} {:>12} {:>12} {:>8}",
        "h", "P(N>=1)", "qh", "P(N>=2)", "(qh)^2", "E[N^2]"
    );
    for k in 4..=9 {
        let h = 0.5_f64.powi(k);
        let mut rng = stream(9, k as u64, StreamRole::Chain);
        let stats = jump_count_statistics(&gen, h, 100_000, &mut rng).unwrap();
        let qh = gen.q_max() * h;
        println!(
            "{:<8.5} {:>12.5e} {:>12.5e} {:>12.5e} {:>12.5e} {:>8.4}",
            h,
            stats.p_ge1,
            qh,
            stats.p_ge2,
            qh * qh,
            stats.mean_square
        );
    }
}
