//! Sampled verification of the structural assumptions: empirical constants
//! on growing boxes, the commutativity residual, and the finite-difference
//! Jacobian guard.
//!
//! ```text
//! cargo run --release --example validate_model
//! ```

use sdewms::model::{
    check_assumptions, check_commutativity, finite_difference_jacobian_check, m1, m3, SampleBox,
    ASSUMPTION_NAMES,
};
use sdewms::seed::{stream, StreamRole};

fn main() {
    let mut rng = stream(5, 0, StreamRole::Chain);
    let n_list = [16usize, 512];

    for (model, _) in [m1(), m3()] {
        println!(
            "== model {} (d = {}, m = {}) ==",
            model.name, model.dim_state, model.dim_noise
        );
        let small = check_assumptions(
            &model,
            &SampleBox::centered(model.dim_state, 2.0),
            5000,
            &n_list,
            &mut rng,
        );
        let large = check_assumptions(
            &model,
            &SampleBox::centered(model.dim_state, 4.0),
            5000,
            &n_list,
            &mut rng,
        );
        let flagged = large.diverging_versus(&small, 2.0);
        let pairs = [
            (small.one_sided_lipschitz, large.one_sided_lipschitz),
            (small.drift_jacobian_growth, large.drift_jacobian_growth),
            (
                small.diffusion_jacobian_lipschitz,
                large.diffusion_jacobian_lipschitz,
            ),
            (small.taming_inner_product, large.taming_inner_product),
            (small.taming_root_n_growth, large.taming_root_n_growth),
            (
                small.taming_polynomial_growth,
                large.taming_polynomial_growth,
            ),
            (small.taming_closeness, large.taming_closeness),
        ];
        for (name, (s, l)) in ASSUMPTION_NAMES.iter().zip(pairs) {
            println!(
                "  {name:<28} {s:>10.4} -> {l:>10.4}  {}",
                if flagged.contains(name) {
                    "diverging!"
                } else {
                    "stable"
                }
            );
        }
        let residual = check_commutativity(
            &model,
            &SampleBox::centered(model.dim_state, 2.0),
            2000,
            &mut rng,
        );
        println!(
            "  commutativity residual: {residual:.4e} (declared: {})",
            model.commutative
        );
        let x = SampleBox::centered(model.dim_state, 2.0).sample(&mut rng);
        let err = finite_difference_jacobian_check(&model, &x, 0, 1e-5);
        println!("  jacobian vs finite differences: {err:.2e}\n");
    }
}
