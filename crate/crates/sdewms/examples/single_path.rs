//! One coupled trajectory of each scheme on the switching cubic-drift model,
//! plus the blow-up behavior of the untamed baseline.
//!
//! ```text
//! cargo run --release --example single_path
//! ```

use sdewms::chain::sample_chain_path;
use sdewms::model::m1;
use sdewms::noise::generate_brownian;
use sdewms::scheme::{simulate, SchemeId, SimOptions};
use sdewms::seed::{stream, StreamRole};

fn main() {
    let (model, gen) = m1();
    let n = 64;
    let mut chain_rng = stream(12, 0, StreamRole::Chain);
    let chain = sample_chain_path(&gen, 0, 1.0, &mut chain_rng).unwrap();
    println!("chain jumps at: {:?}", chain.jump_times());

    let mut brownian_rng = stream(12, 0, StreamRole::Brownian);
    let mut noise = generate_brownian(1, 1.0, n * 16, &mut brownian_rng).unwrap();
    let opts = SimOptions {
        max_rate: gen.q_max(),
        ..SimOptions::default()
    };

    println!(
        "\n{:>6} {:>12} {:>12} {:>12} {:>6}",
        "t", "milstein", "tamed_em", "em", "state"
    );
    let mut rows = Vec::new();
    for scheme in [SchemeId::TamedMilstein, SchemeId::TamedEm, SchemeId::Em] {
        let mut bridge_rng = stream(12, 0, StreamRole::Bridge);
        rows.push(
            simulate(
                &model,
                scheme,
                n,
                &chain,
                &mut noise,
                &opts,
                &mut bridge_rng,
            )
            .unwrap(),
        );
    }
    for k in (0..=n).step_by(8) {
        println!(
            "{:>6.3} {:>12.6} {:>12.6} {:>12.6} {:>6}",
            rows[0].times[k],
            rows[0].values[k][0],
            rows[1].values[k][0],
            rows[2].values[k][0],
            rows[0].chain_states[k]
        );
    }

    // The untamed scheme from x0 = 10 overshoots and blows up; the tamed
    // schemes stay finite from the same start.
    let far = model.with_initial_point(vec![10.0]);
    let mut bridge_rng = stream(12, 0, StreamRole::Bridge);
    let em = simulate(
        &far,
        SchemeId::Em,
        16,
        &chain,
        &mut noise,
        &opts,
        &mut bridge_rng,
    )
    .unwrap();
    let mut bridge_rng = stream(12, 0, StreamRole::Bridge);
    let tamed = simulate(
        &far,
        SchemeId::TamedMilstein,
        16,
        &chain,
        &mut noise,
        &opts,
        &mut bridge_rng,
    )
    .unwrap();
    println!(
        "\nfrom x0 = 10: plain EM blew up at step {:?}; tamed Milstein blew up: {:?}",
        em.blew_up, tamed.blew_up
    );
}
