//! One device on a Gauss-Markov path inside a 200 m square, printed as CSV.
//!
//!     cargo run --example mobility_trace -- [lambda] [steps]

use cmanet::mobility::{gm_step, integrate_position, Arena, MobilityParams, MobilityState, Noise, Position};
use cmanet::rng;
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let lambda: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.75);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(60);

    let arena = Arena::new(200.0, 200.0)?;
    let params = MobilityParams {
        lambda,
        mean_speed: 8.0,
        mean_direction: 0.6,
        speed_sigma: 2.0,
        direction_sigma: 0.4,
        max_speed: 16.0,
    };
    params.validate()?;
    let mut rng = rng::stream(1, "d000", "mobility");
    let mut state = MobilityState { position: Position::new(100.0, 100.0), speed: 8.0, direction: 0.6 };

    println!("t [s],x [m],y [m],speed [m/s],direction [rad]");
    for t in 0..=steps {
        let p = state.position;
        println!("{t},{:.3},{:.3},{:.3},{:.4}", p.x, p.y, state.speed, state.direction);
        let noise = Noise { speed: rng.sample(StandardNormal), direction: rng.sample(StandardNormal) };
        state = integrate_position(gm_step(state, &params, noise), 1.0, &arena);
    }
    Ok(())
}
