//! The special functions behind the link model: erf, the first-order Marcum
//! Q function and the connectivity probability built on it.

use cmanet::linkmodel::{connectivity_prob, ConnectivityArgs};
use cmanet::numerics::{erf, erfc, marcum_q1, MarcumArgs};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("x,erf,erfc");
    for x in [0.0, 0.25, 0.5, 1.0, 2.0, 3.0, 5.0] {
        println!("{x},{:.16},{:.6e}", erf(x), erfc(x));
    }

    println!("\na,b,marcum_q1");
    for (a, b) in [(0.0, 1.0), (1.0, 1.0), (2.0, 3.0), (4.0, 2.0), (10.0, 12.0)] {
        println!("{a},{b},{:.12}", marcum_q1(MarcumArgs::new(a, b)?));
    }

    // more devices per unit of the spreading factor means a better chance of
    // a path between any two of them
    println!("\ndevices,sigma,alpha,p_connected");
    for n in [2, 5, 10, 20, 50] {
        let args = ConnectivityArgs::new(n, 1.0, 10.0)?;
        println!("{n},1,10,{:.6}", connectivity_prob(args));
    }
    Ok(())
}
