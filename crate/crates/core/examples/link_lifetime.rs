//! Expected session life of a link as it ages. Link lifetimes are
//! log-normal; a link that has already lasted `elapsed` seconds is expected
//! to last `session_life` seconds in total.

use cmanet::linkmodel::{remaining_life, session_life, LinkLifetime};
use cmanet::numerics::LogNormalParams;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = LogNormalParams::new(60f64.ln(), 0.6)?;
    println!("median life {:.1} s", params.median());
    println!("elapsed [s],survival,session life [s],remaining [s]");
    for elapsed in [0.0, 10.0, 30.0, 60.0, 120.0, 240.0, 480.0] {
        let link = LinkLifetime::new(params, elapsed)?;
        println!(
            "{elapsed},{:.6},{:.3},{:.3}",
            link.survival_probability(),
            session_life(&link)?,
            remaining_life(&link)?
        );
    }

    // far enough into the tail the survival probability is not representable
    let ancient = LinkLifetime::new(LogNormalParams::new(0.0, 0.2)?, 1e6)?;
    match session_life(&ancient) {
        Ok(v) => println!("unexpected value {v}"),
        Err(e) => println!("{e}"),
    }
    Ok(())
}
