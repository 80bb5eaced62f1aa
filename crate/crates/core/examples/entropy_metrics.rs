//! Entropy and transmission metrics on small hand-made inputs.

use cmanet::metrics::{
    chain_entropy, info_probability, stationary_distribution, symbol_entropy, transmission_index, LogBase,
    SymbolDistribution, TransitionMatrix, TransmissionParams,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let link = TransitionMatrix::new(vec![vec![0.9, 0.1], vec![0.5, 0.5]])?;
    let pi = stationary_distribution(&link)?;
    println!("stationary distribution {pi:?}");
    println!("chain entropy {:.6} bits/step", chain_entropy(&link, &pi, LogBase::Two)?);
    println!("chain entropy {:.6} trits/step", chain_entropy(&link, &pi, LogBase::Three)?);

    let uniform = vec![1.0 / 3.0; 3];
    let dist = SymbolDistribution::new(uniform.clone(), uniform.clone(), uniform)?;
    println!("uniform three-axis symbol entropy {} trits", symbol_entropy(&dist, 1.0));

    // payload sizes in bits for text, image, voice and video
    let p = info_probability(&[1e6, 4e6, 2e6, 8e6])?;
    println!("information probabilities {p:?}");

    println!("devices,epsilon_k,score");
    for n_devices in [5, 10, 50] {
        for epsilon_k in [0.1, 0.5, 1.0] {
            let params = TransmissionParams { epsilon_k, n_devices, info_units: 300, interval: (0.0, 300.0) };
            println!("{n_devices},{epsilon_k},{:.3}", transmission_index(&params)?);
        }
    }
    Ok(())
}
