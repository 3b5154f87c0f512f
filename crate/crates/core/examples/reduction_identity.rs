//! Adam with β1 = β2 = ε = 0 and no bias correction, RMSprop with β2 = ε = 0,
//! and sign descent walk the same path on a random quadratic.

use optlab::optim::{OptimizerConfig, OptimizerId};
use optlab::rng::{RngStream, StreamId};

fn main() {
    let mut rng = RngStream::new(1, StreamId::Fixture);
    let dim = 8;
    let curv: Vec<f64> = (0..dim).map(|_| rng.uniform(0.1, 10.0)).collect();
    let centre: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, 1.0)).collect();

    let configs = [
        OptimizerConfig { beta1: 0.0, beta2: 0.0, epsilon: 0.0, bias_correction: false, ..OptimizerConfig::new(OptimizerId::Adam) },
        OptimizerConfig { beta2: 0.0, epsilon: 0.0, ..OptimizerConfig::new(OptimizerId::Rmsprop) },
        OptimizerConfig { beta: 0.0, ..OptimizerConfig::new(OptimizerId::Sign) },
    ];
    let paths: Vec<Vec<Vec<f64>>> = configs
        .iter()
        .map(|c| {
            let mut opt = c.build(0.05, dim);
            let mut x = vec![2.0; dim];
            (0..20)
                .map(|_| {
                    let g: Vec<f64> = x.iter().zip(&curv).zip(&centre).map(|((x, h), c)| h * (x - c)).collect();
                    opt.step(&mut x, &g).unwrap();
                    x.clone()
                })
                .collect()
        })
        .collect();

    for (t, ((a, r), s)) in paths[0].iter().zip(&paths[1]).zip(&paths[2]).enumerate() {
        let dev = a.iter().zip(r).zip(s).map(|((a, r), s)| (a - s).abs().max((r - s).abs())).fold(0.0, f64::max);
        println!("step {:2}  x0 = {:+.4}  max deviation {dev:e}", t + 1, s[0]);
    }
}
