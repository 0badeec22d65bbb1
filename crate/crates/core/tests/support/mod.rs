#![allow(dead_code)]

pub mod bpe_oracle;
pub mod gradcheck;
pub mod ops;
pub mod world;

use modmt::tensor::Element;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Worst relative error per operation over `instances` random instances.
pub fn gradient_suite<T: Element>(instances: usize, h: f64, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ops::suite::<T>()
        .into_iter()
        .map(|case| {
            let mut worst = 0.0f64;
            for i in 0..instances {
                let inst = (case.make)(&mut rng);
                let out = gradcheck::check(&inst.inputs, &inst.op, h, seed ^ i as u64)
                    .unwrap_or_else(|e| panic!("{}: {e}", case.name));
                worst = worst.max(out.worst);
            }
            (case.name, worst)
        })
        .collect()
}

/// Worst relative error per operation of the single-precision backward pass
/// against double-precision central differences at the same inputs.
pub fn mixed_gradient_suite(instances: usize, h: f64, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ops::suite::<f32>()
        .into_iter()
        .zip(ops::suite::<f64>())
        .map(|(single, double)| {
            let mut worst = 0.0f64;
            for i in 0..instances {
                let mut twin = rng.clone();
                let lo = (single.make)(&mut rng);
                let mut hi = (double.make)(&mut twin);
                for (a, b) in lo.inputs.iter().zip(hi.inputs.iter_mut()) {
                    for (x, y) in a.data.iter().zip(b.data.iter_mut()) {
                        let close = (*x as f64 - *y).abs() <= 1e-6 * y.abs().max(1.0);
                        assert!(close, "{}: instances diverged", single.name);
                        *y = *x as f64;
                    }
                }
                let s = seed ^ i as u64;
                let a = gradcheck::analytic(&lo.inputs, &lo.op, s)
                    .unwrap_or_else(|e| panic!("{}: {e}", single.name));
                let n = gradcheck::numeric(&hi.inputs, &hi.op, h, s)
                    .unwrap_or_else(|e| panic!("{}: {e}", double.name));
                worst = worst.max(gradcheck::compare(&a, &n).worst);
            }
            (single.name, worst)
        })
        .collect()
}
