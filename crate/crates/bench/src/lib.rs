//! Fixtures shared by the benchmarks.

use cdgan_core::{BinaryMap, EnergyMap, HyperImage, Rng};

pub fn random_cube(bands: usize, rows: usize, cols: usize, seed: u64) -> HyperImage {
    let mut rng = Rng::new(seed);
    HyperImage::from_fn(bands, rows, cols, |_, _, _| rng.uniform())
}

pub fn random_energy(rows: usize, cols: usize, seed: u64) -> (EnergyMap, BinaryMap) {
    let mut rng = Rng::new(seed);
    let truth: Vec<u8> = (0..rows * cols).map(|_| u8::from(rng.uniform() < 0.1)).collect();
    let values = truth.iter().map(|&t| rng.uniform() + f64::from(t)).collect();
    (
        EnergyMap::new(rows, cols, values).expect("finite"),
        BinaryMap::from_vec(rows, cols, truth).expect("binary"),
    )
}
