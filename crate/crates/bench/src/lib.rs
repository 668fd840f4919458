//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segnas::policy::Trajectory;
use segnas::{Controller, ControllerConfig, Genotype, SpaceConfig};

/// `count` genotypes sampled from an untrained controller.
pub fn sample_genotypes(space: SpaceConfig, count: usize, seed: u64) -> Vec<Genotype> {
    let controller = Controller::new(space, ControllerConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| controller.sample(&mut rng).genotype).collect()
}

/// A batch of sampled trajectories with uniform random rewards and
/// zero-mean advantages, ready for a policy update.
pub fn scored_batch(controller: &Controller, size: usize, seed: u64) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch: Vec<Trajectory> = (0..size).map(|_| controller.sample(&mut rng)).collect();
    let rewards: Vec<f64> = (0..size).map(|_| rng.gen_range(0.3..0.9)).collect();
    let mean = rewards.iter().sum::<f64>() / size as f64;
    for (t, r) in batch.iter_mut().zip(rewards) {
        t.reward = Some(r);
        t.advantage = r - mean;
    }
    batch
}
