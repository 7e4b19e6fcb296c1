//! Fixtures shared by the benchmarks.

use lumina_core::{init_variables, make_set, DecompVariables, OptimConfig, SceneSpec, SyntheticSet};

/// Eight-view synthetic set of side `size` with the default scene.
pub fn fixture(size: usize, seed: u64) -> SyntheticSet {
    let scene = SceneSpec::sample(seed, 3).expect("valid palette size");
    make_set(&scene, 8, 5, seed, size).expect("valid fixture")
}

pub fn fixture_variables(set: &SyntheticSet, cfg: &OptimConfig) -> DecompVariables {
    init_variables(&set.set, cfg).expect("valid config")
}
