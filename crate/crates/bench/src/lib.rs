//! Fixtures shared by the benchmarks.

use hnet_core::experiments::{generate_dataset, DatasetSpec};
use hnet_core::loss::{FlowDataset, Sampling};
use hnet_core::{Activation, AnalyticSystem, NetArchitecture, NetParameters};

/// `n` pendulum pairs from the standard training box at `h = 0.1`.
pub fn pendulum_dataset(n: usize, seed: u64) -> FlowDataset {
    let spec = DatasetSpec {
        sampling: Sampling::Region {
            bounds: vec![
                (-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2),
                (-std::f64::consts::SQRT_2, std::f64::consts::SQRT_2),
            ],
        },
        size: n,
        h: 0.1,
    };
    generate_dataset(AnalyticSystem::Pendulum, &spec, 100, seed).expect("pendulum dataset")
}

/// A two-hidden-layer tanh net on the pendulum phase space.
pub fn pendulum_net(width: usize, seed: u64) -> (NetArchitecture, NetParameters) {
    let arch = NetArchitecture::new(2, vec![width, width], Activation::Tanh).expect("architecture");
    let params = NetParameters::init(&arch, seed);
    (arch, params)
}
