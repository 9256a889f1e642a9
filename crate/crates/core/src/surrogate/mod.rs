//! Offline learning of feedback laws from open-loop or Riccati labels.

pub mod dataset;
pub mod model;
pub mod network;
pub mod train;

pub use dataset::{generate_dataset, sample_states, Dataset, Labeler, LabelerKind, SampleBox, TrainingSample};
pub use model::{control_from_value_model, ModelKind, Structure, SurrogateModel};
pub use network::{Activation, Network, NetworkSpec};
pub use train::{prmse, train, TrainConfig, TrainReport};

use std::time::Instant;

use crate::ensemble::{simulate, EnsembleState, MomentTrace, SimParams, Trajectory};
use crate::Result;

/// Receding-horizon rollout driven by a learned model.
#[derive(Debug, Clone)]
pub struct LearnedRollout {
    pub trajectory: Trajectory,
    pub moments: MomentTrace,
    pub wall_seconds: f64,
}

pub fn rollout_learned(state0: &EnsembleState, model: &SurrogateModel, params: &SimParams) -> Result<LearnedRollout> {
    let start = Instant::now();
    let (trajectory, moments) = simulate(state0, |s| model.control(s, params.gamma), params)?;
    Ok(LearnedRollout {
        trajectory,
        moments,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::simulate_uncontrolled;

    #[test]
    fn zero_network_rollout_is_uncontrolled() {
        let states = sample_states(1, 5, 2, SampleBox::UNIT, SampleBox::UNIT, 3).unwrap();
        let s0 = crate::sdre::unflatten_state(&states[0], 5, 2, 0.0).unwrap();
        let params = SimParams::new(0.1, 1.0, 0.01);
        let (free, _) = simulate_uncontrolled(&s0, &params).unwrap();
        for kind in [ModelKind::Control, ModelKind::Value] {
            for structure in [Structure::Plain, Structure::Anchored] {
                let out = if kind == ModelKind::Value && structure == Structure::Plain { 1 } else { 10 };
                let net = Network::zeros(NetworkSpec::uniform(20, vec![4], out, Activation::Tanh)).unwrap();
                let model = SurrogateModel::from_network(kind, structure, 5, 2, net).unwrap();
                let r = rollout_learned(&s0, &model, &params).unwrap();
                assert_eq!(r.trajectory.states, free.states);
                assert!(r.wall_seconds >= 0.0);
            }
        }
    }
}
