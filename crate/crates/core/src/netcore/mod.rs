//! Parameterized denoiser and router networks.

pub mod checkpoint;
pub mod layout;
pub mod network;
pub mod optim;

pub use checkpoint::{Checkpoint, ModelKind};
pub use layout::{Layout, TensorSpec};
pub use network::{ArchConfig, BackwardScratch, ForwardCache, Network};
pub use optim::{Adam, AdamConfig, GradientTape};

use std::path::Path;

use crate::error::{Error, Result};
use crate::schedules::Schedule;

/// Training objective of an expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    /// Predicts the added noise ε.
    Epsilon,
    /// Predicts the flow-matching velocity ε − x₀ on the linear path.
    Velocity,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Epsilon => "ddpm",
            Objective::Velocity => "fm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ddpm" | "eps" | "epsilon" => Ok(Objective::Epsilon),
            "fm" | "velocity" | "flow" => Ok(Objective::Velocity),
            other => Err(Error::Config(format!("unknown objective `{other}` (expected ddpm or fm)"))),
        }
    }
}

/// Which loss a batch is differentiated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean squared error per element, averaged over the batch.
    Mse,
    /// Softmax cross-entropy against an integer label.
    CrossEntropy,
    /// Constant zero.
    Zero,
}

/// A denoiser with an immutable objective tag and its own schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    objective: Objective,
    schedule: Schedule,
    network: Network,
}

impl ExpertModel {
    pub fn new(objective: Objective, schedule: Schedule, arch: ArchConfig, seed: u64) -> Result<Self> {
        if arch.input_dim != arch.output_dim {
            return Err(Error::Shape("expert output dimension must equal data dimension".into()));
        }
        Ok(Self { objective, schedule, network: Network::new(arch, seed)? })
    }

    pub fn from_network(objective: Objective, schedule: Schedule, network: Network) -> Result<Self> {
        let arch = network.arch();
        if arch.input_dim != arch.output_dim {
            return Err(Error::Shape("expert output dimension must equal data dimension".into()));
        }
        Ok(Self { objective, schedule, network })
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    pub fn data_dim(&self) -> usize {
        self.network.arch().input_dim
    }

    pub fn cond_count(&self) -> usize {
        self.network.arch().cond_count
    }

    /// ε̂ or v̂ from the EMA weights.
    pub fn predict(&self, x: &[f64], t: f64, cond: Option<usize>) -> Result<Vec<f64>> {
        self.network.forward(x, t, cond, true)
    }

    pub fn forward(&self, x: &[f64], t: f64, cond: Option<usize>, use_ema: bool) -> Result<Vec<f64>> {
        self.network.forward(x, t, cond, use_ema)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint { kind: ModelKind::Expert(self.objective), schedule: self.schedule.clone(), network: self.network.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::load(path)?.into_expert()
    }
}

/// Classifier over experts producing logits of `p(k | x_t, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterModel {
    network: Network,
}

impl RouterModel {
    pub fn new(data_dim: usize, experts: usize, hidden: usize, blocks: usize, seed: u64) -> Result<Self> {
        Ok(Self { network: Network::new(ArchConfig::router(data_dim, experts, hidden, blocks), seed)? })
    }

    pub fn from_network(network: Network) -> Self {
        Self { network }
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    pub fn num_experts(&self) -> usize {
        self.network.arch().output_dim
    }

    pub fn data_dim(&self) -> usize {
        self.network.arch().input_dim
    }

    /// Logits from the live weights.
    pub fn logits(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.network.forward(x, t, None, false)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint { kind: ModelKind::Router, schedule: Schedule::Linear, network: self.network.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::load(path)?.into_router()
    }
}

/// Layout of the timestep-conditioning modulation path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaLnVariant {
    /// One shared `d → 6d` map plus a per-block `6d` embedding.
    Single,
    /// An independent `d → 6d` map in every block.
    PerBlock,
}

/// Parameters of the conditioning modulation path for `blocks` blocks of width `d`.
pub fn count_parameters(blocks: usize, d: usize, variant: AdaLnVariant) -> u64 {
    let (l, d) = (blocks as u64, d as u64);
    let map = 6 * d * d + 6 * d;
    match variant {
        AdaLnVariant::Single => map + 6 * l * d,
        AdaLnVariant::PerBlock => l * map,
    }
}

/// Total parameters of a network with the given variant of the modulation path.
pub fn total_parameters(arch: &ArchConfig, variant: AdaLnVariant) -> u64 {
    let (d, h) = (arch.hidden as u64, arch.mlp_hidden as u64);
    let (din, dout, c, l) = (arch.input_dim as u64, arch.output_dim as u64, arch.cond_count as u64, arch.blocks as u64);
    let time = 2 * (d * d + d);
    let cond = c * d + d;
    let input = d * din + d;
    let per_block = (d * d + d) + (h * d + h) + (d * h + d);
    let head = dout * d + dout;
    time + cond + input + l * per_block + head + count_parameters(arch.blocks, arch.hidden, variant)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_block_differs_by_embedding_table() {
        for d in [1, 4, 32] {
            let s = count_parameters(1, d, AdaLnVariant::Single);
            let p = count_parameters(1, d, AdaLnVariant::PerBlock);
            assert_eq!(s, p + 6 * d as u64);
        }
    }

    #[test]
    fn large_shape_savings() {
        let s = count_parameters(28, 1152, AdaLnVariant::Single);
        let p = count_parameters(28, 1152, AdaLnVariant::PerBlock);
        // 6·1152² + 6·1152 + 6·28·1152 and 28·(6·1152² + 6·1152)
        assert_eq!(s, 7_962_624 + 6_912 + 193_536);
        assert_eq!(p, 28 * (7_962_624 + 6_912));
        assert!(1.0 - s as f64 / p as f64 >= 0.25);
    }

    #[test]
    fn hand_counted_unit_width() {
        // d = 1, L = 2: shared map 6 weights + 6 biases, table 2·6 = 24;
        // per-block maps 2·(6 + 6) = 24.
        assert_eq!(count_parameters(2, 1, AdaLnVariant::Single), 24);
        assert_eq!(count_parameters(2, 1, AdaLnVariant::PerBlock), 24);
        // Whole network, data dim 1, no labels, mlp width 1:
        // time 2·(1+1)=4, null 1, input 2, blocks 2·(2+2+2)=12, head 2, modulation 24.
        let arch = ArchConfig { input_dim: 1, output_dim: 1, hidden: 1, blocks: 2, mlp_hidden: 1, cond_count: 0 };
        assert_eq!(total_parameters(&arch, AdaLnVariant::Single), 45);
        let net = Network::new(arch, 0).unwrap();
        assert_eq!(net.layout().len() as u64, 45);
    }

    #[test]
    fn single_smaller_for_multiple_blocks() {
        for l in 2..=32 {
            for d in [8, 16, 64] {
                assert!(count_parameters(l, d, AdaLnVariant::Single) < count_parameters(l, d, AdaLnVariant::PerBlock));
            }
        }
    }

    #[test]
    fn layout_matches_closed_form() {
        let arch = ArchConfig::expert(3, 16, 4, 5);
        let net = Network::new(arch, 1).unwrap();
        assert_eq!(net.layout().len() as u64, total_parameters(&arch, AdaLnVariant::Single));
    }

    #[test]
    fn objective_names_round_trip() {
        for o in [Objective::Epsilon, Objective::Velocity] {
            assert_eq!(Objective::parse(o.name()).unwrap(), o);
        }
        assert!(Objective::parse("x0").is_err());
    }
}
