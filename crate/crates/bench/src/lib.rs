//! Fixtures shared by the benchmarks: untrained models at the default toy
//! geometry, moefied and fitted with freshly initialised routers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scalemoe::moefy::moefy_model;
use scalemoe::sparsify::relufy;
use scalemoe::{ClusterConfig, MoeLayer, ModelConfig, NextScaleModel, RouterNet, Tensor};

pub const ROUTER_WIDTH: usize = 32;

pub fn dense_fixture(seed: u64) -> NextScaleModel {
    NextScaleModel::init(&ModelConfig::default(), seed).expect("default config is valid")
}

/// ReLU model split into `num_experts` experts per block, each block with a
/// router.
pub fn routed_fixture(num_experts: usize, seed: u64) -> NextScaleModel {
    let relu = relufy(&dense_fixture(seed));
    let cluster = ClusterConfig {
        num_experts,
        max_iters: 5,
        seed,
    };
    let (mut moe, _) = moefy_model(&relu, &cluster).expect("expert count divides d_ff");
    let d = moe.config.d_model;
    for (l, b) in moe.blocks.iter_mut().enumerate() {
        let layer = b.ffn.as_moe_mut().expect("moefied block");
        layer.router = Some(RouterNet::init(d, ROUTER_WIDTH, num_experts, seed + l as u64));
    }
    moe
}

pub fn first_layer(model: &NextScaleModel) -> &MoeLayer {
    model.blocks[0].ffn.as_moe().expect("moefied block")
}

/// `rows × d` standard normal FFN inputs.
pub fn inputs(rows: usize, d: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}
