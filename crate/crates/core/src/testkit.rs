//! Shared fixtures for unit tests: one world and one pretrained backbone
//! per test binary.

use std::sync::OnceLock;

use crate::synth::{World, WorldSpec};
use crate::towers::{pretrain_backbone, Backbone, EncoderConfig, PretrainConfig};

pub fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| World::build(&WorldSpec::default(), &EncoderConfig::default()).unwrap())
}

pub fn backbone() -> &'static Backbone {
    static B: OnceLock<Backbone> = OnceLock::new();
    B.get_or_init(|| {
        let cfg = PretrainConfig {
            steps: 300,
            ..Default::default()
        };
        pretrain_backbone(&EncoderConfig::default(), &cfg, &world().pretrain_corpus(), 0).unwrap()
    })
}
