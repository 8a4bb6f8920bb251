#![allow(dead_code)]

use clare_core::policy::{ActionNormalizer, BackboneSpec, LayerSite, ObsSpec, PolicyModel};
use clare_core::tasks::{collect_demos, generate_suite, Suite};
use clare_core::train::ChunkSet;
use clare_core::Rng;

pub fn tiny_spec() -> BackboneSpec {
    BackboneSpec {
        obs: ObsSpec::default(),
        width: 16,
        ffn_hidden: 24,
        encoder_blocks: 3,
        decoder_width: 16,
        decoder_hidden: 24,
        decoder_blocks: 1,
        time_embed_dim: 8,
        horizon: 4,
        exec_horizon: 2,
        action_dim: 2,
        expandable: vec![LayerSite::Encoder(0), LayerSite::Encoder(1), LayerSite::Encoder(2)],
    }
}

pub fn tiny_model(seed: u64) -> PolicyModel {
    PolicyModel::new(tiny_spec(), ActionNormalizer::identity(2), &mut Rng::seed_from_u64(seed)).unwrap()
}

pub fn suite() -> Suite {
    generate_suite(0, 8, 5).unwrap()
}

/// Chunk sets of the stream tasks, a few demonstrations each.
pub fn stream_sets(model: &PolicyModel, demos: usize) -> Vec<ChunkSet> {
    suite()
        .stream
        .iter()
        .map(|t| {
            let ds = collect_demos(t, demos, 11).unwrap();
            ChunkSet::from_dataset(&ds, &model.spec, &model.normalizer).unwrap()
        })
        .collect()
}
