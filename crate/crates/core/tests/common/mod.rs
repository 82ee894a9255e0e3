#![allow(dead_code)]

pub mod gradnet;

use melo_core::config::{EngineConfig, TaskSection};
use melo_core::editor::EditorConfig;
use melo_core::evalkit::prepare;
pub use melo_core::evalkit::Prepared;
use melo_core::hostnet::{HostConfig, PretrainOptions};
use melo_core::taskgen::StreamConfig;

/// A few-second engine: 24 facts, 3 labels, 3 batches of 3 facts.
pub fn small_config(seed: u64) -> EngineConfig {
    EngineConfig {
        seed,
        host: HostConfig {
            vocab: 64,
            width: 16,
            ffn: 32,
            heads: 2,
            layers: 4,
            labels: 3,
            max_len: 8,
            ..Default::default()
        },
        pretrain: PretrainOptions {
            epochs: 300,
            lr: 1e-2,
            batch_size: 16,
            ..Default::default()
        },
        task: TaskSection {
            num_facts: 24,
            templates_per_fact: 8,
            frame_slots: 1,
            frame_tokens: 10,
            relation_tokens: 3,
        },
        stream: StreamConfig {
            n_batches: 3,
            batch_size: 12,
            edit_fraction: 0.5,
            recur_fraction: 0.15,
        },
        editor: EditorConfig {
            key_layer: 0,
            lora_layers: vec![1, 2, 3],
            rank: 4,
            partial_rank: 2,
            alpha: 8.0,
            r_init: 1.0,
            iterations: 150,
            lr: 0.5,
        },
    }
}

pub fn small(seed: u64) -> Prepared {
    prepare(&small_config(seed)).expect("small engine pretrains")
}
