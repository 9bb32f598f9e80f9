#![allow(dead_code)]

use mixmodal_core::config::Config;
use mixmodal_core::rng::stream_rng;
use mixmodal_core::synth::{make_corpus, Autoencoder, Split};
use mixmodal_core::training::TrainData;
use mixmodal_core::Model;

/// A model small enough to train a few steps in milliseconds.
pub fn tiny_config() -> Config {
    let mut c = Config::default();
    c.autoencoder.patch_dim = 4;
    c.autoencoder.codebook_size = 8;
    c.backbone.layers = 1;
    c.backbone.width = 16;
    c.backbone.heads = 2;
    c.backbone.mlp_ratio = 2;
    c.heads.width = 16;
    c.heads.blocks = 1;
    c.heads.time_freq_dim = 8;
    c.heads.ddim_steps = 5;
    c.training.base.batch = 4;
    c.training.post.batch = 4;
    c.synth.train_size = 64;
    c.synth.held_out_size = 16;
    c
}

pub fn tiny_setup(config: &Config) -> (Autoencoder<f64>, TrainData<f64>) {
    let ae = Autoencoder::random(&config.autoencoder, &mut stream_rng(0, 4));
    let corpus = make_corpus(0, config.synth.train_size, Split::Train, &config.synth);
    let data = TrainData::from_corpus(&corpus, &ae).unwrap();
    (ae, data)
}

pub fn tiny_model(config: &Config, seed: u64) -> (Model<f64>, TrainData<f64>) {
    let (ae, data) = tiny_setup(config);
    (Model::init(config.clone(), &ae, seed).unwrap(), data)
}
