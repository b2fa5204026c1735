pub mod loop_ir;
pub mod transform;
pub mod featurize;
pub mod datagen;
pub mod jsonl;
pub mod autoencoder;
pub mod perfmodel;
pub mod autosched;
