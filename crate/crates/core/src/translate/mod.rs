//! Synthetic privileged views: paired and unpaired image translators and
//! dataset materialization.

mod config;
mod net;
mod synth;
mod training;


pub use config::{TranslateConfig, TranslatorMode};
pub use net::{Discriminator, Generator};
pub use synth::{corrupt_with_noise, synthesize_pairs, synthesize_pairs_with, NoiseSpec, PairSource, PRIVILEGED_SUFFIX};
pub use training::{
    init_translator, train_paired_translator, train_unpaired_translator, translate, translate_batch, TranslateStepRecord,
    TranslatorHistory, TranslatorParams, DISC_A, DISC_B, GEN_AB, GEN_BA, TRANSLATOR_KIND,
};
