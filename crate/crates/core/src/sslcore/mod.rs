//! Encoders, projection heads, joint-embedding losses, and the Siamese and
//! three-branch objectives built from them.

mod encoder;
mod losses;
mod objectives;
mod projector;

pub use encoder::{Binding, Encoder, EncoderConfig, EncoderPreset};
pub use losses::{
    cross_entropy, infonce_loss, pair_loss, vicreg_loss, EmbeddingBatch, LossBreakdown, LossComponents, LossKind,
    PairTerms,
};
pub use objectives::{
    siamese_objective, trident_objective, Branch, Objective, SiameseMode, SslModel, PRIMARY_PREFIX, PRIVILEGED_PREFIX,
};
pub use projector::{Projector, ProjectorConfig};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    SiameseUnprivileged,
    SiamesePrivileged,
    Trident,
    Supervised,
}

impl MethodKind {
    pub const ALL: [MethodKind; 4] =
        [MethodKind::SiameseUnprivileged, MethodKind::SiamesePrivileged, MethodKind::Trident, MethodKind::Supervised];

    pub fn needs_privileged(self) -> bool {
        matches!(self, MethodKind::SiamesePrivileged | MethodKind::Trident)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::SiameseUnprivileged => "siamese_unprivileged",
            MethodKind::SiamesePrivileged => "siamese_privileged",
            MethodKind::Trident => "trident",
            MethodKind::Supervised => "supervised",
        }
    }
}

#[cfg(test)]
mod tests;
