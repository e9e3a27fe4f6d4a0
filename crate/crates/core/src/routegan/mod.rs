//! Style-conditioned recurrent route generator, its three-branch
//! discriminator, the auxiliary style reconstructor and adversarial training.

mod loss;
mod model;
mod train;

pub use loss::{
    discriminator_loss, generator_loss, info_loss, road_penalty, DiscBatch, DiscTerms, GenBatch, GenTerms,
};
pub use model::{
    Branch, GeneratorContext, GeneratorState, GenerationInputs, RouteGanConfig, RouteGanModel, SceneSet,
    StyleCode, GROUP_AUX, GROUP_DISC, GROUP_GEN,
};
pub use train::{train, MetricsRow, TrainData, TrainOutcome, METRIC_TERMS};
