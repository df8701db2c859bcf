//! Error-correcting network, its training loop and the persisted model bundle.

pub mod io;
pub mod mlp;
pub mod train;

pub use io::{load_model, save_model, FORMAT_VERSION};
pub use mlp::{Dense, Mlp};
pub use train::{error_stats, evaluate, evaluate_numerical, loss_and_gradient, train, train_from, write_training_log, EpochLog, EvalReport, SampleSet, TrainConfig};

use crate::error::Result;
use crate::preprocess::{network_inputs, PcaModel, TrainingStats};
use crate::sampling::DataPacket;

/// Network plus the preprocessing it was trained with and the mesh size it is valid for.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub mlp: Mlp<f64>,
    pub stats: TrainingStats,
    pub pca: PcaModel,
    pub h: f64,
    pub l_max: u32,
}

impl ModelBundle {
    /// Scaled predictions for packets already in standard form.
    pub fn predict(&self, packets: &[DataPacket<f64>]) -> Result<Vec<f64>> {
        let x = network_inputs(packets, &self.stats, &self.pca, self.h)?;
        self.mlp.forward(&x)
    }
}

/// Scaled network inputs and targets for labeled tuples.
pub fn sample_set(tuples: &[crate::sampling::LearningTuple], stats: &TrainingStats, pca: &PcaModel, h: f64) -> Result<SampleSet> {
    let packets: Vec<DataPacket<f64>> = tuples.iter().map(|t| t.packet).collect();
    let inputs = network_inputs(&packets, stats, pca, h)?;
    SampleSet::new(stats.n_components + 1, inputs, tuples.iter().map(|t| t.target).collect())
}

/// Fits preprocessing on the training tuples and trains the network on them.
pub fn fit_bundle(
    train_tuples: &[crate::sampling::LearningTuple],
    val_tuples: &[crate::sampling::LearningTuple],
    h: f64,
    l_max: u32,
    n_components: usize,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, Vec<EpochLog>)> {
    let packets: Vec<DataPacket<f64>> = train_tuples.iter().map(|t| t.packet).collect();
    let (stats, pca) = crate::preprocess::fit(&packets, h, n_components)?;
    let tr = sample_set(train_tuples, &stats, &pca, h)?;
    let va = sample_set(val_tuples, &stats, &pca, h)?;
    let (mlp, log) = train(&tr, &va, cfg)?;
    Ok((ModelBundle { mlp, stats, pca, h, l_max }, log))
}
