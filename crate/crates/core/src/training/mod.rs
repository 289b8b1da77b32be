mod adam;
mod loss;
mod trainer;

#[cfg(test)]
mod tests;

pub use adam::{Adam, AdamConfig};
pub use loss::{cross_entropy, loss_eq1, one_hot, LabelBatch, LossWeights, PROB_FLOOR};
pub use trainer::{
    fit, load_map_into, predict_daffnet, predict_map, pseudo_label, train_daffnet, train_map_dsl, train_map_ssl,
    EarlyStopping, EpochRecord, History, InputSpec, MapPrediction, Monitor, Samples, TrainConfig,
};
