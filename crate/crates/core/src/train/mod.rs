//! Training loop, snapshot selection and multi-seed ensembles.

pub mod bundle;
mod ensemble;
mod loss;
mod trainer;

pub use bundle::{checkpoint_name, load_bundle, write_bundle, write_history, LoadedBundle, BUNDLE_FILE};
pub use ensemble::{
    ensemble_predict, ensemble_predict_batch, fuse_logits, predict_samples, run_ensemble_training, selected_member,
    EnsembleBundle, EnsembleFailure, EnsembleMember, EnsembleRun, MemberInfo, ProbabilityVector,
};
pub use loss::{combined_loss, LossKind};
pub use trainer::{
    evaluate_model, select_index, select_snapshot, train_one, validation_batches, windowed_medians, EvalRecord,
    Snapshot, TrainAbort, TrainConfig, TrainData, TrainHistory, ValMetrics,
};
