//! Aspect-level sentiment classification over `[h(x); z(u)]`.

mod data;
mod eval;
mod features;
mod head;
mod train;

pub use data::{aspect_counts, read_categories, read_jsonl, write_jsonl, AlscInstance, Label};
pub use eval::{compare, evaluate, per_class_f1, BucketStat, Buckets, CategoryStat, EvalItem, MetricsReport};
pub use features::{read_arft, write_arft, FileProvider, TextFeatures, TextProvider, ToyEncoder, MASK_TOKEN};
pub use head::{
    alsc_loss, argmax, head_log_probs, head_loss, head_nll_rows, head_soft_ce_rows, softmax, Head, HeadVars,
};
pub use train::{
    joint_features, train_joint, train_static, HeadConfig, JointConfig, JointInputs, JointStep, JointTrace, TrainTrace,
};
