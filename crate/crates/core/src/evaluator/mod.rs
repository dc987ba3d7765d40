//! Multimodal context evaluator: learned-query visual tokens, text/visual
//! self-attention, fused cross-attention and an image-text matching head.

pub mod model;
pub mod pretrain;

pub use model::{
    init_evaluator, qformer_forward, reward_fine, reward_fine_var, reward_global, reward_global_var,
    visual_queries, EvalVars, RewardPair, N_QUERIES,
};
pub use pretrain::{
    auc, curve_csv, evaluate_heldout, forward_pairs, pretrain_evaluator, CurveRow,
    EvaluatorTrainConfig, EvaluatorTraining, HeldoutStats, Pair,
};
