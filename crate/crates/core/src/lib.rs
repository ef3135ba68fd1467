//! Eigenvalue dynamics of non-contrastive self-supervised learning in toy
//! linear Siamese networks with closed-form (DirectPred/DirectCopy) predictors.

pub mod analysis;
pub mod experiment;
pub mod linalg;
pub mod losses;
pub mod network;
pub mod synth_data;
pub mod theory;
