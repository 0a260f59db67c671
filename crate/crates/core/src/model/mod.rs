//! Numerical substrate: synthetic non-IID data, a one-hidden-layer MLP trained
//! with mini-batch SGD, FedAvg and cosine similarity.

mod aggregate;
mod dataset;
mod mlp;

pub use aggregate::{cosine_similarity, fedavg};
pub use dataset::{gen_dataset, partition_non_iid, ClientData, Dataset, Split};
pub(crate) use mlp::accuracy_on;
pub use mlp::{
    evaluate, init_model, local_train, loss_and_gradient, predict, Layout, LayoutEntry,
    ParamVector, TrainConfig, UpdateVector,
};
