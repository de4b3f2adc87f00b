//! Differentiable operators, parameters, the attention gate, the masked
//! loss and Adam.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, TensorCheck};
pub use graph::{BatchStats, Graph, NodeId, NormMode};
pub use optim::{Adam, AdamConfig};
pub use params::{attention_gate, ParamKind, ParamStore, Session};
pub use tensor::{gemm, Real, Tensor};
