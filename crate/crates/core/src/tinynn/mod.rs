//! Dense MLP engine: tensors, linear layers with ReLU, manual reverse-mode
//! gradients, AdamW and a binary checkpoint format. Everything is `f64`.

pub mod adamw;
pub mod checkpoint;
pub mod loss;
pub mod mlp;
pub mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::Checkpoint;
pub use loss::{huber, l1, mse, softmax, softmax_vjp, sum_squared_error};
pub use mlp::{Activation, LayerSpec, Linear, Mlp, MlpCache, MlpSpec};
pub use tensor::Tensor;
