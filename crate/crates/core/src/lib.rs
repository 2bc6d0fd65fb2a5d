//! INT8 inference engine for Transformer encoders whose weights follow a
//! 4x1 structured-sparsity pattern.

pub mod graph;
pub mod kernels;
pub mod lut;
pub mod model_io;
pub mod runtime;
pub mod sparse;
pub mod tensor;

pub use graph::{Executor, Graph, GraphBuilder, GraphError, OpKind};
pub use kernels::{Backend, KernelError};
pub use lut::{apply_lut, build_lut, LutError, LutTable};
pub use model_io::{generate_synthetic_model, load_model, save_model, ModelError};
pub use runtime::{BufferPlanner, RuntimeError, WeightRegistry};
pub use sparse::{decode_sparse, encode_sparse, generate_pattern_weight, sparsity_ratio, FormatError, Sparse4x1Weight};
pub use tensor::{DType, Granularity, QuantDType, QuantParams, Tensor, TensorData, TensorError};
