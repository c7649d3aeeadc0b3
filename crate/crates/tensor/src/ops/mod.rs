//! Differentiable primitives. Forward passes live on [`Tape`](crate::Tape)
//! as methods; this module dispatches the matching backward rules.

mod conv;
mod elementwise;
mod loss;
mod matmul;
mod norm;
mod reduce;
mod shape;

use std::rc::Rc;

use crate::element::Element;
use crate::tape::Var;
use crate::tensor::Tensor;

pub use conv::conv2d_output_extent;
pub use loss::PROB_CLAMP;
pub use matmul::AttentionMask;

pub(crate) enum Op<T: Element> {
    Conv2d { stride: usize, padding: usize },
    Add,
    Sub,
    Mul,
    Scale(T),
    Abs,
    LeakyRelu(T),
    Gelu,
    Sigmoid,
    Sum,
    Mean,
    MeanPerSample,
    ChannelUnitNorm { eps: T },
    LayerNormChannels { eps: T },
    ConcatChannels,
    Reshape,
    Gather { index: Rc<[u32]> },
    Bmm { trans_a: bool, trans_b: bool },
    Softmax { mask: Option<Rc<AttentionMask>> },
    Bce { targets: Rc<[T]> },
}

pub(crate) type InputGrads<T> = Vec<Option<Vec<T>>>;

pub(crate) fn backward<T: Element>(
    op: &Op<T>,
    inputs: &[Var<T>],
    out: &Tensor<T>,
    grad: &[T],
) -> InputGrads<T> {
    match op {
        Op::Conv2d { stride, padding } => conv::backward(inputs, grad, *stride, *padding),
        Op::Add => elementwise::add_backward(inputs, grad),
        Op::Sub => elementwise::sub_backward(inputs, grad),
        Op::Mul => elementwise::mul_backward(inputs, grad),
        Op::Scale(s) => vec![Some(grad.iter().map(|&g| g * *s).collect())],
        Op::Abs => elementwise::abs_backward(inputs, grad),
        Op::LeakyRelu(slope) => elementwise::leaky_relu_backward(inputs, grad, *slope),
        Op::Gelu => elementwise::gelu_backward(inputs, grad),
        Op::Sigmoid => elementwise::sigmoid_backward(out, grad),
        Op::Sum => reduce::sum_backward(inputs, grad),
        Op::Mean => reduce::mean_backward(inputs, grad),
        Op::MeanPerSample => reduce::mean_per_sample_backward(inputs, grad),
        Op::ChannelUnitNorm { eps } => norm::unit_norm_backward(inputs, grad, *eps),
        Op::LayerNormChannels { eps } => norm::layer_norm_backward(inputs, grad, *eps),
        Op::ConcatChannels => shape::concat_backward(inputs, grad),
        Op::Reshape => vec![Some(grad.to_vec())],
        Op::Gather { index } => shape::gather_backward(inputs, grad, index),
        Op::Bmm { trans_a, trans_b } => matmul::bmm_backward(inputs, grad, *trans_a, *trans_b),
        Op::Softmax { mask } => matmul::softmax_backward(out, grad, mask.as_deref()),
        Op::Bce { targets } => loss::bce_backward(inputs, grad, targets),
    }
}
