use super::{Scalar, Shape4, Tensor4};
use crate::error::{Error, Result};

/// Flat input index of the winning element for every pooled output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Shape4,
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> Shape4 {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape4 {
        let s = self.input_shape;
        Shape4::new(s.batch, s.channels, s.height / 2, s.width / 2)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.argmax
    }
}

/// 2×2 max pooling with stride 2. Ties go to the first element in row-major order.
pub fn maxpool2x2<S: Scalar>(input: &Tensor4<S>) -> Result<(Tensor4<S>, PoolIndices)> {
    let s = input.shape();
    if !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
        return Err(Error::precondition(
            "maxpool2x2",
            format!("spatial dims must be even, got {}x{}", s.height, s.width),
        ));
    }
    let (oh, ow) = (s.height / 2, s.width / 2);
    let out_shape = Shape4::new(s.batch, s.channels, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let data = input.data();
    for plane in 0..s.batch * s.channels {
        let base = plane * s.plane_len();
        for oy in 0..oh {
            let r0 = base + 2 * oy * s.width;
            let r1 = r0 + s.width;
            for ox in 0..ow {
                let cands = [r0 + 2 * ox, r0 + 2 * ox + 1, r1 + 2 * ox, r1 + 2 * ox + 1];
                let mut best = cands[0];
                for &c in &cands[1..] {
                    if data[c] > data[best] {
                        best = c;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor4::from_vec(out_shape, out)?,
        PoolIndices {
            input_shape: s,
            argmax,
        },
    ))
}

/// Routes each output cotangent to the element that won the forward max.
pub fn maxpool2x2_backward<S: Scalar>(grad_out: &Tensor4<S>, indices: &PoolIndices) -> Result<Tensor4<S>> {
    if grad_out.shape() != indices.output_shape() {
        return Err(Error::shape("maxpool2x2_backward", grad_out.shape(), indices.output_shape()));
    }
    let mut grad_in = Tensor4::zeros_unchecked(indices.input_shape);
    let gi = grad_in.data_mut();
    for (&idx, &g) in indices.argmax.iter().zip(grad_out.data()) {
        gi[idx] += g;
    }
    Ok(grad_in)
}
