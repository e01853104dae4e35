use super::BatchNormParams;
use crate::tensor::ReduceOp;
use crate::{Error, Graph, Real, Result, Tensor, Var};

/// Batch normalization of an N x C x H x W tensor.
///
/// Training mode normalizes with the batch mean and population variance
/// and folds them into the running statistics with weight `p.momentum`.
/// Evaluation mode uses the running statistics.
pub fn batchnorm(g: &Graph, x: Var, p: &mut BatchNormParams, training: bool) -> Result<Var> {
    let shape = g.shape(x);
    let c = p.channels();
    if shape.len() != 4 || shape[1] != c {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: shape,
            rhs: vec![c],
        });
    }
    let bcast = [1, c, 1, 1];
    let (mean, var) = if training {
        let per_channel = g.permute(x, &[1, 0, 2, 3])?;
        let rows = g.reshape(per_channel, &[c, shape[0] * shape[2] * shape[3]])?;
        let mean = g.reduce(ReduceOp::Mean, rows, 1)?;
        let var = g.reduce(ReduceOp::Variance, rows, 1)?;
        p.running_mean = blend(&p.running_mean, &g.value(mean), p.momentum);
        p.running_var = blend(&p.running_var, &g.value(var), p.momentum);
        (g.reshape(mean, &bcast)?, g.reshape(var, &bcast)?)
    } else {
        (
            g.constant(p.running_mean.reshape(bcast)?),
            g.constant(p.running_var.reshape(bcast)?),
        )
    };
    let centered = g.sub(x, mean)?;
    let denom = g.sqrt(g.add_scalar(var, p.epsilon)?);
    let normalized = g.div(centered, denom)?;
    let scale = g.reshape(g.param(&p.scale), &bcast)?;
    let shift = g.reshape(g.param(&p.shift), &bcast)?;
    g.add(g.mul(normalized, scale)?, shift)
}

fn blend(running: &Tensor, batch: &Tensor, momentum: Real) -> Tensor {
    let data = running
        .data()
        .iter()
        .zip(batch.data())
        .map(|(&r, &b)| (1.0 - momentum) * r + momentum * b)
        .collect();
    Tensor::from_parts(running.shape().to_vec(), data)
}
