use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelParameters;

/// Momentum buffers, one per parameter tensor in [`ModelParameters::tensors_mut`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity {
    buffers: Vec<Vec<f64>>,
}

impl Velocity {
    pub fn new(params: &ModelParameters) -> Self {
        let buffers = params
            .blocks()
            .flat_map(|(_, b)| b.layers.iter())
            .flat_map(|l| [vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]])
            .collect();
        Velocity { buffers }
    }
}

/// `v ← momentum·v + g; p ← p − lr·v` for one tensor. No-op without a gradient.
pub fn sgd_update(param: &mut Tensor, velocity: &mut [f64], lr: f64, momentum: f64) {
    let Some(grad) = param.grad().map(<[f64]>::to_vec) else {
        return;
    };
    for ((p, v), g) in param.data_mut().iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Applies one momentum step to every trainable block; frozen blocks are skipped.
pub fn sgd_step(
    params: &mut ModelParameters,
    learning_rate: f64,
    momentum: f64,
    velocity: &mut Velocity,
) -> Result<()> {
    let mut buffers = velocity.buffers.iter_mut();
    for block in params.blocks_mut() {
        for layer in &mut block.layers {
            for tensor in [&mut layer.weight, &mut layer.bias] {
                let v = buffers
                    .next()
                    .filter(|v| v.len() == tensor.len())
                    .ok_or_else(|| Error::contract("velocity state does not match parameters"))?;
                if block.trainable {
                    sgd_update(tensor, v, learning_rate, momentum);
                }
            }
        }
    }
    if buffers.next().is_some() {
        return Err(Error::contract("velocity state does not match parameters"));
    }
    Ok(())
}
