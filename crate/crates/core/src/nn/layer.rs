use crate::error::{Error, Result};

/// One layer of a sequential model.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Fully connected; the input is flattened to `[N, inputs]`.
    Fc {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Tanh,
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Dropout {
        rate: f64,
    },
    /// Gradient-accumulation layer.
    GradAcc,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!(
                    "{name} must be positive in {self:?}"
                )))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Fc { inputs, outputs } => {
                positive("inputs", inputs)?;
                positive("outputs", outputs)
            }
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                positive("in_channels", in_channels)?;
                positive("out_channels", out_channels)?;
                positive("kernel", kernel)?;
                positive("stride", stride)
            }
            LayerSpec::BatchNorm { channels } => positive("channels", channels),
            LayerSpec::MaxPool { size, stride } => {
                positive("size", size)?;
                positive("stride", stride)
            }
            LayerSpec::Dropout { rate } => {
                if (0.0..1.0).contains(&rate) {
                    Ok(())
                } else {
                    Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")))
                }
            }
            LayerSpec::Tanh | LayerSpec::Relu | LayerSpec::GradAcc => Ok(()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Fc { .. } => "fc",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::GradAcc => "gradacc",
        }
    }

    /// Parameter tensor shapes in serialization order.
    pub(crate) fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Fc { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            LayerSpec::BatchNorm { channels } => vec![vec![channels], vec![channels]],
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(LayerSpec::Dropout { rate: 1.0 }.validate().is_err());
        assert!(LayerSpec::Dropout { rate: 0.0 }.validate().is_ok());
        assert!(LayerSpec::Fc {
            inputs: 0,
            outputs: 3
        }
        .validate()
        .is_err());
        assert!(LayerSpec::MaxPool { size: 2, stride: 0 }
            .validate()
            .is_err());
    }
}
