//! Architecture descriptors and the model factory.
//!
//! A descriptor is a `;`-separated string such as
//! `toy-fc;classes=10;input=1x32x32;hidden=1024,512;prefix=2`. Omitted keys
//! take the defaults listed on [`ArchSpec`].

use std::fmt;
use std::str::FromStr;

use super::layer::LayerSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    /// Fully connected tanh network; gradient-accumulation layers follow each
    /// hidden fc layer.
    ToyFc,
    /// Conv blocks (conv, BN, gradacc, relu, maxpool) followed by one fc layer.
    SmallConv,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::ToyFc => "toy-fc",
            ArchKind::SmallConv => "small-conv",
        }
    }
}

/// Full description of a buildable architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub classes: usize,
    /// Per-sample input shape `[C, H, W]`.
    pub input: [usize; 3],
    /// Hidden fc widths (toy-fc). Default `[1024, 512]`.
    pub hidden: Vec<usize>,
    /// Conv block widths (small-conv). Default `[32, 64, 128]`.
    pub widths: Vec<usize>,
    /// Batch norm in conv blocks. Default on.
    pub batchnorm: bool,
    /// Dropout after each hidden activation; 0 disables.
    pub dropout: f64,
    /// Number of gradient-accumulation layers, inserted from the shallowest
    /// block upwards. `None` means one per eligible block.
    pub gradacc_prefix: Option<usize>,
}

impl ArchSpec {
    pub fn toy_fc(classes: usize, input: [usize; 3]) -> Self {
        ArchSpec {
            kind: ArchKind::ToyFc,
            classes,
            input,
            hidden: vec![1024, 512],
            widths: vec![32, 64, 128],
            batchnorm: true,
            dropout: 0.0,
            gradacc_prefix: None,
        }
    }

    pub fn small_conv(classes: usize, input: [usize; 3]) -> Self {
        ArchSpec {
            kind: ArchKind::SmallConv,
            ..Self::toy_fc(classes, input)
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = widths;
        self
    }

    pub fn with_prefix(mut self, prefix: usize) -> Self {
        self.gradacc_prefix = Some(prefix);
        self
    }

    /// Number of blocks that can host a gradient-accumulation layer.
    pub fn eligible_blocks(&self) -> usize {
        match self.kind {
            ArchKind::ToyFc => self.hidden.len(),
            ArchKind::SmallConv => self.widths.len(),
        }
    }

    /// Whether the hidden activations are tanh (Xavier init) or relu
    /// (Kaiming init).
    pub fn uses_tanh(&self) -> bool {
        self.kind == ArchKind::ToyFc
    }

    /// Layer list for this architecture.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        if self.classes == 0 || self.input.contains(&0) {
            return Err(Error::Config(format!(
                "classes and input extents must be positive: {self}"
            )));
        }
        let prefix = self.gradacc_prefix.unwrap_or(self.eligible_blocks());
        if prefix > self.eligible_blocks() {
            return Err(Error::Config(format!(
                "gradacc prefix {prefix} exceeds the {} eligible blocks of {}",
                self.eligible_blocks(),
                self.kind.name()
            )));
        }
        let mut layers = Vec::new();
        let dropout = |layers: &mut Vec<LayerSpec>| {
            if self.dropout > 0.0 {
                layers.push(LayerSpec::Dropout { rate: self.dropout });
            }
        };
        match self.kind {
            ArchKind::ToyFc => {
                let mut width = self.input.iter().product::<usize>();
                for (i, &h) in self.hidden.iter().enumerate() {
                    layers.push(LayerSpec::Fc {
                        inputs: width,
                        outputs: h,
                    });
                    if i < prefix {
                        layers.push(LayerSpec::GradAcc);
                    }
                    layers.push(LayerSpec::Tanh);
                    dropout(&mut layers);
                    width = h;
                }
                layers.push(LayerSpec::Fc {
                    inputs: width,
                    outputs: self.classes,
                });
            }
            ArchKind::SmallConv => {
                let [mut ch, mut h, mut w] = self.input;
                for (i, &f) in self.widths.iter().enumerate() {
                    layers.push(LayerSpec::Conv {
                        in_channels: ch,
                        out_channels: f,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                    });
                    if self.batchnorm {
                        layers.push(LayerSpec::BatchNorm { channels: f });
                    }
                    if i < prefix {
                        layers.push(LayerSpec::GradAcc);
                    }
                    layers.push(LayerSpec::Relu);
                    if h >= 2 && w >= 2 {
                        layers.push(LayerSpec::MaxPool { size: 2, stride: 2 });
                        h /= 2;
                        w /= 2;
                    }
                    dropout(&mut layers);
                    ch = f;
                }
                layers.push(LayerSpec::Fc {
                    inputs: ch * h * w,
                    outputs: self.classes,
                });
            }
        }
        for l in &layers {
            l.validate()?;
        }
        Ok(layers)
    }
}

fn join(v: &[usize], sep: &str) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(sep)
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{};classes={};input={}",
            self.kind.name(),
            self.classes,
            join(&self.input, "x")
        )?;
        match self.kind {
            ArchKind::ToyFc => write!(f, ";hidden={}", join(&self.hidden, ","))?,
            ArchKind::SmallConv => write!(
                f,
                ";widths={};bn={}",
                join(&self.widths, ","),
                u8::from(self.batchnorm)
            )?,
        }
        if self.dropout > 0.0 {
            write!(f, ";dropout={}", self.dropout)?;
        }
        if let Some(p) = self.gradacc_prefix {
            write!(f, ";prefix={p}")?;
        }
        Ok(())
    }
}

fn parse_list(key: &str, v: &str, sep: char) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(sep)
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        })
        .collect()
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(';').map(str::trim);
        let name = parts.next().unwrap_or_default();
        let mut spec = match name {
            "toy-fc" => ArchSpec::toy_fc(10, [1, 32, 32]),
            "small-conv" => ArchSpec::small_conv(10, [3, 32, 32]),
            other => return Err(Error::Config(format!("unknown architecture `{other}`"))),
        };
        for part in parts.filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{part}`")))?;
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad value `{v}` for `{k}`")))
            };
            match k {
                "classes" => spec.classes = num(v)?,
                "input" => {
                    let dims = parse_list(k, v, 'x')?;
                    spec.input = dims
                        .try_into()
                        .map_err(|_| Error::Config(format!("input must be CxHxW, got `{v}`")))?;
                }
                "hidden" => spec.hidden = parse_list(k, v, ',')?,
                "widths" => spec.widths = parse_list(k, v, ',')?,
                "bn" => spec.batchnorm = num(v)? != 0,
                "dropout" => {
                    spec.dropout = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad dropout `{v}`")))?
                }
                "prefix" => spec.gradacc_prefix = Some(num(v)?),
                other => return Err(Error::Config(format!("unknown architecture key `{other}`"))),
            }
        }
        Ok(spec)
    }
}
