use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One layer of a sequential model.
///
/// Text form (used by configs and checkpoint manifests):
/// `linear(in,out)`, `linear(in,out,nobias)`, `conv2d(in,out,kh,kw,stride,pad)`,
/// `relu`, `leaky_relu(slope)`, `tanh`, `sigmoid`,
/// `batchnorm(features,momentum,epsilon)`, `lstm(in,hidden)`, `softmax_ce`, `mse`.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// `y = x W + b` with `W: [inputs, outputs]`. Inputs of rank > 2 are flattened per sample.
    Linear { inputs: usize, outputs: usize, bias: bool },
    /// NCHW convolution with weight `[out, in, kh, kw]` and a bias per output channel.
    Conv2d { in_channels: usize, out_channels: usize, kernel_h: usize, kernel_w: usize, stride: usize, padding: usize },
    Relu,
    LeakyRelu { slope: f32 },
    Tanh,
    Sigmoid,
    /// Normalizes over every axis but axis 1 of `[B, F]` or `[B, C, H, W]` inputs.
    BatchNorm { features: usize, momentum: f32, epsilon: f32 },
    /// Runs over the time axis of a `[B, T, inputs]` input from a zero state and
    /// returns the final hidden state `[B, hidden]`.
    Lstm { inputs: usize, hidden: usize },
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

impl LayerSpec {
    pub fn is_loss(&self) -> bool {
        matches!(self, LayerSpec::SoftmaxCrossEntropy | LayerSpec::MeanSquaredError)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{self}: {what} must be positive")))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Linear { inputs, outputs, .. } => {
                positive("inputs", inputs)?;
                positive("outputs", outputs)
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, .. } => {
                positive("in_channels", in_channels)?;
                positive("out_channels", out_channels)?;
                positive("kernel_h", kernel_h)?;
                positive("kernel_w", kernel_w)?;
                positive("stride", stride)
            }
            LayerSpec::LeakyRelu { slope } if !slope.is_finite() => {
                Err(Error::Config(format!("{self}: slope must be finite")))
            }
            LayerSpec::BatchNorm { features, momentum, epsilon } => {
                positive("features", features)?;
                if !(momentum > 0.0 && momentum <= 1.0) {
                    return Err(Error::Config(format!("{self}: momentum must be in (0, 1]")));
                }
                if !(epsilon > 0.0 && epsilon.is_finite()) {
                    return Err(Error::Config(format!("{self}: epsilon must be positive")));
                }
                Ok(())
            }
            LayerSpec::Lstm { inputs, hidden } => {
                positive("inputs", inputs)?;
                positive("hidden", hidden)
            }
            _ => Ok(()),
        }
    }

    /// Names and shapes of this layer's parameters, in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Linear { inputs, outputs, bias } => {
                let mut v = vec![("weight", vec![inputs, outputs])];
                if bias {
                    v.push(("bias", vec![outputs]));
                }
                v
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, .. } => vec![
                ("weight", vec![out_channels, in_channels, kernel_h, kernel_w]),
                ("bias", vec![out_channels]),
            ],
            LayerSpec::BatchNorm { features, .. } => vec![("gamma", vec![features]), ("beta", vec![features])],
            LayerSpec::Lstm { inputs, hidden } => {
                vec![("weight", vec![inputs + hidden, 4 * hidden]), ("bias", vec![4 * hidden])]
            }
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Linear { inputs, outputs, bias: true } => write!(f, "linear({inputs},{outputs})"),
            LayerSpec::Linear { inputs, outputs, bias: false } => write!(f, "linear({inputs},{outputs},nobias)"),
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, padding } => {
                write!(f, "conv2d({in_channels},{out_channels},{kernel_h},{kernel_w},{stride},{padding})")
            }
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::LeakyRelu { slope } => write!(f, "leaky_relu({slope})"),
            LayerSpec::Tanh => f.write_str("tanh"),
            LayerSpec::Sigmoid => f.write_str("sigmoid"),
            LayerSpec::BatchNorm { features, momentum, epsilon } => {
                write!(f, "batchnorm({features},{momentum},{epsilon})")
            }
            LayerSpec::Lstm { inputs, hidden } => write!(f, "lstm({inputs},{hidden})"),
            LayerSpec::SoftmaxCrossEntropy => f.write_str("softmax_ce"),
            LayerSpec::MeanSquaredError => f.write_str("mse"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<LayerSpec> {
        let text = text.trim();
        let bad = |why: &str| Error::Config(format!("layer `{text}`: {why}"));
        let (name, args) = match text.find('(') {
            Some(open) => {
                let close = text.strip_suffix(')').ok_or_else(|| bad("missing `)`"))?;
                let args: Vec<&str> = close[open + 1..].split(',').map(str::trim).collect();
                (&text[..open], args)
            }
            None => (text, Vec::new()),
        };
        let int = |i: usize| -> Result<usize> {
            args.get(i)
                .ok_or_else(|| bad("too few arguments"))?
                .parse()
                .map_err(|_| bad(&format!("argument {} is not a non-negative integer", i + 1)))
        };
        let float = |i: usize| -> Result<f32> {
            args.get(i)
                .ok_or_else(|| bad("too few arguments"))?
                .parse()
                .map_err(|_| bad(&format!("argument {} is not a number", i + 1)))
        };
        let arity = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(bad(&format!("expected {n} arguments, got {}", args.len())))
            }
        };
        let spec = match name.trim().to_ascii_lowercase().as_str() {
            "linear" => {
                let bias = match args.len() {
                    2 => true,
                    3 if args[2] == "nobias" => false,
                    3 if args[2] == "bias" => true,
                    _ => return Err(bad("expected linear(in,out[,nobias])")),
                };
                LayerSpec::Linear { inputs: int(0)?, outputs: int(1)?, bias }
            }
            "conv2d" => {
                arity(6)?;
                LayerSpec::Conv2d {
                    in_channels: int(0)?,
                    out_channels: int(1)?,
                    kernel_h: int(2)?,
                    kernel_w: int(3)?,
                    stride: int(4)?,
                    padding: int(5)?,
                }
            }
            "relu" => LayerSpec::Relu,
            "leaky_relu" => {
                arity(1)?;
                LayerSpec::LeakyRelu { slope: float(0)? }
            }
            "tanh" => LayerSpec::Tanh,
            "sigmoid" => LayerSpec::Sigmoid,
            "batchnorm" => {
                arity(3)?;
                LayerSpec::BatchNorm { features: int(0)?, momentum: float(1)?, epsilon: float(2)? }
            }
            "lstm" => {
                arity(2)?;
                LayerSpec::Lstm { inputs: int(0)?, hidden: int(1)? }
            }
            "softmax_ce" | "softmax_cross_entropy" => LayerSpec::SoftmaxCrossEntropy,
            "mse" => LayerSpec::MeanSquaredError,
            other => return Err(bad(&format!("unknown layer kind `{other}`"))),
        };
        if !matches!(spec, LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. } | LayerSpec::LeakyRelu { .. } | LayerSpec::BatchNorm { .. } | LayerSpec::Lstm { .. })
            && !args.is_empty()
        {
            return Err(bad("takes no arguments"));
        }
        spec.validate()?;
        Ok(spec)
    }
}
