use std::collections::HashSet;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// `y = x·Wᵀ + b` with `W: [outputs, inputs]`.
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    /// Per-channel normalization over every axis except the channel axis.
    BatchNorm { channels: usize },
    Relu,
    Residual(ResidualBlock),
    GlobalAvgPool,
    Flatten,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Residual(_) => "residual-block",
            LayerKind::GlobalAvgPool => "global-avg-pool",
            LayerKind::Flatten => "flatten",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Layer {
            name: name.into(),
            kind,
        }
    }

    pub fn dense(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Self::new(
            name,
            LayerKind::Dense {
                inputs,
                outputs,
                bias: true,
            },
        )
    }

    /// Bias-free convolution, the usual choice ahead of batch norm.
    pub fn conv(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self::new(
            name,
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                bias: false,
            },
        )
    }

    pub fn batchnorm(name: impl Into<String>, channels: usize) -> Self {
        Self::new(name, LayerKind::BatchNorm { channels })
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::Relu)
    }

    pub fn flatten(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::Flatten)
    }

    pub fn global_avg_pool(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::GlobalAvgPool)
    }

    pub fn residual(name: impl Into<String>, branch: Vec<Layer>, skip: Skip) -> Self {
        Self::new(name, LayerKind::Residual(ResidualBlock { branch, skip }))
    }
}

/// `y = branch(x) + skip(x)`. Any activation after the addition lives
/// outside the block.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub branch: Vec<Layer>,
    pub skip: Skip,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Skip {
    Identity,
    /// Learned projection (a dense or convolution layer) used when the
    /// branch changes the shape.
    Projection(Box<Layer>),
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(1 / fan_in)`.
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Kind tag of the owning layer.
    pub layer: &'static str,
    /// True when the owning layer is a projection skip.
    pub on_skip: bool,
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Ordered layer list plus the per-sample input shape it expects.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    pub fn new(input_shape: impl Into<Vec<usize>>, layers: Vec<Layer>) -> Result<Self> {
        let spec = NetworkSpec {
            input_shape: input_shape.into(),
            layers,
        };
        spec.output_shape()?;
        Ok(spec)
    }

    /// Per-sample output shape; fails on the first incompatible layer, or
    /// on duplicate layer paths.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut seen = HashSet::new();
        infer_layers(&self.layers, "", self.input_shape.clone(), &mut seen)
    }

    /// Trainable tensors in forward order.
    pub fn parameters(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        collect_params(&self.layers, "", false, &mut out);
        out
    }

    /// Running statistics kept by batch-norm layers, as `(path, channels)`.
    pub fn buffers(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        collect_buffers(&self.layers, "", &mut out);
        out
    }

    /// Paths of every residual block in forward order.
    pub fn residual_blocks(&self) -> Vec<String> {
        fn walk(layers: &[Layer], prefix: &str, out: &mut Vec<String>) {
            for layer in layers {
                if let LayerKind::Residual(block) = &layer.kind {
                    let path = join(prefix, &layer.name);
                    walk(&block.branch, &path, out);
                    out.push(path);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, "", &mut out);
        out
    }

    /// Every layer, nested ones included, as `(path, layer, per-sample
    /// input shape)` in forward order. A block comes before its branch
    /// layers; a projection comes after them.
    pub fn layer_inputs(&self) -> Vec<(String, &Layer, Vec<usize>)> {
        fn walk<'a>(
            layers: &'a [Layer],
            prefix: &str,
            mut shape: Vec<usize>,
            out: &mut Vec<(String, &'a Layer, Vec<usize>)>,
        ) -> Vec<usize> {
            for layer in layers {
                let path = join(prefix, &layer.name);
                out.push((path.clone(), layer, shape.clone()));
                if let LayerKind::Residual(block) = &layer.kind {
                    walk(&block.branch, &path, shape.clone(), out);
                    if let Skip::Projection(proj) = &block.skip {
                        out.push((join(&path, &proj.name), proj, shape.clone()));
                    }
                }
                shape = infer_layer(layer, &path, shape, &mut HashSet::new())
                    .expect("shapes were validated on construction");
            }
            shape
        }
        let mut out = Vec::new();
        walk(&self.layers, "", self.input_shape.clone(), &mut out);
        out
    }

    pub fn has_batchnorm(&self) -> bool {
        !self.buffers().is_empty()
    }

    /// Finds a residual block by path.
    pub fn block(&self, path: &str) -> Option<&ResidualBlock> {
        fn find<'a>(layers: &'a [Layer], prefix: &str, want: &str) -> Option<&'a ResidualBlock> {
            for layer in layers {
                if let LayerKind::Residual(block) = &layer.kind {
                    let path = join(prefix, &layer.name);
                    if path == want {
                        return Some(block);
                    }
                    if let Some(b) = find(&block.branch, &path, want) {
                        return Some(b);
                    }
                }
            }
            None
        }
        find(&self.layers, "", path)
    }
}

fn infer_layers(
    layers: &[Layer],
    prefix: &str,
    mut shape: Vec<usize>,
    seen: &mut HashSet<String>,
) -> Result<Vec<usize>> {
    for layer in layers {
        let path = join(prefix, &layer.name);
        if !seen.insert(path.clone()) {
            return Err(Error::layer(&path, "duplicate layer path"));
        }
        shape = infer_layer(layer, &path, shape, seen)?;
    }
    Ok(shape)
}

fn infer_layer(
    layer: &Layer,
    path: &str,
    shape: Vec<usize>,
    seen: &mut HashSet<String>,
) -> Result<Vec<usize>> {
    let bad = |what: String| Error::layer(path, format!("{what}, got per-sample shape {shape:?}"));
    match &layer.kind {
        LayerKind::Dense {
            inputs, outputs, ..
        } => {
            if shape != [*inputs] {
                return Err(bad(format!("expects [{inputs}]")));
            }
            Ok(vec![*outputs])
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            ..
        } => {
            let &[c, h, w] = shape.as_slice() else {
                return Err(bad("expects [C, H, W]".into()));
            };
            if c != *in_channels {
                return Err(bad(format!("expects {in_channels} channels")));
            }
            let geom = crate::tensor::ConvGeometry::new(*stride, *pad);
            let oh = crate::tensor::conv_output_extent(h, *kernel, geom)
                .map_err(|e| Error::layer(path, e.to_string()))?;
            let ow = crate::tensor::conv_output_extent(w, *kernel, geom)
                .map_err(|e| Error::layer(path, e.to_string()))?;
            Ok(vec![*out_channels, oh, ow])
        }
        LayerKind::BatchNorm { channels } => {
            if shape.first() != Some(channels) || !(shape.len() == 1 || shape.len() == 3) {
                return Err(bad(format!("expects [{channels}] or [{channels}, H, W]")));
            }
            Ok(shape)
        }
        LayerKind::Relu => Ok(shape),
        LayerKind::GlobalAvgPool => {
            let &[c, _, _] = shape.as_slice() else {
                return Err(bad("expects [C, H, W]".into()));
            };
            Ok(vec![c])
        }
        LayerKind::Flatten => Ok(vec![shape.iter().product()]),
        LayerKind::Residual(block) => {
            let out = infer_layers(&block.branch, path, shape.clone(), seen)?;
            match &block.skip {
                Skip::Identity if out != shape => Err(Error::layer(
                    path,
                    format!("identity skip needs equal shapes, branch maps {shape:?} to {out:?}"),
                )),
                Skip::Identity => Ok(out),
                Skip::Projection(_) if out == shape => Err(Error::layer(
                    path,
                    "projection skip on a shape-preserving branch",
                )),
                Skip::Projection(proj) => {
                    let proj_path = join(path, &proj.name);
                    if !seen.insert(proj_path.clone()) {
                        return Err(Error::layer(&proj_path, "duplicate layer path"));
                    }
                    if !matches!(proj.kind, LayerKind::Dense { .. } | LayerKind::Conv2d { .. }) {
                        return Err(Error::layer(&proj_path, "projection must be dense or conv2d"));
                    }
                    let skip_out = infer_layer(proj, &proj_path, shape, seen)?;
                    if skip_out != out {
                        return Err(Error::layer(
                            path,
                            format!("projection yields {skip_out:?} but branch yields {out:?}"),
                        ));
                    }
                    Ok(out)
                }
            }
        }
    }
}

fn layer_params(layer: &Layer, path: &str, on_skip: bool, out: &mut Vec<ParamSpec>) {
    let tag = layer.kind.tag();
    let mut push = |name: &str, shape: Vec<usize>, init: Init| {
        out.push(ParamSpec {
            path: join(path, name),
            shape,
            init,
            layer: tag,
            on_skip,
        })
    };
    match &layer.kind {
        LayerKind::Dense {
            inputs,
            outputs,
            bias,
        } => {
            push(
                "weight",
                vec![*outputs, *inputs],
                Init::KaimingUniform { fan_in: *inputs },
            );
            if *bias {
                push("bias", vec![*outputs], Init::Zeros);
            }
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            bias,
            ..
        } => {
            push(
                "weight",
                vec![*out_channels, *in_channels, *kernel, *kernel],
                Init::KaimingUniform {
                    fan_in: in_channels * kernel * kernel,
                },
            );
            if *bias {
                push("bias", vec![*out_channels], Init::Zeros);
            }
        }
        LayerKind::BatchNorm { channels } => {
            push("gamma", vec![*channels], Init::Ones);
            push("beta", vec![*channels], Init::Zeros);
        }
        LayerKind::Residual(block) => {
            collect_params(&block.branch, path, false, out);
            if let Skip::Projection(proj) = &block.skip {
                layer_params(proj, &join(path, &proj.name), true, out);
            }
        }
        LayerKind::Relu | LayerKind::GlobalAvgPool | LayerKind::Flatten => {}
    }
}

fn collect_params(layers: &[Layer], prefix: &str, on_skip: bool, out: &mut Vec<ParamSpec>) {
    for layer in layers {
        layer_params(layer, &join(prefix, &layer.name), on_skip, out);
    }
}

fn collect_buffers(layers: &[Layer], prefix: &str, out: &mut Vec<(String, usize)>) {
    for layer in layers {
        let path = join(prefix, &layer.name);
        match &layer.kind {
            LayerKind::BatchNorm { channels } => out.push((path, *channels)),
            LayerKind::Residual(block) => collect_buffers(&block.branch, &path, out),
            _ => {}
        }
    }
}
