//! Forward pass with caching and the exact reverse pass over a
//! [`NetworkSpec`].

use std::cell::Cell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::batchnorm::{batchnorm_backward, batchnorm_forward, updated_running_stats, BatchNormCache};
use super::params::{GradMap, ParamStore};
use super::spec::{join, Layer, LayerKind, NetworkSpec, ResidualBlock, Skip};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_backward, gemm_acc, transpose, ConvGeometry, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

static NEXT_CACHE_ID: AtomicU64 = AtomicU64::new(1);

/// State saved by one forward call for the matching backward call.
#[derive(Clone, Debug)]
pub struct ForwardCache<T: Scalar> {
    id: u64,
    params_version: u64,
    mode: Mode,
    output_shape: Vec<usize>,
    layers: Vec<LayerCache<T>>,
    consumed: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerCache<T: Scalar> {
    path: String,
    state: LayerState<T>,
}

#[derive(Clone, Debug)]
enum LayerState<T: Scalar> {
    Dense { input: Tensor<T> },
    Conv { input: Tensor<T> },
    BatchNorm(BatchNormCache<T>),
    Relu { input: Tensor<T> },
    Pool { input_shape: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
    Residual(Box<BlockCache<T>>),
}

/// Forward state of one residual block: its input `x`, its output
/// `y = branch(x) + skip(x)`, and the caches of both paths.
#[derive(Clone, Debug)]
pub struct BlockCache<T: Scalar> {
    pub path: String,
    pub input: Tensor<T>,
    pub output: Tensor<T>,
    branch: Vec<LayerCache<T>>,
    skip: Option<Box<LayerCache<T>>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn params_version(&self) -> u64 {
        self.params_version
    }

    /// Cache of the residual block at `path`.
    pub fn block(&self, path: &str) -> Option<&BlockCache<T>> {
        fn find<'a, T: Scalar>(layers: &'a [LayerCache<T>], want: &str) -> Option<&'a BlockCache<T>> {
            layers.iter().find_map(|l| match &l.state {
                LayerState::Residual(b) if b.path == want => Some(&**b),
                LayerState::Residual(b) => find(&b.branch, want),
                _ => None,
            })
        }
        find(&self.layers, path)
    }

    /// Signs (`> 0`) of every ReLU input, in forward order.
    pub fn relu_signs(&self) -> Vec<bool> {
        let mut out = Vec::new();
        relu_signs(&self.layers, &mut out);
        out
    }

    /// Path of the layer that produced the first non-finite tensor seen in
    /// forward order; `"input"` when the batch itself is bad.
    pub fn first_non_finite(&self, logits: &Tensor<T>) -> Option<String> {
        fn walk<'a, T: Scalar>(
            layers: &'a [LayerCache<T>],
            prev: &mut &'a str,
        ) -> Option<String> {
            for l in layers {
                let held = match &l.state {
                    LayerState::Dense { input }
                    | LayerState::Conv { input }
                    | LayerState::Relu { input } => Some(input),
                    LayerState::Residual(b) => Some(&b.input),
                    LayerState::BatchNorm(c) => Some(&c.xhat),
                    LayerState::Pool { .. } | LayerState::Flatten { .. } => None,
                };
                if let Some(t) = held {
                    if !t.is_finite() {
                        return Some(match &l.state {
                            LayerState::BatchNorm(_) => l.path.clone(),
                            _ => prev.to_string(),
                        });
                    }
                }
                if let LayerState::Residual(b) = &l.state {
                    *prev = &b.path;
                    if let Some(found) = walk(&b.branch, prev) {
                        return Some(found);
                    }
                }
                *prev = &l.path;
            }
            None
        }
        let mut prev = "input";
        walk(&self.layers, &mut prev).or_else(|| (!logits.is_finite()).then(|| prev.to_string()))
    }
}

/// Skip and branch contributions to one block's input gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGradients<T: Scalar> {
    pub path: String,
    /// `∂L/∂y` at the block's addition node.
    pub upstream: Tensor<T>,
    pub skip: Tensor<T>,
    pub branch: Tensor<T>,
}

impl<T: Scalar> BlockGradients<T> {
    /// `∂L/∂x = skip + branch`.
    pub fn input(&self) -> Tensor<T> {
        self.skip.add(&self.branch).expect("same shape")
    }
}

#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar> {
    /// Parameter gradients in parameter order.
    pub params: GradMap<T>,
    /// Gradient with respect to the network input.
    pub input: Tensor<T>,
    /// Per-block decomposition in forward order; empty unless requested.
    pub blocks: Vec<BlockGradients<T>>,
}

struct Sink<T: Scalar> {
    grads: HashMap<String, Tensor<T>>,
    blocks: Option<Vec<BlockGradients<T>>>,
}

impl<T: Scalar> Sink<T> {
    fn put(&mut self, path: String, g: Tensor<T>) {
        self.grads.insert(path, g);
    }
}

fn wrap(path: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::SingleSampleBatch { .. } => Error::SingleSampleBatch {
            path: path.to_string(),
        },
        e @ Error::Layer { .. } => e,
        other => Error::layer(path, other.to_string()),
    }
}

impl NetworkSpec {
    /// Runs the network on `batch` (`[N, ...input_shape]`). Pure: batch-norm
    /// running statistics are updated separately by
    /// [`NetworkSpec::update_running_stats`].
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        batch: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        if batch.shape().len() != self.input_shape.len() + 1
            || batch.shape()[1..] != self.input_shape[..]
        {
            return Err(Error::layer(
                "input",
                format!(
                    "batch shape {:?} does not match [N, {:?}]",
                    batch.shape(),
                    self.input_shape
                ),
            ));
        }
        let (logits, layers) = forward_layers(&self.layers, "", params, batch.clone(), mode)?;
        let cache = ForwardCache {
            id: NEXT_CACHE_ID.fetch_add(1, Ordering::Relaxed),
            params_version: params.version(),
            mode,
            output_shape: logits.shape().to_vec(),
            layers,
            consumed: false,
        };
        Ok((logits, cache))
    }

    /// Training-mode forward followed by the running-statistics update.
    pub fn forward_train<T: Scalar>(
        &self,
        params: &mut ParamStore<T>,
        batch: &Tensor<T>,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let (logits, cache) = self.forward(params, batch, Mode::Train)?;
        self.update_running_stats(params, &cache)?;
        Ok((logits, cache))
    }

    /// Folds the batch statistics recorded in a training-mode cache into the
    /// running statistics. Does nothing for eval-mode caches.
    pub fn update_running_stats<T: Scalar>(
        &self,
        params: &mut ParamStore<T>,
        cache: &ForwardCache<T>,
    ) -> Result<()> {
        fn walk<T: Scalar>(layers: &[LayerCache<T>], params: &mut ParamStore<T>) -> Result<()> {
            for l in layers {
                match &l.state {
                    LayerState::BatchNorm(bn) => {
                        let mean_path = format!("{}.running_mean", l.path);
                        let var_path = format!("{}.running_var", l.path);
                        let update = updated_running_stats(
                            bn,
                            params.buffer(&mean_path)?,
                            params.buffer(&var_path)?,
                        );
                        if let Some((m, v)) = update {
                            params.set_buffer(&mean_path, m)?;
                            params.set_buffer(&var_path, v)?;
                        }
                    }
                    LayerState::Residual(b) => walk(&b.branch, params)?,
                    _ => {}
                }
            }
            Ok(())
        }
        walk(&cache.layers, params)
    }

    /// Exact reverse pass. Consumes the cache: a second call, or a call
    /// after the parameters changed, fails with [`Error::StaleCache`].
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        cache: &mut ForwardCache<T>,
        loss_grad: &Tensor<T>,
    ) -> Result<Gradients<T>> {
        self.backward_impl(params, cache, loss_grad, false)
    }

    /// [`NetworkSpec::backward`] that also records each residual block's
    /// skip/branch gradient decomposition. The returned parameter and input
    /// gradients are bitwise identical to the unrecorded pass.
    pub fn backward_probed<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        cache: &mut ForwardCache<T>,
        loss_grad: &Tensor<T>,
    ) -> Result<Gradients<T>> {
        self.backward_impl(params, cache, loss_grad, true)
    }

    fn backward_impl<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        cache: &mut ForwardCache<T>,
        loss_grad: &Tensor<T>,
        record: bool,
    ) -> Result<Gradients<T>> {
        if cache.consumed {
            return Err(Error::StaleCache(format!(
                "cache {} was already used by a backward pass",
                cache.id
            )));
        }
        if cache.params_version != params.version() {
            return Err(Error::StaleCache(format!(
                "parameters changed since forward (version {} vs {})",
                cache.params_version,
                params.version()
            )));
        }
        if loss_grad.shape() != cache.output_shape {
            return Err(Error::ShapeMismatch {
                left: loss_grad.shape().to_vec(),
                right: cache.output_shape.clone(),
            });
        }
        cache.consumed = true;
        let mut sink = Sink {
            grads: HashMap::new(),
            blocks: record.then(Vec::new),
        };
        let input = backward_layers(&self.layers, &cache.layers, params, loss_grad.clone(), &mut sink)?;
        let mut grads = GradMap::with_capacity(params.len());
        for name in params.names() {
            let g = sink
                .grads
                .remove(name)
                .ok_or_else(|| Error::layer(name, "no gradient produced"))?;
            grads.insert(name.to_string(), g);
        }
        let mut blocks = sink.blocks.unwrap_or_default();
        blocks.reverse();
        Ok(Gradients {
            params: grads,
            input,
            blocks,
        })
    }
}

/// Backward through one residual block given `upstream = ∂L/∂y`; returns
/// `(g_skip, g_branch)`. Parameter gradients go to `param_grads` when given.
pub(crate) fn block_backward<T: Scalar>(
    block: &ResidualBlock,
    cache: &BlockCache<T>,
    params: &ParamStore<T>,
    upstream: &Tensor<T>,
    param_grads: Option<&mut GradMap<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    upstream
        .expect_same_shape(&cache.output)
        .map_err(wrap(&cache.path))?;
    let mut sink = Sink {
        grads: HashMap::new(),
        blocks: None,
    };
    let parts = block_parts(block, cache, params, upstream, &mut sink)?;
    if let Some(out) = param_grads {
        out.extend(sink.grads);
    }
    Ok(parts)
}

fn block_parts<T: Scalar>(
    block: &ResidualBlock,
    cache: &BlockCache<T>,
    params: &ParamStore<T>,
    upstream: &Tensor<T>,
    sink: &mut Sink<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g_skip = match (&block.skip, &cache.skip) {
        (Skip::Identity, None) => upstream.clone(),
        (Skip::Projection(proj), Some(pc)) => {
            backward_layer(proj, pc, params, upstream.clone(), sink)?
        }
        _ => return Err(Error::StaleCache(format!("cache does not match block `{}`", cache.path))),
    };
    let g_branch = backward_layers(&block.branch, &cache.branch, params, upstream.clone(), sink)?;
    Ok((g_skip, g_branch))
}

fn forward_layers<T: Scalar>(
    layers: &[Layer],
    prefix: &str,
    params: &ParamStore<T>,
    mut x: Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let path = join(prefix, &layer.name);
        let (y, state) = forward_layer(layer, &path, params, x, mode)?;
        caches.push(LayerCache { path, state });
        x = y;
    }
    Ok((x, caches))
}

fn relu_signs<T: Scalar>(layers: &[LayerCache<T>], out: &mut Vec<bool>) {
    for l in layers {
        match &l.state {
            LayerState::Relu { input } => out.extend(input.data().iter().map(|&v| v > T::zero())),
            LayerState::Residual(b) => relu_signs(&b.branch, out),
            _ => {}
        }
    }
}

/// Runs just the branch of a block (used by gradient checks). Also returns
/// the signs of every ReLU input on the way.
pub(crate) fn forward_branch<T: Scalar>(
    block: &ResidualBlock,
    path: &str,
    params: &ParamStore<T>,
    x: Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Vec<bool>)> {
    let (y, caches) = forward_layers(&block.branch, path, params, x, mode)?;
    let mut signs = Vec::new();
    relu_signs(&caches, &mut signs);
    Ok((y, signs))
}

/// Runs just the skip path of a block.
pub(crate) fn forward_skip<T: Scalar>(
    block: &ResidualBlock,
    path: &str,
    params: &ParamStore<T>,
    x: Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Vec<bool>)> {
    match &block.skip {
        Skip::Identity => Ok((x, Vec::new())),
        Skip::Projection(proj) => {
            let y = forward_layer(proj, &join(path, &proj.name), params, x, mode)?.0;
            Ok((y, Vec::new()))
        }
    }
}

fn forward_layer<T: Scalar>(
    layer: &Layer,
    path: &str,
    params: &ParamStore<T>,
    x: Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, LayerState<T>)> {
    let param = |name: &str| params.value(&join(path, name));
    match &layer.kind {
        LayerKind::Dense {
            inputs,
            outputs,
            bias,
        } => {
            let (inputs, outputs) = (*inputs, *outputs);
            let &[n, f] = x.shape() else {
                return Err(Error::layer(path, format!("expects [N, {inputs}], got {:?}", x.shape())));
            };
            if f != inputs {
                return Err(Error::layer(path, format!("expects [N, {inputs}], got {:?}", x.shape())));
            }
            let w_t = transpose(param("weight")?)?;
            let mut y = vec![T::zero(); n * outputs];
            if *bias {
                let b = param("bias")?;
                for row in y.chunks_mut(outputs) {
                    row.copy_from_slice(b.data());
                }
            }
            gemm_acc(n, inputs, outputs, x.data(), w_t.data(), &mut y);
            Ok((
                Tensor::from_parts(vec![n, outputs], y),
                LayerState::Dense { input: x },
            ))
        }
        LayerKind::Conv2d {
            stride, pad, bias, ..
        } => {
            let mut y = conv2d(&x, param("weight")?, ConvGeometry::new(*stride, *pad))
                .map_err(wrap(path))?;
            if *bias {
                let b = param("bias")?;
                let k = b.numel();
                let plane = y.numel() / (y.shape()[0] * k);
                for (idx, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
                    let bk = b.data()[idx % k];
                    chunk.iter_mut().for_each(|v| *v += bk);
                }
            }
            Ok((y, LayerState::Conv { input: x }))
        }
        LayerKind::BatchNorm { .. } => {
            let (y, cache) = batchnorm_forward(
                &x,
                param("gamma")?,
                param("beta")?,
                params.buffer(&format!("{path}.running_mean"))?,
                params.buffer(&format!("{path}.running_var"))?,
                mode,
            )
            .map_err(wrap(path))?;
            Ok((y, LayerState::BatchNorm(cache)))
        }
        LayerKind::Relu => {
            let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
            Ok((y, LayerState::Relu { input: x }))
        }
        LayerKind::GlobalAvgPool => {
            let &[n, c, h, w] = x.shape() else {
                return Err(Error::layer(path, format!("expects [N, C, H, W], got {:?}", x.shape())));
            };
            let plane = h * w;
            let inv = T::of(1.0 / plane as f64);
            let y = x
                .data()
                .chunks(plane)
                .map(|p| p.iter().copied().sum::<T>() * inv)
                .collect();
            Ok((
                Tensor::from_parts(vec![n, c], y),
                LayerState::Pool {
                    input_shape: x.shape().to_vec(),
                },
            ))
        }
        LayerKind::Flatten => {
            let n = x.shape()[0];
            let input_shape = x.shape().to_vec();
            let rest = x.numel() / n;
            Ok((x.into_shape(vec![n, rest]), LayerState::Flatten { input_shape }))
        }
        LayerKind::Residual(block) => {
            let (branch_out, branch) = forward_layers(&block.branch, path, params, x.clone(), mode)?;
            let (skip_out, skip) = match &block.skip {
                Skip::Identity => (x.clone(), None),
                Skip::Projection(proj) => {
                    let proj_path = join(path, &proj.name);
                    let (s, state) = forward_layer(proj, &proj_path, params, x.clone(), mode)?;
                    (
                        s,
                        Some(Box::new(LayerCache {
                            path: proj_path,
                            state,
                        })),
                    )
                }
            };
            let y = branch_out.add(&skip_out).map_err(wrap(path))?;
            let cache = BlockCache {
                path: path.to_string(),
                input: x,
                output: y.clone(),
                branch,
                skip,
            };
            Ok((y, LayerState::Residual(Box::new(cache))))
        }
    }
}

fn backward_layers<T: Scalar>(
    layers: &[Layer],
    caches: &[LayerCache<T>],
    params: &ParamStore<T>,
    mut grad: Tensor<T>,
    sink: &mut Sink<T>,
) -> Result<Tensor<T>> {
    if layers.len() != caches.len() {
        return Err(Error::StaleCache("cache does not match network".into()));
    }
    for (layer, cache) in layers.iter().zip(caches).rev() {
        grad = backward_layer(layer, cache, params, grad, sink)?;
    }
    Ok(grad)
}

thread_local! {
    static FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Runs `f` with the backward pass of every layer of kind `tag` (see
/// [`LayerKind::tag`]) deliberately wrong by a factor of 1.5: parameter
/// gradients for layers that own parameters, the input gradient otherwise.
/// Exists as a negative control for gradient checking.
#[doc(hidden)]
pub fn with_corrupted_backward<R>(tag: &'static str, f: impl FnOnce() -> R) -> R {
    struct Reset(Option<&'static str>);
    impl Drop for Reset {
        fn drop(&mut self) {
            FAULT.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(FAULT.with(|c| c.replace(Some(tag))));
    f()
}

fn backward_layer<T: Scalar>(
    layer: &Layer,
    cache: &LayerCache<T>,
    params: &ParamStore<T>,
    grad: Tensor<T>,
    sink: &mut Sink<T>,
) -> Result<Tensor<T>> {
    let dx = backward_layer_exact(layer, cache, params, grad, sink)?;
    let tag = layer.kind.tag();
    if FAULT.with(Cell::get) != Some(tag) || matches!(layer.kind, LayerKind::Residual(_)) {
        return Ok(dx);
    }
    let factor = T::of(1.5);
    let prefix = format!("{}.", cache.path);
    let mut owned = false;
    for (name, g) in sink.grads.iter_mut() {
        if name.strip_prefix(&prefix).is_some_and(|rest| !rest.contains('.')) {
            *g = g.scale(factor);
            owned = true;
        }
    }
    Ok(if owned { dx } else { dx.scale(factor) })
}

fn backward_layer_exact<T: Scalar>(
    layer: &Layer,
    cache: &LayerCache<T>,
    params: &ParamStore<T>,
    grad: Tensor<T>,
    sink: &mut Sink<T>,
) -> Result<Tensor<T>> {
    let path = cache.path.as_str();
    let param = |name: &str| params.value(&join(path, name));
    let mismatch = || Error::StaleCache(format!("cache entry `{path}` does not match its layer"));
    match (&layer.kind, &cache.state) {
        (LayerKind::Dense { inputs, outputs, bias }, LayerState::Dense { input }) => {
            let (inputs, outputs) = (*inputs, *outputs);
            let n = input.shape()[0];
            if grad.shape() != [n, outputs] {
                return Err(Error::layer(path, format!("gradient shape {:?}", grad.shape())));
            }
            let w = param("weight")?;
            let grad_t = transpose(&grad)?;
            let mut dw = vec![T::zero(); outputs * inputs];
            gemm_acc(outputs, n, inputs, grad_t.data(), input.data(), &mut dw);
            sink.put(join(path, "weight"), Tensor::from_parts(vec![outputs, inputs], dw));
            if *bias {
                let mut db = vec![T::zero(); outputs];
                for row in grad.data().chunks(outputs) {
                    for (acc, &g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                sink.put(join(path, "bias"), Tensor::from_parts(vec![outputs], db));
            }
            let mut dx = vec![T::zero(); n * inputs];
            gemm_acc(n, outputs, inputs, grad.data(), w.data(), &mut dx);
            Ok(Tensor::from_parts(vec![n, inputs], dx))
        }
        (LayerKind::Conv2d { stride, pad, bias, .. }, LayerState::Conv { input }) => {
            let (dx, dw) = conv2d_backward(input, param("weight")?, &grad, ConvGeometry::new(*stride, *pad))
                .map_err(wrap(path))?;
            sink.put(join(path, "weight"), dw);
            if *bias {
                let k = grad.shape()[1];
                let plane = grad.numel() / (grad.shape()[0] * k);
                let mut db = vec![T::zero(); k];
                for (idx, chunk) in grad.data().chunks(plane).enumerate() {
                    db[idx % k] += chunk.iter().copied().sum::<T>();
                }
                sink.put(join(path, "bias"), Tensor::from_parts(vec![k], db));
            }
            Ok(dx)
        }
        (LayerKind::BatchNorm { .. }, LayerState::BatchNorm(bn)) => {
            let (dx, dgamma, dbeta) =
                batchnorm_backward(bn, param("gamma")?, &grad).map_err(wrap(path))?;
            sink.put(join(path, "gamma"), dgamma);
            sink.put(join(path, "beta"), dbeta);
            Ok(dx)
        }
        (LayerKind::Relu, LayerState::Relu { input }) => {
            input.expect_same_shape(&grad).map_err(wrap(path))?;
            let data = input
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect();
            Ok(Tensor::from_parts(input.shape().to_vec(), data))
        }
        (LayerKind::GlobalAvgPool, LayerState::Pool { input_shape }) => {
            let plane = input_shape[2] * input_shape[3];
            let inv = T::of(1.0 / plane as f64);
            let mut dx = Vec::with_capacity(plane * grad.numel());
            for &g in grad.data() {
                dx.extend(std::iter::repeat_n(g * inv, plane));
            }
            Ok(Tensor::from_parts(input_shape.clone(), dx))
        }
        (LayerKind::Flatten, LayerState::Flatten { input_shape }) => {
            Ok(grad.into_shape(input_shape.clone()))
        }
        (LayerKind::Residual(block), LayerState::Residual(bc)) => {
            let (g_skip, g_branch) = block_parts(block, bc, params, &grad, sink)?;
            let dx = g_skip.add(&g_branch).map_err(wrap(path))?;
            if let Some(blocks) = sink.blocks.as_mut() {
                blocks.push(BlockGradients {
                    path: path.to_string(),
                    upstream: grad,
                    skip: g_skip,
                    branch: g_branch,
                });
            }
            Ok(dx)
        }
        _ => Err(mismatch()),
    }
}
