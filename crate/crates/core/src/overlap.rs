//! Gradient overlap at residual additions.
//!
//! For a block `y = skip(x) + branch(x)` the input gradient splits as
//! `∂L/∂x = g_skip + g_branch`. When the two parts point the same way the
//! sum is larger than either; [`OverlapRecord`] captures how much.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{block_backward, ForwardCache, GradMap, NetworkSpec, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Norms below this count as zero when forming the cosine.
pub const COSINE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapRecord {
    pub step: u64,
    pub block: String,
    pub skip_norm: f64,
    pub branch_norm: f64,
    pub total_norm: f64,
    pub cosine: f64,
    /// `total_norm / max(skip_norm, branch_norm)`, 0 when both are zero.
    pub amplification: f64,
}

impl OverlapRecord {
    /// Relative residual of `total² = skip² + branch² + 2·cos·skip·branch`.
    pub fn law_of_cosines_error(&self) -> f64 {
        let lhs = self.total_norm * self.total_norm;
        let rhs = self.skip_norm * self.skip_norm
            + self.branch_norm * self.branch_norm
            + 2.0 * self.cosine * self.skip_norm * self.branch_norm;
        let scale = (self.skip_norm + self.branch_norm).powi(2);
        if scale == 0.0 {
            lhs
        } else {
            (lhs - rhs).abs() / scale
        }
    }
}

/// Splits the input gradient of the residual block at `block` into its
/// skip and branch parts, given `upstream = ∂L/∂y`. Read-only with respect
/// to the cache, so it can follow or precede the full backward pass.
pub fn decompose<T: Scalar>(
    net: &NetworkSpec,
    params: &ParamStore<T>,
    cache: &ForwardCache<T>,
    block: &str,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let spec = net
        .block(block)
        .ok_or_else(|| Error::layer(block, "not a residual block of this network"))?;
    let bc = cache
        .block(block)
        .ok_or_else(|| Error::StaleCache(format!("cache holds no state for block `{block}`")))?;
    if cache.params_version() != params.version() {
        return Err(Error::StaleCache(format!(
            "parameters changed since the forward pass that filled block `{block}`"
        )));
    }
    block_backward(spec, bc, params, upstream, None)
}

pub fn metrics<T: Scalar>(
    g_skip: &Tensor<T>,
    g_branch: &Tensor<T>,
    step: u64,
    block: &str,
) -> Result<OverlapRecord> {
    g_skip.expect_same_shape(g_branch)?;
    let skip_norm = g_skip.l2_norm();
    let branch_norm = g_branch.l2_norm();
    let total_norm = g_skip
        .data()
        .iter()
        .zip(g_branch.data())
        .map(|(a, b)| {
            let s = a.as_f64() + b.as_f64();
            s * s
        })
        .sum::<f64>()
        .sqrt();
    let cosine = if skip_norm < COSINE_FLOOR || branch_norm < COSINE_FLOOR {
        0.0
    } else {
        (g_skip.dot(g_branch)? / (skip_norm * branch_norm)).clamp(-1.0, 1.0)
    };
    let largest = skip_norm.max(branch_norm);
    let amplification = if largest == 0.0 { 0.0 } else { total_norm / largest };
    Ok(OverlapRecord {
        step,
        block: block.to_string(),
        skip_norm,
        branch_norm,
        total_norm,
        cosine,
        amplification,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradStatRow {
    pub step: u64,
    pub path: String,
    pub mean: f64,
    pub std: f64,
    pub l2norm: f64,
}

/// One row per parameter tensor, in map order.
pub fn layer_grad_stats<T: Scalar>(grads: &GradMap<T>, step: u64) -> Vec<GradStatRow> {
    grads
        .iter()
        .map(|(path, g)| {
            let s = g.reduce_stats();
            GradStatRow {
                step,
                path: path.clone(),
                mean: s.mean,
                std: s.std,
                l2norm: g.l2_norm(),
            }
        })
        .collect()
}

/// Population standard deviation of the per-tensor stds in `rows`.
pub fn dispersion<'a>(rows: impl IntoIterator<Item = &'a GradStatRow>) -> f64 {
    let stds: Vec<f64> = rows.into_iter().map(|r| r.std).collect();
    if stds.is_empty() {
        return 0.0;
    }
    crate::tensor::reduce_stats(&stds).map(|s| s.std).unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, Mode, Skip};
    use crate::rng::{self, Stream};
    use crate::transforms::{apply, GradTransformSpec, TransformKind};

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, Stream::Data);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng::normal(&mut r)).collect()).unwrap()
    }

    fn net(skip: Skip, outputs: usize) -> NetworkSpec {
        NetworkSpec::new(
            [4],
            vec![
                Layer::residual(
                    "blk",
                    vec![
                        Layer::dense("fc1", 4, 5),
                        Layer::relu("act"),
                        Layer::dense("fc2", 5, outputs),
                    ],
                    skip,
                ),
                Layer::dense("head", outputs, 3),
            ],
        )
        .unwrap()
    }

    #[test]
    fn orthogonal_and_parallel() {
        let a = Tensor::<f64>::vector(&[1.0, 0.0]);
        let b = Tensor::<f64>::vector(&[0.0, 1.0]);
        let r = metrics(&a, &b, 0, "b").unwrap();
        assert_eq!(r.cosine, 0.0);
        assert!((r.amplification - 2f64.sqrt()).abs() < 1e-12);
        let r = metrics(&a, &a, 3, "b").unwrap();
        assert!((r.cosine - 1.0).abs() < 1e-15);
        assert!((r.amplification - 2.0).abs() < 1e-15);
        assert_eq!(r.step, 3);
    }

    #[test]
    fn metrics_match_direct_oracle() {
        let a = random(&[100], 1);
        let b = random(&[100], 2);
        let (mut dot, mut na, mut nb, mut nt) = (0.0, 0.0, 0.0, 0.0);
        for (x, y) in a.data().iter().zip(b.data()) {
            dot += x * y;
            na += x * x;
            nb += y * y;
            nt += (x + y) * (x + y);
        }
        let r = metrics(&a, &b, 0, "b").unwrap();
        let rel = |x: f64, y: f64| (x - y).abs() / y.abs();
        assert!(rel(r.skip_norm, na.sqrt()) < 1e-6);
        assert!(rel(r.total_norm, nt.sqrt()) < 1e-6);
        assert!(rel(r.cosine, dot / (na.sqrt() * nb.sqrt())) < 1e-6);
        assert!(r.law_of_cosines_error() < 1e-5);
        assert!(metrics(&a, &random(&[10], 3), 0, "b").is_err());
    }

    #[test]
    fn zero_parts() {
        let z = Tensor::<f64>::zeros([3]).unwrap();
        let r = metrics(&z, &z, 0, "b").unwrap();
        assert_eq!((r.cosine, r.amplification, r.total_norm), (0.0, 0.0, 0.0));
        let v = Tensor::<f64>::vector(&[1.0, 2.0, 2.0]);
        let r = metrics(&v, &z, 0, "b").unwrap();
        assert_eq!((r.cosine, r.amplification), (0.0, 1.0));
    }

    #[test]
    fn decompose_sums_to_backward() {
        for (skip, width) in [
            (Skip::Identity, 4),
            (Skip::Projection(Box::new(Layer::dense("proj", 4, 6))), 6),
        ] {
            let net = net(skip, width);
            let params = ParamStore::<f64>::init(&net, 9);
            let x = random(&[5, 4], 4);
            let (logits, mut cache) = net.forward(&params, &x, Mode::Train).unwrap();
            let upstream_head = random(logits.shape(), 5);
            // ∂L/∂y for the block is the head's input gradient.
            let grads = net.backward_probed(&params, &mut cache.clone(), &upstream_head).unwrap();
            let blk = &grads.blocks[0];
            let (gs, gb) = decompose(&net, &params, &cache, "blk", &blk.upstream).unwrap();
            assert_eq!(gs, blk.skip);
            assert_eq!(gb, blk.branch);
            let total = gs.add(&gb).unwrap();
            assert!(total.max_abs_diff(&grads.input).unwrap() <= 1e-12);

            let zero = blk.upstream.zeros_like();
            let (zs, zb) = decompose(&net, &params, &cache, "blk", &zero).unwrap();
            assert_eq!(zs.max_abs(), 0.0);
            assert_eq!(zb.max_abs(), 0.0);

            assert!(decompose(&net, &params, &cache, "head", &zero).is_err());
            assert!(decompose(&net, &params, &cache, "blk", &random(&[2, 2], 1)).is_err());
            let _ = net.backward(&params, &mut cache, &upstream_head).unwrap();
        }
    }

    #[test]
    fn zero_branch_gives_upstream() {
        let net = net(Skip::Identity, 4);
        let mut params = ParamStore::<f64>::init(&net, 1);
        let w = params.value("blk.fc2.weight").unwrap().zeros_like();
        params.set_value("blk.fc2.weight", w).unwrap();
        let b = params.value("blk.fc2.bias").unwrap().zeros_like();
        params.set_value("blk.fc2.bias", b).unwrap();
        let (_, cache) = net.forward(&params, &random(&[3, 4], 2), Mode::Eval).unwrap();
        let up = random(&[3, 4], 3);
        let (gs, gb) = decompose(&net, &params, &cache, "blk", &up).unwrap();
        assert_eq!(gs, up);
        assert_eq!(gb.max_abs(), 0.0);
    }

    #[test]
    fn grad_stats_rows() {
        let mut grads = GradMap::new();
        grads.insert("a".to_string(), Tensor::<f64>::zeros([3, 2]).unwrap());
        grads.insert("b".to_string(), random(&[40], 7));
        grads.insert("c".to_string(), random(&[8, 3], 8).scale(1e-4));
        let rows = layer_grad_stats(&grads, 12);
        assert_eq!(rows.len(), 3);
        assert_eq!((rows[0].mean, rows[0].std, rows[0].l2norm), (0.0, 0.0, 0.0));
        let s = grads["b"].reduce_stats();
        assert_eq!((rows[1].mean, rows[1].std), (s.mean, s.std));
        assert_eq!(rows[1].l2norm, grads["b"].l2_norm());
        assert!(rows.iter().all(|r| r.step == 12));

        grads.shift_remove("a");
        let z = apply(&GradTransformSpec::new(TransformKind::Znorm), &grads).unwrap();
        for r in layer_grad_stats(&z, 0) {
            assert!(r.mean.abs() <= 1e-6 && (0.9..=1.0).contains(&r.std), "{r:?}");
        }
        assert!(dispersion(&layer_grad_stats(&z, 0)) < dispersion(&layer_grad_stats(&grads, 0)));
    }

    proptest::proptest! {
        #[test]
        fn record_invariants(n in 1usize..64, s1 in proptest::prelude::any::<u64>(), s2 in proptest::prelude::any::<u64>(), k in -4.0f64..4.0) {
            let a = random(&[n], s1);
            let b = random(&[n], s2).add(&a.scale(k)).unwrap();
            let r = metrics(&a, &b, 0, "b").unwrap();
            proptest::prop_assert!((-1.0..=1.0).contains(&r.cosine));
            proptest::prop_assert!(r.amplification <= 2.0 + 1e-12);
            proptest::prop_assert!(r.total_norm <= r.skip_norm + r.branch_norm + 1e-12);
            proptest::prop_assert!(r.law_of_cosines_error() < 1e-12);
        }

        #[test]
        fn split_is_exact(seed in proptest::prelude::any::<u64>(), rows in 2usize..6) {
            let net = net(Skip::Identity, 4);
            let params = ParamStore::<f64>::init(&net, seed);
            let x = random(&[rows, 4], seed ^ 1);
            let (logits, mut cache) = net.forward(&params, &x, Mode::Train).unwrap();
            let up = random(logits.shape(), seed ^ 2);
            let grads = net.backward_probed(&params, &mut cache, &up).unwrap();
            let total = grads.blocks[0].input();
            proptest::prop_assert!(total.max_abs_diff(&grads.input).unwrap() <= 1e-12);
        }
    }
}
