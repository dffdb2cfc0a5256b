//! Gradient transforms applied after backpropagation and before the
//! optimizer: z-score normalization plus the comparison baselines.
//!
//! Z-score normalization standardizes each parameter's gradient tensor on
//! its own, over all of its elements:
//!
//! ```text
//! ĝ = (g − mean(g)) / (std(g) + ε)
//! ```
//!
//! with the population standard deviation. A constant tensor maps to exact
//! zeros and a single-element tensor is returned unchanged.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::GradMap;
use crate::tensor::{reduce_stats, Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_CLIP_THRESHOLD: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Identity,
    Znorm,
    /// Global-norm clipping.
    Clip,
    Centralize,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::Identity,
        TransformKind::Znorm,
        TransformKind::Clip,
        TransformKind::Centralize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Znorm => "znorm",
            TransformKind::Clip => "clip",
            TransformKind::Centralize => "centralize",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown transform `{s}` (expected identity, znorm, clip or centralize)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradTransformSpec {
    pub kind: TransformKind,
    pub epsilon: f64,
    pub clip_threshold: f64,
}

impl GradTransformSpec {
    pub fn new(kind: TransformKind) -> Self {
        GradTransformSpec {
            kind,
            epsilon: DEFAULT_EPSILON,
            clip_threshold: DEFAULT_CLIP_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.clip_threshold > 0.0 && self.clip_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "clip_threshold must be positive, got {}",
                self.clip_threshold
            )));
        }
        Ok(())
    }
}

fn require_finite<T: Scalar>(g: &Tensor<T>) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            path: "gradient".into(),
        })
    }
}

/// Z-score of one gradient tensor. `epsilon = 0` is accepted here (the
/// exact-arithmetic form); zero spread still yields zeros.
pub fn znorm<T: Scalar>(g: &Tensor<T>, epsilon: f64) -> Result<Tensor<T>> {
    require_finite(g)?;
    if g.numel() == 1 {
        return Ok(g.clone());
    }
    let stats = reduce_stats(g.data())?;
    if stats.std == 0.0 {
        return Ok(g.zeros_like());
    }
    let denom = stats.std + epsilon;
    Ok(g.map(|v| T::of((v.as_f64() - stats.mean) / denom)))
}

/// Mean subtraction only.
pub fn centralize<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    require_finite(g)?;
    let mean = reduce_stats(g.data())?.mean;
    Ok(g.map(|v| T::of(v.as_f64() - mean)))
}

/// Euclidean norm of all tensors concatenated.
pub fn global_norm<T: Scalar>(grads: &GradMap<T>) -> f64 {
    grads.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescales every tensor by `threshold / G` when the global norm `G`
/// exceeds `threshold`; otherwise returns an unchanged copy.
pub fn clip_global_norm<T: Scalar>(grads: &GradMap<T>, threshold: f64) -> GradMap<T> {
    let total = global_norm(grads);
    if total <= threshold {
        return grads.clone();
    }
    let scale = threshold / total;
    grads
        .iter()
        .map(|(k, g)| (k.clone(), g.map(|v| T::of(v.as_f64() * scale))))
        .collect()
}

/// Applies `spec` to a gradient map, producing a fresh map. Per-tensor
/// transforms run independently on each parameter; clipping is global.
pub fn apply<T: Scalar>(spec: &GradTransformSpec, grads: &GradMap<T>) -> Result<GradMap<T>> {
    for (path, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite { path: path.clone() });
        }
    }
    let per_tensor = |f: &dyn Fn(&Tensor<T>) -> Result<Tensor<T>>| -> Result<GradMap<T>> {
        grads
            .iter()
            .map(|(path, g)| {
                let out = f(g).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFinite { path: path.clone() },
                    other => other,
                })?;
                Ok((path.clone(), out))
            })
            .collect()
    };
    match spec.kind {
        TransformKind::Identity => Ok(grads.clone()),
        TransformKind::Znorm => per_tensor(&|g| znorm(g, spec.epsilon)),
        TransformKind::Centralize => per_tensor(&|g| centralize(g)),
        TransformKind::Clip => Ok(clip_global_norm(grads, spec.clip_threshold)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};
    use proptest::prelude::*;

    fn random(n: usize, seed: u64, scale: f64, shift: f64) -> Tensor<f64> {
        let mut r = rng::stream(seed, Stream::Data);
        Tensor::new([n], (0..n).map(|_| shift + scale * rng::normal(&mut r)).collect()).unwrap()
    }

    fn map_of(items: Vec<(&str, Tensor<f64>)>) -> GradMap<f64> {
        items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    #[test]
    fn znorm_hand_example() {
        let out = znorm(&Tensor::<f64>::vector(&[1.0, 2.0, 3.0]), 0.0).unwrap();
        // sigma = sqrt(2/3) = 0.816497; 1/sigma = 1.224745
        let want = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (o, w) in out.data().iter().zip(want) {
            assert!((o - w).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_gradient_maps_to_zeros() {
        for c in [0.0, 0.1, -7.25, 3e5] {
            for eps in [0.0, 1e-8] {
                let out = znorm(&Tensor::<f64>::vector(&[c, c, c]), eps).unwrap();
                assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
            }
        }
        let out = znorm(&Tensor::<f32>::full([4, 4], 0.3).unwrap(), 1e-8).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_element_is_unchanged() {
        let g = Tensor::<f32>::vector(&[4.5]);
        assert_eq!(znorm(&g, 1e-8).unwrap(), g);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let grads = map_of(vec![
            ("a.weight", Tensor::vector(&[1.0, 2.0])),
            ("b.bias", Tensor::vector(&[f64::NAN, 2.0])),
        ]);
        for kind in TransformKind::ALL {
            let err = apply(&GradTransformSpec::new(kind), &grads).unwrap_err();
            assert!(matches!(&err, Error::NonFinite { path } if path == "b.bias"), "{err}");
        }
        assert!(znorm(&Tensor::<f64>::vector(&[f64::INFINITY, 1.0]), 1e-8).is_err());
    }

    #[test]
    fn centralize_examples() {
        let out = centralize(&Tensor::<f64>::vector(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(out.data(), &[-1.0, 0.0, 1.0]);
        let zero_mean = Tensor::<f64>::vector(&[-2.0, 0.5, 1.5]);
        assert_eq!(centralize(&zero_mean).unwrap(), zero_mean);
        let g = random(1000, 3, 5.0, 2.0);
        let out = centralize(&g).unwrap();
        assert!(out.reduce_stats().mean.abs() <= 1e-7 * g.max_abs());
    }

    #[test]
    fn clip_examples() {
        let small = map_of(vec![("w", Tensor::vector(&[0.3, 0.4]))]);
        assert_eq!(clip_global_norm(&small, 1.0), small);

        let big = map_of(vec![("w", Tensor::vector(&[3.0, 4.0]))]);
        let out = clip_global_norm(&big, 1.0);
        assert!((out["w"].data()[0] - 0.6).abs() < 1e-15);
        assert!((out["w"].data()[1] - 0.8).abs() < 1e-15);

        let three = map_of(vec![
            ("a", random(10, 1, 1.0, 0.0)),
            ("b", random(7, 2, 1.0, 0.0)),
            ("c", random(3, 3, 1.0, 0.0)),
        ]);
        let total = global_norm(&three);
        for threshold in [0.5, 1.0, 2.0, 100.0] {
            let after = global_norm(&clip_global_norm(&three, threshold));
            let want = total.min(threshold);
            assert!((after - want).abs() <= 1e-6 * want);
        }
    }

    #[test]
    fn apply_identity_and_fresh_output() {
        let grads = map_of(vec![("a", random(5, 1, 1.0, 0.0)), ("b", random(3, 2, 1.0, 0.0))]);
        let out = apply(&GradTransformSpec::new(TransformKind::Identity), &grads).unwrap();
        assert_eq!(out, grads);
        let before = grads.clone();
        apply(&GradTransformSpec::new(TransformKind::Znorm), &grads).unwrap();
        assert_eq!(grads, before);
    }

    #[test]
    fn apply_znorm_per_parameter() {
        let grads = map_of(vec![
            ("a", random(50, 1, 1e-3, 0.5)),
            ("b", random(20, 2, 10.0, -3.0)),
            ("c", random(8, 3, 1e-5, 0.0)),
            ("scalar", Tensor::vector(&[0.25])),
        ]);
        let spec = GradTransformSpec::new(TransformKind::Znorm);
        let out = apply(&spec, &grads).unwrap();
        assert_eq!(out["scalar"], grads["scalar"]);
        for key in ["a", "b", "c"] {
            let sigma = grads[key].reduce_stats().std;
            let s = out[key].reduce_stats();
            let upper = sigma / (sigma + spec.epsilon);
            assert!(s.mean.abs() <= 1e-6);
            assert!(s.std <= upper * (1.0 + 1e-12) && s.std >= 0.99 * upper, "{key}: {}", s.std);
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = GradTransformSpec::new(TransformKind::Znorm);
        spec.validate().unwrap();
        spec.epsilon = 0.0;
        assert!(spec.validate().is_err());
        spec.epsilon = 1e-8;
        spec.clip_threshold = -1.0;
        assert!(spec.validate().is_err());
        assert_eq!("clip".parse::<TransformKind>().unwrap(), TransformKind::Clip);
        assert!("sign".parse::<TransformKind>().is_err());
    }

    proptest! {
        #[test]
        fn shift_scale_invariance(n in 2usize..200, seed in any::<u64>(), a in 1e-3f64..1e3, b in -1e3f64..1e3) {
            let h = random(n, seed, 1.0, 0.0);
            let g = h.map(|v| a * v + b);
            let zh = znorm(&h, 0.0).unwrap();
            prop_assert!(znorm(&g, 0.0).unwrap().max_abs_diff(&zh).unwrap() <= 1e-9);
            let flipped = h.map(|v| -a * v + b);
            let neg = zh.map(|v| -v);
            prop_assert!(znorm(&flipped, 0.0).unwrap().max_abs_diff(&neg).unwrap() <= 1e-9);
        }

        #[test]
        fn standardized_moments(n in 2usize..500, seed in any::<u64>(), log_scale in -6.0f64..6.0) {
            let g = random(n, seed, 10f64.powf(log_scale), 0.0);
            let sigma = g.reduce_stats().std;
            let s = znorm(&g, DEFAULT_EPSILON).unwrap().reduce_stats();
            let want = sigma / (sigma + DEFAULT_EPSILON);
            prop_assert!(s.mean.abs() <= 1e-6);
            prop_assert!((s.std - want).abs() <= 1e-5 * want);
        }

        #[test]
        fn ordering_preserved(n in 2usize..100, seed in any::<u64>()) {
            let g = random(n, seed, 3.0, 1.0);
            let z = znorm(&g, DEFAULT_EPSILON).unwrap();
            let order = |t: &Tensor<f64>| {
                let mut idx: Vec<usize> = (0..t.numel()).collect();
                idx.sort_by(|&i, &j| t.data()[i].total_cmp(&t.data()[j]).then(i.cmp(&j)));
                idx
            };
            prop_assert_eq!(order(&g), order(&z));
        }

        #[test]
        fn repeated_application(n in 2usize..50, seed in any::<u64>(), scale in 1.0f64..100.0) {
            let g = random(n, seed, scale, 0.0);
            prop_assume!(g.reduce_stats().std >= 1.0);
            let eps = 1e-3;
            let once = znorm(&g, eps).unwrap();
            let twice = znorm(&once, eps).unwrap();
            prop_assert!(twice.max_abs_diff(&once).unwrap() <= 10.0 * eps);

            let c1 = centralize(&g).unwrap();
            prop_assert!(centralize(&c1).unwrap().max_abs_diff(&c1).unwrap() <= 1e-12 * scale);
        }
    }
}
