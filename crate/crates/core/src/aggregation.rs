//! Weighted parameter averaging, shared by FedAvg and global-model merges.

use thiserror::Error;

use crate::tensor::{ModelParams, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("nothing to aggregate")]
    Empty,
    #[error("update {index}: {source}")]
    LayoutMismatch { index: usize, source: TensorError },
    #[error("update {index} has non-positive or non-finite weight {weight}")]
    BadWeight { index: usize, weight: f64 },
}

/// `sum(w_i * v_i) / sum(w_i)` elementwise, accumulated in list order.
/// A single input is returned unchanged (bit for bit).
pub fn fedavg(updates: &[(&ModelParams, f64)]) -> Result<ModelParams, AggregationError> {
    let (first, _) = updates.first().ok_or(AggregationError::Empty)?;
    for (index, (p, w)) in updates.iter().enumerate() {
        if !(*w > 0.0 && w.is_finite()) {
            return Err(AggregationError::BadWeight { index, weight: *w });
        }
        first
            .check_layout(p)
            .map_err(|source| AggregationError::LayoutMismatch { index, source })?;
    }
    if updates.len() == 1 {
        return Ok((*first).clone());
    }
    let total: f64 = updates.iter().map(|(_, w)| w).sum();
    let mut out = first.zeros_like();
    for (p, w) in updates {
        for (acc, (_, t)) in out.tensors_mut().zip(p.entries()) {
            for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += w * v;
            }
        }
    }
    for t in out.tensors_mut() {
        for a in t.data_mut() {
            *a /= total;
        }
    }
    Ok(out)
}

/// Two-model [`fedavg`].
pub fn merge_models(
    a: &ModelParams,
    wa: f64,
    b: &ModelParams,
    wb: f64,
) -> Result<ModelParams, AggregationError> {
    fedavg(&[(a, wa), (b, wb)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::CnnArch;
    use crate::rng::DetRng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn constant(v: f64) -> ModelParams {
        CnnArch::shrunken().zero_params().filled_like(v)
    }

    fn random_params(seed: u64) -> ModelParams {
        let mut rng = DetRng::new(seed);
        let mut p = CnnArch::shrunken().zero_params();
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.uniform(-3.0, 3.0);
            }
        }
        p
    }

    #[test]
    fn single_update_is_identity() {
        let p = random_params(1);
        assert!(fedavg(&[(&p, 7.0)]).unwrap().bit_eq(&p));
    }

    #[test]
    fn equal_weight_midpoint() {
        let (a, b) = (constant(0.0), constant(1.0));
        let m = fedavg(&[(&a, 5.0), (&b, 5.0)]).unwrap();
        assert!(m.flatten().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn matches_naive_loop() {
        let ps: Vec<ModelParams> = (10..13).map(random_params).collect();
        let ws = [1.0, 2.0, 3.0];
        let got = fedavg(&[(&ps[0], ws[0]), (&ps[1], ws[1]), (&ps[2], ws[2])])
            .unwrap()
            .flatten();
        let flat: Vec<Vec<f64>> = ps.iter().map(ModelParams::flatten).collect();
        for i in 0..got.len() {
            let mut num = 0.0;
            for k in 0..3 {
                num += ws[k] * flat[k][i];
            }
            assert!((got[i] - num / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_examples() {
        let p = random_params(4);
        assert!(merge_models(&p, 2.0, &p, 5.0).unwrap().max_abs_diff(&p) < 1e-15);
        let q = random_params(5);
        let ab = merge_models(&p, 2.0, &q, 3.0).unwrap();
        let ba = merge_models(&q, 3.0, &p, 2.0).unwrap();
        assert!(ab.max_abs_diff(&ba) < 1e-12);
        // (2*3 + 1*0) / 3 = 2
        let m = merge_models(&constant(3.0), 2.0, &constant(0.0), 1.0).unwrap();
        assert!(m.flatten().iter().all(|&v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn error_variants() {
        let p = constant(1.0);
        assert_eq!(fedavg(&[]), Err(AggregationError::Empty));
        assert!(matches!(
            fedavg(&[(&p, 1.0), (&p, 0.0)]),
            Err(AggregationError::BadWeight { index: 1, .. })
        ));
        assert!(matches!(
            fedavg(&[(&p, -1.0)]),
            Err(AggregationError::BadWeight { index: 0, .. })
        ));
        let other = ModelParams::new(vec![("w".into(), Tensor::zeros(&[1]))]).unwrap();
        assert!(matches!(
            fedavg(&[(&p, 1.0), (&other, 1.0)]),
            Err(AggregationError::LayoutMismatch { index: 1, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn convex_scale_and_permutation_invariant(
            seeds in prop::collection::vec(any::<u64>(), 1..5),
            raw_w in prop::collection::vec(0.1f64..100.0, 5),
            scale in 0.01f64..100.0,
        ) {
            let ps: Vec<ModelParams> = seeds.iter().map(|&s| random_params(s)).collect();
            let ups: Vec<(&ModelParams, f64)> = ps.iter().zip(&raw_w).map(|(p, &w)| (p, w)).collect();
            let avg = fedavg(&ups).unwrap();
            let flats: Vec<Vec<f64>> = ps.iter().map(ModelParams::flatten).collect();
            for (i, v) in avg.flatten().iter().enumerate() {
                let lo = flats.iter().map(|f| f[i]).fold(f64::INFINITY, f64::min);
                let hi = flats.iter().map(|f| f[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
            let scaled: Vec<(&ModelParams, f64)> = ups.iter().map(|(p, w)| (*p, w * scale)).collect();
            prop_assert!(fedavg(&scaled).unwrap().max_abs_diff(&avg) < 1e-12);
            let reversed: Vec<(&ModelParams, f64)> = ups.iter().rev().cloned().collect();
            prop_assert!(fedavg(&reversed).unwrap().max_abs_diff(&avg) < 1e-12);
        }
    }
}
