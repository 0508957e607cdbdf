//! The two-convolution MNIST classifier and its manual backward pass.
//!
//! ```text
//! input 1x28x28
//!   conv1 5x5 (c1 filters) -> maxpool 2x2 -> relu      c1 x 12 x 12
//!   conv2 5x5 (c2 filters) -> maxpool 2x2 -> relu      c2 x 4 x 4
//!   flatten (16*c2) -> fc1 (hidden) -> relu -> fc2 (10) -> log-softmax
//! ```

use serde::{Deserialize, Serialize};

use super::kernels::{col2im, gemm, im2col, maxpool2, Mat, K};
use super::NnError;
use crate::rng::DetRng;
use crate::tensor::{ModelParams, Tensor};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;

const C1_SIDE: usize = IMAGE_SIDE - K + 1; // 24
const P1_SIDE: usize = C1_SIDE / 2; // 12
const C2_SIDE: usize = P1_SIDE - K + 1; // 8
const P2_SIDE: usize = C2_SIDE / 2; // 4

/// Channel and hidden-unit widths of the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArch {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub hidden: usize,
}

impl Default for CnnArch {
    fn default() -> Self {
        Self::simple_cnn()
    }
}

impl CnnArch {
    /// 10 and 20 conv filters, 50 hidden units: 21,840 parameters.
    pub const fn simple_cnn() -> Self {
        Self {
            conv1_channels: 10,
            conv2_channels: 20,
            hidden: 50,
        }
    }

    /// Narrow variant used for finite-difference gradient checks.
    pub const fn shrunken() -> Self {
        Self {
            conv1_channels: 2,
            conv2_channels: 2,
            hidden: 8,
        }
    }

    pub fn flat_dim(&self) -> usize {
        self.conv2_channels * P2_SIDE * P2_SIDE
    }

    /// `(name, shape, fan_in)` for every tensor, in canonical order.
    fn spec(&self) -> [(&'static str, Vec<usize>, usize); 8] {
        let (c1, c2, h) = (self.conv1_channels, self.conv2_channels, self.hidden);
        let f = self.flat_dim();
        [
            ("conv1.weight", vec![c1, 1, K, K], K * K),
            ("conv1.bias", vec![c1], K * K),
            ("conv2.weight", vec![c2, c1, K, K], c1 * K * K),
            ("conv2.bias", vec![c2], c1 * K * K),
            ("fc1.weight", vec![h, f], f),
            ("fc1.bias", vec![h], f),
            ("fc2.weight", vec![NUM_CLASSES, h], h),
            ("fc2.bias", vec![NUM_CLASSES], h),
        ]
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.spec()
            .into_iter()
            .map(|(n, s, _)| (n.to_string(), s))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.spec()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    /// Weights i.i.d. uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    /// Tensors are filled in canonical order from one [`DetRng`] stream.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = DetRng::new(seed);
        let entries = self
            .spec()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.uniform(-bound, bound)).collect()
                };
                (
                    name.to_string(),
                    Tensor::new(shape, data).expect("shape from arch"),
                )
            })
            .collect();
        ModelParams::new(entries).expect("names are unique")
    }

    /// All-zero parameters of this layout.
    pub fn zero_params(&self) -> ModelParams {
        let entries = self
            .spec()
            .into_iter()
            .map(|(name, shape, _)| (name.to_string(), Tensor::zeros(&shape)))
            .collect();
        ModelParams::new(entries).expect("names are unique")
    }

    pub fn check_params(&self, params: &ModelParams) -> Result<(), NnError> {
        let layout = self.layout();
        let ok = params.len() == layout.len()
            && params
                .iter()
                .zip(&layout)
                .all(|((n, t), (ln, ls))| n == ln && t.shape() == ls.as_slice());
        if ok {
            Ok(())
        } else {
            Err(NnError::ParamLayout(format!(
                "expected {:?}, got {:?}",
                layout,
                params.layout()
            )))
        }
    }

    /// Row-wise log-probabilities (`n x 10`) for an `n x 1 x 28 x 28` batch.
    pub fn forward(&self, params: &ModelParams, batch: &Tensor) -> Result<Tensor, NnError> {
        let n = self.check_batch(params, batch)?;
        let cache = self.forward_cached(params, batch.data(), n);
        Ok(Tensor::batch(vec![n, NUM_CLASSES], cache.logp))
    }

    /// Mean negative log-likelihood and its gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        params: &ModelParams,
        batch: &Tensor,
        labels: &[u8],
    ) -> Result<(f64, ModelParams), NnError> {
        let n = self.check_batch(params, batch)?;
        self.check_labels(labels, n)?;
        if n == 0 {
            return Err(NnError::EmptyBatch);
        }
        Ok(self.loss_and_gradients_raw(params, batch.data(), labels))
    }

    /// Loss only; cheaper than [`CnnArch::loss_and_gradients`].
    pub fn loss(
        &self,
        params: &ModelParams,
        batch: &Tensor,
        labels: &[u8],
    ) -> Result<f64, NnError> {
        let n = self.check_batch(params, batch)?;
        self.check_labels(labels, n)?;
        if n == 0 {
            return Err(NnError::EmptyBatch);
        }
        let cache = self.forward_cached(params, batch.data(), n);
        Ok(nll(&cache.logp, labels))
    }

    fn check_batch(&self, params: &ModelParams, batch: &Tensor) -> Result<usize, NnError> {
        self.check_params(params)?;
        match batch.shape() {
            [n, 1, IMAGE_SIDE, IMAGE_SIDE] => Ok(*n),
            other => Err(NnError::BatchShape(other.to_vec())),
        }
    }

    fn check_labels(&self, labels: &[u8], n: usize) -> Result<(), NnError> {
        if labels.len() != n {
            return Err(NnError::LabelCount {
                rows: n,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(NnError::LabelOutOfRange(bad));
        }
        Ok(())
    }

    /// Unchecked fast path used by the training loop. `images` holds
    /// `labels.len()` images back to back.
    pub(crate) fn loss_and_gradients_raw(
        &self,
        params: &ModelParams,
        images: &[f64],
        labels: &[u8],
    ) -> (f64, ModelParams) {
        let n = labels.len();
        let cache = self.forward_cached(params, images, n);
        let loss = nll(&cache.logp, labels);
        (loss, self.backward(params, &cache, labels))
    }

    pub(crate) fn forward_cached(&self, params: &ModelParams, images: &[f64], n: usize) -> Cache {
        let (c1, c2, hid) = (self.conv1_channels, self.conv2_channels, self.hidden);
        let w = Weights::of(params);
        let p1 = C1_SIDE * C1_SIDE;
        let p2 = C2_SIDE * C2_SIDE;
        let k1 = K * K;
        let k2 = c1 * K * K;
        let a1_len = c1 * P1_SIDE * P1_SIDE;
        let flat = self.flat_dim();

        let mut cols1 = vec![0.0; n * k1 * p1];
        let mut idx1 = vec![0u32; n * a1_len];
        let mut a1 = vec![0.0; n * a1_len];
        let mut cols2 = vec![0.0; n * k2 * p2];
        let mut idx2 = vec![0u32; n * flat];
        let mut a2 = vec![0.0; n * flat];

        let mut conv1_out = vec![0.0; c1 * p1];
        let mut conv2_out = vec![0.0; c2 * p2];
        for s in 0..n {
            let img = &images[s * IMAGE_PIXELS..(s + 1) * IMAGE_PIXELS];
            let cols = &mut cols1[s * k1 * p1..(s + 1) * k1 * p1];
            im2col(img, 1, IMAGE_SIDE, IMAGE_SIDE, cols);
            fill_bias_rows(&mut conv1_out, w.conv1_b, p1);
            gemm(
                1.0,
                Mat::row_major(w.conv1_w, c1, k1),
                Mat::row_major(cols, k1, p1),
                1.0,
                &mut conv1_out,
            );
            let a = &mut a1[s * a1_len..(s + 1) * a1_len];
            maxpool2(
                &conv1_out,
                c1,
                C1_SIDE,
                C1_SIDE,
                a,
                &mut idx1[s * a1_len..(s + 1) * a1_len],
            );
            relu_inplace(a);

            let cols = &mut cols2[s * k2 * p2..(s + 1) * k2 * p2];
            im2col(a, c1, P1_SIDE, P1_SIDE, cols);
            fill_bias_rows(&mut conv2_out, w.conv2_b, p2);
            gemm(
                1.0,
                Mat::row_major(w.conv2_w, c2, k2),
                Mat::row_major(cols, k2, p2),
                1.0,
                &mut conv2_out,
            );
            let a = &mut a2[s * flat..(s + 1) * flat];
            maxpool2(
                &conv2_out,
                c2,
                C2_SIDE,
                C2_SIDE,
                a,
                &mut idx2[s * flat..(s + 1) * flat],
            );
            relu_inplace(a);
        }

        // fc1: z3 = a2 * W1^T + b1
        let mut a3 = vec![0.0; n * hid];
        for row in a3.chunks_mut(hid) {
            row.copy_from_slice(w.fc1_b);
        }
        gemm(
            1.0,
            Mat::row_major(&a2, n, flat),
            Mat::row_major(w.fc1_w, hid, flat).t(),
            1.0,
            &mut a3,
        );
        relu_inplace(&mut a3);

        let mut logp = vec![0.0; n * NUM_CLASSES];
        for row in logp.chunks_mut(NUM_CLASSES) {
            row.copy_from_slice(w.fc2_b);
        }
        gemm(
            1.0,
            Mat::row_major(&a3, n, hid),
            Mat::row_major(w.fc2_w, NUM_CLASSES, hid).t(),
            1.0,
            &mut logp,
        );
        for row in logp.chunks_mut(NUM_CLASSES) {
            log_softmax_inplace(row);
        }

        Cache {
            n,
            cols1,
            idx1,
            a1,
            cols2,
            idx2,
            a2,
            a3,
            logp,
        }
    }

    fn backward(&self, params: &ModelParams, cache: &Cache, labels: &[u8]) -> ModelParams {
        let (c1, c2, hid) = (self.conv1_channels, self.conv2_channels, self.hidden);
        let w = Weights::of(params);
        let n = cache.n;
        let flat = self.flat_dim();
        let p1 = C1_SIDE * C1_SIDE;
        let p2 = C2_SIDE * C2_SIDE;
        let k1 = K * K;
        let k2 = c1 * K * K;
        let a1_len = c1 * P1_SIDE * P1_SIDE;
        let inv_n = 1.0 / n as f64;

        // d loss / d logits = (softmax - onehot) / n
        let mut dz4 = vec![0.0; n * NUM_CLASSES];
        for (s, (d, lp)) in dz4
            .chunks_mut(NUM_CLASSES)
            .zip(cache.logp.chunks(NUM_CLASSES))
            .enumerate()
        {
            for (dv, &l) in d.iter_mut().zip(lp) {
                *dv = l.exp() * inv_n;
            }
            d[labels[s] as usize] -= inv_n;
        }

        let mut g_fc2_w = vec![0.0; NUM_CLASSES * hid];
        gemm(
            1.0,
            Mat::row_major(&dz4, n, NUM_CLASSES).t(),
            Mat::row_major(&cache.a3, n, hid),
            0.0,
            &mut g_fc2_w,
        );
        let g_fc2_b = column_sums(&dz4, NUM_CLASSES);

        let mut dz3 = vec![0.0; n * hid];
        gemm(
            1.0,
            Mat::row_major(&dz4, n, NUM_CLASSES),
            Mat::row_major(w.fc2_w, NUM_CLASSES, hid),
            0.0,
            &mut dz3,
        );
        relu_backward(&mut dz3, &cache.a3);

        let mut g_fc1_w = vec![0.0; hid * flat];
        gemm(
            1.0,
            Mat::row_major(&dz3, n, hid).t(),
            Mat::row_major(&cache.a2, n, flat),
            0.0,
            &mut g_fc1_w,
        );
        let g_fc1_b = column_sums(&dz3, hid);

        let mut da2 = vec![0.0; n * flat];
        gemm(
            1.0,
            Mat::row_major(&dz3, n, hid),
            Mat::row_major(w.fc1_w, hid, flat),
            0.0,
            &mut da2,
        );
        relu_backward(&mut da2, &cache.a2);

        let mut g_conv2_w = vec![0.0; c2 * k2];
        let mut g_conv2_b = vec![0.0; c2];
        let mut g_conv1_w = vec![0.0; c1 * k1];
        let mut g_conv1_b = vec![0.0; c1];

        let mut dconv2 = vec![0.0; c2 * p2];
        let mut dcols2 = vec![0.0; k2 * p2];
        let mut da1 = vec![0.0; a1_len];
        let mut dconv1 = vec![0.0; c1 * p1];
        for s in 0..n {
            // unpool 2
            dconv2.iter_mut().for_each(|v| *v = 0.0);
            let idx = &cache.idx2[s * flat..(s + 1) * flat];
            for (&i, &g) in idx.iter().zip(&da2[s * flat..(s + 1) * flat]) {
                dconv2[i as usize] += g;
            }
            for (gb, row) in g_conv2_b.iter_mut().zip(dconv2.chunks(p2)) {
                *gb += row.iter().sum::<f64>();
            }
            let cols = &cache.cols2[s * k2 * p2..(s + 1) * k2 * p2];
            gemm(
                1.0,
                Mat::row_major(&dconv2, c2, p2),
                Mat::row_major(cols, k2, p2).t(),
                1.0,
                &mut g_conv2_w,
            );
            gemm(
                1.0,
                Mat::row_major(w.conv2_w, c2, k2).t(),
                Mat::row_major(&dconv2, c2, p2),
                0.0,
                &mut dcols2,
            );
            da1.iter_mut().for_each(|v| *v = 0.0);
            col2im(&dcols2, c1, P1_SIDE, P1_SIDE, &mut da1);
            relu_backward(&mut da1, &cache.a1[s * a1_len..(s + 1) * a1_len]);

            // unpool 1
            dconv1.iter_mut().for_each(|v| *v = 0.0);
            let idx = &cache.idx1[s * a1_len..(s + 1) * a1_len];
            for (&i, &g) in idx.iter().zip(&da1) {
                dconv1[i as usize] += g;
            }
            for (gb, row) in g_conv1_b.iter_mut().zip(dconv1.chunks(p1)) {
                *gb += row.iter().sum::<f64>();
            }
            let cols = &cache.cols1[s * k1 * p1..(s + 1) * k1 * p1];
            gemm(
                1.0,
                Mat::row_major(&dconv1, c1, p1),
                Mat::row_major(cols, k1, p1).t(),
                1.0,
                &mut g_conv1_w,
            );
        }

        let grads = [
            g_conv1_w, g_conv1_b, g_conv2_w, g_conv2_b, g_fc1_w, g_fc1_b, g_fc2_w, g_fc2_b,
        ];
        let entries = self
            .layout()
            .into_iter()
            .zip(grads)
            .map(|((name, shape), g)| (name, Tensor::new(shape, g).expect("gradient shape")))
            .collect();
        ModelParams::new(entries).expect("names are unique")
    }
}

pub(crate) struct Cache {
    n: usize,
    cols1: Vec<f64>,
    idx1: Vec<u32>,
    a1: Vec<f64>,
    cols2: Vec<f64>,
    idx2: Vec<u32>,
    a2: Vec<f64>,
    a3: Vec<f64>,
    pub(crate) logp: Vec<f64>,
}

struct Weights<'a> {
    conv1_w: &'a [f64],
    conv1_b: &'a [f64],
    conv2_w: &'a [f64],
    conv2_b: &'a [f64],
    fc1_w: &'a [f64],
    fc1_b: &'a [f64],
    fc2_w: &'a [f64],
    fc2_b: &'a [f64],
}

impl<'a> Weights<'a> {
    /// Relies on the canonical entry order checked by `check_params`.
    fn of(params: &'a ModelParams) -> Self {
        let e = params.entries();
        Self {
            conv1_w: e[0].1.data(),
            conv1_b: e[1].1.data(),
            conv2_w: e[2].1.data(),
            conv2_b: e[3].1.data(),
            fc1_w: e[4].1.data(),
            fc1_b: e[5].1.data(),
            fc2_w: e[6].1.data(),
            fc2_b: e[7].1.data(),
        }
    }
}

fn fill_bias_rows(out: &mut [f64], bias: &[f64], row_len: usize) {
    for (row, &b) in out.chunks_mut(row_len).zip(bias) {
        row.iter_mut().for_each(|v| *v = b);
    }
}

fn relu_inplace(xs: &mut [f64]) {
    for x in xs {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes gradient entries whose ReLU output was not positive.
fn relu_backward(grad: &mut [f64], activated: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn log_softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row {
        *v -= lse;
    }
}

fn column_sums(m: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in m.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn nll(logp: &[f64], labels: &[u8]) -> f64 {
    let total: f64 = logp
        .chunks(NUM_CLASSES)
        .zip(labels)
        .map(|(row, &l)| -row[l as usize])
        .sum();
    total / labels.len() as f64
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(n: usize, seed: u64) -> Tensor {
        let mut rng = DetRng::new(seed);
        let data = (0..n * IMAGE_PIXELS)
            .map(|_| rng.uniform(-1.0, 2.0))
            .collect();
        Tensor::new(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], data).unwrap()
    }

    #[test]
    fn simple_cnn_has_expected_layout() {
        let arch = CnnArch::simple_cnn();
        assert_eq!(arch.param_count(), 21_840);
        let p = arch.init_params(7);
        assert_eq!(p.get("conv1.weight").unwrap().shape(), &[10, 1, 5, 5]);
        assert_eq!(p.get("conv1.weight").unwrap().len(), 250);
        assert_eq!(p.get("fc1.weight").unwrap().shape(), &[50, 320]);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_bounded_weights() {
        let arch = CnnArch::simple_cnn();
        let a = arch.init_params(7);
        let b = arch.init_params(7);
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&arch.init_params(8)));
        for (name, t) in a.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let bound = 1.0 / 5.0; // conv1 fan_in = 25
        let w = a.get("conv1.weight").unwrap().data();
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(w.iter().any(|v| v.abs() > 0.5 * bound));
    }

    #[test]
    fn zero_params_give_uniform_output() {
        let arch = CnnArch::simple_cnn();
        let out = arch
            .forward(&arch.zero_params(), &random_batch(3, 1))
            .unwrap();
        assert_eq!(out.shape(), &[3, 10]);
        for v in out.data() {
            assert!((v - (0.1f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn output_rows_are_normalized() {
        let arch = CnnArch::simple_cnn();
        let out = arch
            .forward(&arch.init_params(3), &random_batch(5, 2))
            .unwrap();
        for row in out.data().chunks(10) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_is_pure() {
        let arch = CnnArch::simple_cnn();
        let p = arch.init_params(9);
        let x = random_batch(4, 4);
        let a = arch.forward(&p, &x).unwrap();
        let b = arch.forward(&p, &x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_params_loss_is_ln10() {
        let arch = CnnArch::simple_cnn();
        let (loss, grads) = arch
            .loss_and_gradients(&arch.zero_params(), &random_batch(4, 5), &[0, 3, 9, 2])
            .unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-9);
        assert!(grads.same_layout(&arch.zero_params()));
    }

    #[test]
    fn shape_and_label_errors() {
        let arch = CnnArch::simple_cnn();
        let p = arch.init_params(1);
        let bad = Tensor::zeros(&[2, 1, 27, 28]);
        assert!(matches!(
            arch.forward(&p, &bad),
            Err(NnError::BatchShape(_))
        ));
        let x = random_batch(2, 1);
        assert!(matches!(
            arch.loss_and_gradients(&p, &x, &[1, 10]),
            Err(NnError::LabelOutOfRange(10))
        ));
        assert!(matches!(
            arch.loss_and_gradients(&p, &x, &[1]),
            Err(NnError::LabelCount { .. })
        ));
        let small = CnnArch::shrunken().init_params(1);
        assert!(matches!(
            arch.forward(&small, &x),
            Err(NnError::ParamLayout(_))
        ));
    }

    #[test]
    fn duplicated_row_gives_single_row_gradient() {
        let arch = CnnArch::shrunken();
        let p = arch.init_params(2);
        let one = random_batch(1, 8);
        let mut twice = one.data().to_vec();
        twice.extend_from_slice(one.data());
        let twice = Tensor::new(vec![2, 1, 28, 28], twice).unwrap();
        let (l1, g1) = arch.loss_and_gradients(&p, &one, &[4]).unwrap();
        let (l2, g2) = arch.loss_and_gradients(&p, &twice, &[4, 4]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!(g1.max_abs_diff(&g2) < 1e-12);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0; 10]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
