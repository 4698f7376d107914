//! The B-cos transform over assembled convolution weights.
//!
//! A layer computes (W_hat * h) .* |cos(h, W_hat)|^(B-1) where W_hat has
//! unit-norm rows. Per output unit this equals ||h|| * |cos|^B * sgn(cos),
//! so outputs are bounded by the patch norm and the layer is dynamically
//! linear: freezing the cosine factor at its forward value leaves an exact
//! input-dependent linear operator H(h).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HxError, Result};
use crate::hypercomplex::{ParamBreakdown, PhWeightSpec};
use crate::tensor::{conv2d, conv_output_extent, for_each_patch_entry, maxout_channels, patch_norms, Tensor};

/// Norm guard for both weight rows and input patches.
pub const NORM_EPSILON: f32 = 1e-12;

/// The convolution weight behind a layer: a plain dense tensor or a
/// Kronecker-sum hypercomplex spec.
pub enum LayerWeight {
    Dense(Tensor),
    Ph(PhWeightSpec),
}

impl LayerWeight {
    fn raw(&self) -> Result<Tensor> {
        match self {
            LayerWeight::Dense(w) => Ok(w.clone()),
            LayerWeight::Ph(spec) => spec.assemble(),
        }
    }

    fn shape(&self) -> [usize; 4] {
        match self {
            LayerWeight::Dense(w) => {
                let s = w.shape();
                [s[0], s[1], s[2], s[3]]
            }
            LayerWeight::Ph(spec) => {
                let (kh, kw) = spec.kernel();
                [spec.out_channels(), spec.in_channels(), kh, kw]
            }
        }
    }

    fn params(&self) -> Vec<Tensor> {
        match self {
            LayerWeight::Dense(w) => vec![w.clone()],
            LayerWeight::Ph(spec) => spec.learnable_params(),
        }
    }

    fn param_count(&self) -> ParamBreakdown {
        match self {
            LayerWeight::Dense(w) => ParamBreakdown {
                filters: w.numel(),
                algebra: 0,
            },
            LayerWeight::Ph(spec) => spec.param_count(),
        }
    }
}

/// Divide every output-channel row (flattened over Cin*kh*kw) by the larger
/// of its L2 norm and `epsilon`. Zero rows stay zero.
pub fn row_normalize(w: &Tensor, epsilon: f32) -> Result<Tensor> {
    if w.shape().len() != 4 {
        return Err(HxError::Geometry(format!(
            "expected [Cout,Cin,kh,kw] weight, got {:?}",
            w.shape()
        )));
    }
    let norms = w.l2_norm_axes(&[1, 2, 3], true)?;
    w.div(&norms.max2(&Tensor::scalar(epsilon))?)
}

/// A convolution-shaped B-cos unit: no bias, unit-norm rows, cosine-powered
/// output scaling, optional MaxOut grouping of its output channels.
pub struct BcosConvLayer {
    weight: LayerWeight,
    b_exp: f32,
    stride: usize,
    padding: usize,
    maxout_units: usize,
    epsilon: f32,
}

impl BcosConvLayer {
    pub fn new(
        weight: LayerWeight,
        b_exp: f32,
        stride: usize,
        padding: usize,
        maxout_units: usize,
    ) -> Result<BcosConvLayer> {
        if b_exp < 1.0 {
            return Err(HxError::InvalidArgument(format!(
                "B exponent must be >= 1, got {b_exp}"
            )));
        }
        if maxout_units == 0 {
            return Err(HxError::InvalidArgument("maxout_units must be >= 1".into()));
        }
        let [cout, ..] = weight.shape();
        if cout % maxout_units != 0 {
            return Err(HxError::Divisibility {
                channels: cout,
                n: maxout_units,
                context: "layer output channels vs maxout units".into(),
            });
        }
        Ok(BcosConvLayer {
            weight,
            b_exp,
            stride,
            padding,
            maxout_units,
            epsilon: NORM_EPSILON,
        })
    }

    /// Dense weight drawn from N(0, sqrt(2/(Cin*kh*kw))).
    pub fn dense<R: Rng>(
        cout: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        b_exp: f32,
        stride: usize,
        padding: usize,
        maxout_units: usize,
        rng: &mut R,
    ) -> Result<BcosConvLayer> {
        let std = (2.0 / (cin * kh * kw) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let vals: Vec<f32> = (0..cout * cin * kh * kw)
            .map(|_| dist.sample(rng) as f32)
            .collect();
        let w = Tensor::param_from_vec(&[cout, cin, kh, kw], vals)?;
        Self::new(LayerWeight::Dense(w), b_exp, stride, padding, maxout_units)
    }

    pub fn ph<R: Rng>(
        n: usize,
        cout: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        b_exp: f32,
        stride: usize,
        padding: usize,
        maxout_units: usize,
        rng: &mut R,
    ) -> Result<BcosConvLayer> {
        let spec = PhWeightSpec::new_learnable(n, cout, cin, kh, kw, rng)?;
        Self::new(LayerWeight::Ph(spec), b_exp, stride, padding, maxout_units)
    }

    pub fn quaternion<R: Rng>(
        cout: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        b_exp: f32,
        stride: usize,
        padding: usize,
        maxout_units: usize,
        rng: &mut R,
    ) -> Result<BcosConvLayer> {
        let spec = PhWeightSpec::new_hamilton(cout, cin, kh, kw, rng)?;
        Self::new(LayerWeight::Ph(spec), b_exp, stride, padding, maxout_units)
    }

    pub fn weight(&self) -> &LayerWeight {
        &self.weight
    }

    pub fn b_exp(&self) -> f32 {
        self.b_exp
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn maxout_units(&self) -> usize {
        self.maxout_units
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Conv output channels, before maxout grouping.
    pub fn conv_out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Layer output channels, after maxout grouping.
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0] / self.maxout_units
    }

    pub fn kernel(&self) -> (usize, usize) {
        let [_, _, kh, kw] = self.weight.shape();
        (kh, kw)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.weight.params()
    }

    pub fn param_count(&self) -> ParamBreakdown {
        self.weight.param_count()
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        Ok((
            conv_output_extent(h, kh, self.stride, self.padding)?,
            conv_output_extent(w, kw, self.stride, self.padding)?,
        ))
    }

    /// Assembled weight with rows normalized to unit L2 norm.
    pub fn effective_weight(&self) -> Result<Tensor> {
        row_normalize(&self.weight.raw()?, self.epsilon)
    }

    /// The B-cos transform before maxout grouping.
    ///
    /// With `freeze_factor` the |cos|^(B-1) scaling is detached at its
    /// forward value, leaving the exact dynamic-linear map; during training
    /// gradients flow through the factor.
    pub fn bcos_forward(&self, h: &Tensor, freeze_factor: bool) -> Result<Tensor> {
        let w_hat = self.effective_weight()?;
        let (kh, kw) = self.kernel();
        let s = conv2d(h, &w_hat, self.stride, self.padding)?;
        if self.b_exp == 1.0 {
            // |cos|^0 = 1: plain convolution with normalized weights
            return Ok(s);
        }
        let pn = patch_norms(h, kh, kw, self.stride, self.padding)?;
        let denom = pn.max2(&Tensor::scalar(self.epsilon))?;
        let cos = s.div(&denom)?;
        let factor = cos.abs().pow_const(self.b_exp - 1.0);
        let factor = if freeze_factor { factor.detach() } else { factor };
        s.mul(&factor)
    }

    /// Full layer forward: B-cos transform then maxout grouping.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let out = self.bcos_forward(h, false)?;
        if self.maxout_units > 1 {
            maxout_channels(&out, self.maxout_units)
        } else {
            Ok(out)
        }
    }

    /// Forward with frozen scaling factors (explanation mode). MaxOut
    /// selections are piecewise constant, so routing gradients through the
    /// argmax already matches the frozen selection.
    pub fn forward_frozen(&self, h: &Tensor) -> Result<Tensor> {
        let out = self.bcos_forward(h, true)?;
        if self.maxout_units > 1 {
            maxout_channels(&out, self.maxout_units)
        } else {
            Ok(out)
        }
    }

    /// Materialize H(h) = |cos(h, W_hat)|^(B-1) .* W_hat for one sample as a
    /// [Cout*H'*W', Cin*H*W] matrix (pre-maxout rows). Applying it to the
    /// flattened input reproduces `bcos_forward` exactly.
    pub fn dynamic_matrix(&self, h: &Tensor) -> Result<Tensor> {
        if h.shape().len() != 4 || h.shape()[0] != 1 {
            return Err(HxError::Geometry(format!(
                "dynamic_matrix expects a single [1,C,H,W] sample, got {:?}",
                h.shape()
            )));
        }
        let (kh, kw) = self.kernel();
        let w_hat = self.effective_weight()?.detach();
        let x = h.detach();
        let s = conv2d(&x, &w_hat, self.stride, self.padding)?;
        let pn = patch_norms(&x, kh, kw, self.stride, self.padding)?;

        let cout = self.conv_out_channels();
        let (ho, wo) = self.out_spatial(h.shape()[2], h.shape()[3])?;
        let positions = ho * wo;
        let in_elems = h.numel();
        let k_len = self.in_channels() * kh * kw;

        let sv = s.to_vec();
        let pnv = pn.to_vec();
        let wv = w_hat.to_vec();
        let mut mat = vec![0.0f32; cout * positions * in_elems];
        for p in 0..positions {
            let denom = pnv[p].max(self.epsilon);
            for o in 0..cout {
                let cos = sv[o * positions + p] / denom;
                let factor = if self.b_exp == 1.0 {
                    1.0
                } else {
                    cos.abs().powf(self.b_exp - 1.0)
                };
                if factor == 0.0 {
                    continue;
                }
                let row = &mut mat[(o * positions + p) * in_elems..][..in_elems];
                let w_row = &wv[o * k_len..][..k_len];
                for_each_patch_entry(h.shape(), kh, kw, self.stride, self.padding, p, |k, flat| {
                    row[flat] = factor * w_row[k];
                });
            }
        }
        Tensor::from_vec(&[cout * positions, in_elems], mat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_unit_layer(w_row: Vec<f32>, b_exp: f32) -> BcosConvLayer {
        let k = w_row.len();
        let w = Tensor::param_from_vec(&[1, k, 1, 1], w_row).unwrap();
        BcosConvLayer::new(LayerWeight::Dense(w), b_exp, 1, 0, 1).unwrap()
    }

    #[test]
    fn row_normalize_three_four_row() {
        let w = Tensor::from_vec(&[1, 4, 1, 1], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let w_hat = row_normalize(&w, NORM_EPSILON).unwrap();
        assert_eq!(w_hat.to_vec(), vec![0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn row_normalize_keeps_unit_rows() {
        let w = Tensor::from_vec(&[1, 2, 1, 1], vec![0.6, 0.8]).unwrap();
        let w_hat = row_normalize(&w, NORM_EPSILON).unwrap();
        for (a, b) in w_hat.to_vec().iter().zip(w.to_vec()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn row_normalize_zero_row_stays_zero() {
        let w = Tensor::from_vec(&[2, 2, 1, 1], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let w_hat = row_normalize(&w, NORM_EPSILON).unwrap();
        assert_eq!(&w_hat.to_vec()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn rows_are_unit_norm_after_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = BcosConvLayer::ph(3, 6, 6, 3, 3, 2.0, 1, 1, 1, &mut rng).unwrap();
        let w_hat = layer.effective_weight().unwrap();
        let norms = w_hat.l2_norm_axes(&[1, 2, 3], false).unwrap();
        for n in norms.to_vec() {
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn aligned_patch_yields_patch_norm() {
        // h = 2 * w_hat: output equals ||h|| for any B
        let w_row = vec![0.6f32, 0.8, 0.0];
        for b in [1.0f32, 1.5, 2.0, 3.0] {
            let layer = single_unit_layer(w_row.clone(), b);
            let h: Vec<f32> = w_row.iter().map(|v| 2.0 * v).collect();
            let x = Tensor::from_vec(&[1, 3, 1, 1], h).unwrap();
            let y = layer.forward(&x).unwrap();
            assert!((y.item() - 2.0).abs() < 1e-5, "B={b}: {}", y.item());
        }
    }

    #[test]
    fn orthogonal_patch_yields_zero() {
        let layer = single_unit_layer(vec![1.0, 0.0], 2.0);
        let x = Tensor::from_vec(&[1, 2, 1, 1], vec![0.0, 5.0]).unwrap();
        assert_eq!(layer.forward(&x).unwrap().item(), 0.0);
    }

    #[test]
    fn direct_arithmetic_case() {
        // B=2, ||h||=2, cos=0.5 -> 2 * 0.25 * (+1) = 0.5
        let layer = single_unit_layer(vec![1.0, 0.0], 2.0);
        let (c, s) = (0.5f32, (1.0f32 - 0.25).sqrt());
        let x = Tensor::from_vec(&[1, 2, 1, 1], vec![2.0 * c, 2.0 * s]).unwrap();
        assert!((layer.forward(&x).unwrap().item() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn b1_degenerates_to_normalized_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = BcosConvLayer::dense(4, 3, 3, 3, 1.0, 1, 1, 1, &mut rng).unwrap();
        let xv: Vec<f32> = (0..48).map(|v| ((v * 29 % 13) as f32 - 6.0) * 0.2).collect();
        let x = Tensor::from_vec(&[1, 3, 4, 4], xv).unwrap();
        let y = layer.forward(&x).unwrap();
        let plain = conv2d(&x, &layer.effective_weight().unwrap(), 1, 1).unwrap();
        for (a, b) in y.to_vec().iter().zip(plain.to_vec()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn output_bounded_by_patch_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for b in [1.0f32, 1.5, 2.0, 3.0] {
            let layer = BcosConvLayer::dense(5, 2, 3, 3, b, 1, 1, 1, &mut rng).unwrap();
            let xv: Vec<f32> = (0..2 * 36).map(|v| ((v * 31 % 23) as f32 - 11.0) * 0.3).collect();
            let x = Tensor::from_vec(&[1, 2, 6, 6], xv).unwrap();
            let y = layer.forward(&x).unwrap().to_vec();
            let pn = patch_norms(&x, 3, 3, 1, 1).unwrap().to_vec();
            for o in 0..5 {
                for (p, &n) in pn.iter().enumerate() {
                    assert!(y[o * pn.len() + p].abs() <= n + 1e-5);
                }
            }
        }
    }

    #[test]
    fn monotone_in_alignment_at_fixed_norm() {
        // fixed ||h||, cos swept over [0,1]: output must be non-decreasing
        for b in [1.0f32, 2.0, 3.0] {
            let layer = single_unit_layer(vec![1.0, 0.0], b);
            let mut last = -1.0f32;
            for step in 0..=20 {
                let c = step as f32 / 20.0;
                let s = (1.0 - c * c).max(0.0).sqrt();
                let x = Tensor::from_vec(&[1, 2, 1, 1], vec![3.0 * c, 3.0 * s]).unwrap();
                let y = layer.forward(&x).unwrap().item();
                assert!(y >= last - 1e-6, "B={b} cos={c}: {y} < {last}");
                last = y;
            }
        }
    }

    #[test]
    fn dynamic_matrix_is_weight_when_b_is_one() {
        let layer = single_unit_layer(vec![0.6, 0.8], 1.0);
        let xa = Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, -2.0]).unwrap();
        let xb = Tensor::from_vec(&[1, 2, 1, 1], vec![0.3, 5.0]).unwrap();
        let ha = layer.dynamic_matrix(&xa).unwrap();
        let hb = layer.dynamic_matrix(&xb).unwrap();
        assert_eq!(ha.to_vec(), hb.to_vec());
        assert_eq!(ha.to_vec(), vec![0.6, 0.8]);
    }

    #[test]
    fn dynamic_matrix_zero_patch_rows_are_zero() {
        let layer = single_unit_layer(vec![0.6, 0.8], 2.0);
        let x = Tensor::from_vec(&[1, 2, 1, 1], vec![0.0, 0.0]).unwrap();
        let m = layer.dynamic_matrix(&x).unwrap();
        assert_eq!(m.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn maxout_grouping_halves_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = BcosConvLayer::dense(8, 2, 3, 3, 2.0, 1, 1, 2, &mut rng).unwrap();
        assert_eq!(layer.conv_out_channels(), 8);
        assert_eq!(layer.out_channels(), 4);
        let x = Tensor::from_vec(&[1, 2, 4, 4], vec![0.5; 32]).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 4]);
    }

    #[test]
    fn rejects_indivisible_maxout() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        assert!(BcosConvLayer::dense(5, 2, 3, 3, 2.0, 1, 1, 2, &mut rng).is_err());
    }
}
