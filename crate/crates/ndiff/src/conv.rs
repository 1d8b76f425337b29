//! Valid-padding, stride-1 2D cross-correlation via im2col.

use crate::gemm::gemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.width - self.kw + 1
    }

    fn patches(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn image_len(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    /// cols[p, (c, u, v)] = image[c, oy + u, ox + v]
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (ow, k) = (self.out_w(), self.patch_len());
        for p in 0..self.patches() {
            let (oy, ox) = (p / ow, p % ow);
            let row = &mut cols[p * k..(p + 1) * k];
            let mut idx = 0;
            for c in 0..self.in_ch {
                for u in 0..self.kh {
                    let base = c * self.height * self.width + (oy + u) * self.width + ox;
                    row[idx..idx + self.kw].copy_from_slice(&image[base..base + self.kw]);
                    idx += self.kw;
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], image: &mut [f64]) {
        let (ow, k) = (self.out_w(), self.patch_len());
        for p in 0..self.patches() {
            let (oy, ox) = (p / ow, p % ow);
            let row = &cols[p * k..(p + 1) * k];
            let mut idx = 0;
            for c in 0..self.in_ch {
                for u in 0..self.kh {
                    let base = c * self.height * self.width + (oy + u) * self.width + ox;
                    for v in 0..self.kw {
                        image[base + v] += row[idx + v];
                    }
                    idx += self.kw;
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64], kernels: &[f64]) -> Vec<f64> {
        let (p, k, o) = (self.patches(), self.patch_len(), self.out_ch);
        let mut out = vec![0.0; self.batch * o * p];
        let mut cols = vec![0.0; p * k];
        for b in 0..self.batch {
            let image = &input[b * self.image_len()..(b + 1) * self.image_len()];
            self.im2col(image, &mut cols);
            // out_b (o × p) = K (o × k) · colsᵀ
            gemm(
                o,
                k,
                p,
                kernels,
                false,
                &cols,
                true,
                &mut out[b * o * p..(b + 1) * o * p],
                false,
            );
        }
        out
    }

    pub fn backward(
        &self,
        input: &[f64],
        kernels: &[f64],
        gout: &[f64],
        mut dinput: Option<&mut [f64]>,
        mut dkernels: Option<&mut [f64]>,
    ) {
        let (p, k, o) = (self.patches(), self.patch_len(), self.out_ch);
        let mut cols = vec![0.0; p * k];
        let mut dcols = vec![0.0; p * k];
        for b in 0..self.batch {
            let g = &gout[b * o * p..(b + 1) * o * p];
            if let Some(dk) = dkernels.as_deref_mut() {
                let image = &input[b * self.image_len()..(b + 1) * self.image_len()];
                self.im2col(image, &mut cols);
                gemm(o, p, k, g, false, &cols, false, dk, true);
            }
            if let Some(di) = dinput.as_deref_mut() {
                gemm(p, o, k, g, true, kernels, false, &mut dcols, false);
                self.col2im_add(&dcols, &mut di[b * self.image_len()..(b + 1) * self.image_len()]);
            }
        }
    }
}
