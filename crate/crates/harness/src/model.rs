//! Patch-based per-pixel model with manual backprop.
//!
//! Each pixel's flattened RGB patch goes through one tanh hidden layer
//! shared by two linear heads: a logits head evaluated at every pixel and a
//! feature head evaluated at stride centers only. tanh keeps the whole map
//! smooth, so central finite differences are well conditioned everywhere.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use segbound::npy::{self, NpyArray};
use segbound::rng::RngStream;
use segbound::tensor::Tensor;

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModelShape {
    pub patch_radius: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub stride: usize,
}

impl ModelShape {
    pub fn input_dim(&self) -> usize {
        let k = 2 * self.patch_radius + 1;
        k * k * 3
    }
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    pub shape: ModelShape,
    /// `[D_in, D_h]`
    pub w_hidden: Tensor<f64>,
    /// `[D_h]`
    pub b_hidden: Tensor<f64>,
    /// `[D_h, D]`
    pub w_feature: Tensor<f64>,
    /// `[D]`
    pub b_feature: Tensor<f64>,
    /// `[D_h, C]`
    pub w_logits: Tensor<f64>,
    /// `[C]`
    pub b_logits: Tensor<f64>,
}

/// Forward activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `[H, W, C]`
    pub logits: Tensor<f64>,
    /// `[H_f, W_f, D]`
    pub features: Tensor<f64>,
    /// `[H, W, D_h]` post-tanh activations.
    pub hidden: Tensor<f64>,
}

/// Parameter gradients in the same layout as the model.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub w_hidden: Tensor<f64>,
    pub b_hidden: Tensor<f64>,
    pub w_feature: Tensor<f64>,
    pub b_feature: Tensor<f64>,
    pub w_logits: Tensor<f64>,
    pub b_logits: Tensor<f64>,
}

impl ModelGrads {
    fn zeros_like(model: &ToyModel) -> Self {
        ModelGrads {
            w_hidden: Tensor::zeros(model.w_hidden.shape().to_vec()),
            b_hidden: Tensor::zeros(model.b_hidden.shape().to_vec()),
            w_feature: Tensor::zeros(model.w_feature.shape().to_vec()),
            b_feature: Tensor::zeros(model.b_feature.shape().to_vec()),
            w_logits: Tensor::zeros(model.w_logits.shape().to_vec()),
            b_logits: Tensor::zeros(model.b_logits.shape().to_vec()),
        }
    }

    fn buffers(&self) -> [&Tensor<f64>; 6] {
        [
            &self.w_hidden,
            &self.b_hidden,
            &self.w_feature,
            &self.b_feature,
            &self.w_logits,
            &self.b_logits,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    /// Flat parameter-order view (hidden, feature head, logits head).
    pub fn flat(&self, index: usize) -> f64 {
        let mut i = index;
        for buf in self.buffers() {
            if i < buf.len() {
                return buf.data()[i];
            }
            i -= buf.len();
        }
        panic!("gradient index {index} out of range");
    }
}

impl ToyModel {
    /// Deterministic initialization: weights scaled by 1/sqrt(fan_in),
    /// biases zero.
    pub fn init(shape: ModelShape, rng: &mut RngStream) -> Result<Self> {
        if shape.stride == 0 || shape.hidden_dim == 0 || shape.feature_dim == 0 {
            return Err(HarnessError::Dataset(
                "model dims and stride must be >= 1".into(),
            ));
        }
        if shape.num_classes < 2 {
            return Err(HarnessError::Dataset("model needs >= 2 classes".into()));
        }
        let d_in = shape.input_dim();
        let init_matrix = |rows: usize, cols: usize, scale_mul: f64, rng: &mut RngStream| {
            let scale = scale_mul / (rows as f64).sqrt();
            Tensor::new(
                vec![rows, cols],
                (0..rows * cols).map(|_| rng.next_normal() * scale).collect(),
            )
            .expect("shape matches data")
        };
        Ok(ToyModel {
            shape,
            // small first-layer scale keeps tanh near its linear range at
            // init; the heads carry the confidence scaling
            w_hidden: init_matrix(d_in, shape.hidden_dim, 0.2, rng),
            b_hidden: Tensor::zeros(vec![shape.hidden_dim]),
            w_feature: init_matrix(shape.hidden_dim, shape.feature_dim, 1.0, rng),
            b_feature: Tensor::zeros(vec![shape.feature_dim]),
            w_logits: init_matrix(shape.hidden_dim, shape.num_classes, 1.0, rng),
            b_logits: Tensor::zeros(vec![shape.num_classes]),
        })
    }

    fn check_image(&self, image: &Tensor<f64>) -> Result<(usize, usize)> {
        if image.ndim() != 3 || image.shape()[2] != 3 {
            return Err(HarnessError::Dataset(format!(
                "image must be [H, W, 3], got {:?}",
                image.shape()
            )));
        }
        let (h, w) = (image.shape()[0], image.shape()[1]);
        if h % self.shape.stride != 0 || w % self.shape.stride != 0 {
            return Err(HarnessError::Dataset(format!(
                "{}x{} image not divisible by stride {}",
                h, w, self.shape.stride
            )));
        }
        Ok((h, w))
    }

    /// Clamped patch copy around (y, x): (dy, dx, channel) row-major.
    fn fill_patch(&self, image: &Tensor<f64>, y: usize, x: usize, out: &mut [f64]) {
        let r = self.shape.patch_radius as isize;
        let (h, w) = (image.shape()[0] as isize, image.shape()[1] as isize);
        let mut idx = 0;
        for dy in -r..=r {
            for dx in -r..=r {
                let yy = (y as isize + dy).clamp(0, h - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w - 1) as usize;
                out[idx..idx + 3].copy_from_slice(image.row3(yy, xx));
                idx += 3;
            }
        }
    }

    pub fn forward(&self, image: &Tensor<f64>) -> Result<ForwardPass> {
        let (h, w) = self.check_image(image)?;
        let s = self.shape.stride;
        let (dh, d, c) = (
            self.shape.hidden_dim,
            self.shape.feature_dim,
            self.shape.num_classes,
        );
        let d_in = self.shape.input_dim();
        let (hf, wf) = (h / s, w / s);

        let mut hidden = Tensor::zeros(vec![h, w, dh]);
        let mut logits = Tensor::zeros(vec![h, w, c]);
        let mut features = Tensor::zeros(vec![hf, wf, d]);
        let mut patch = vec![0.0; d_in];

        for y in 0..h {
            for x in 0..w {
                self.fill_patch(image, y, x, &mut patch);
                {
                    let hrow = hidden.row3_mut(y, x);
                    hrow.copy_from_slice(self.b_hidden.data());
                    for (i, &p) in patch.iter().enumerate() {
                        let wrow = &self.w_hidden.data()[i * dh..(i + 1) * dh];
                        for (hj, &wij) in hrow.iter_mut().zip(wrow) {
                            *hj += p * wij;
                        }
                    }
                    for hj in hrow.iter_mut() {
                        *hj = hj.tanh();
                    }
                }
                let hrow = hidden.row3(y, x).to_vec();
                let lrow = logits.row3_mut(y, x);
                lrow.copy_from_slice(self.b_logits.data());
                for (j, &hj) in hrow.iter().enumerate() {
                    let wrow = &self.w_logits.data()[j * c..(j + 1) * c];
                    for (lk, &wjk) in lrow.iter_mut().zip(wrow) {
                        *lk += hj * wjk;
                    }
                }
            }
        }

        // feature head taps the hidden activations at stride centers
        for i in 0..hf {
            for j in 0..wf {
                let (cy, cx) = (i * s + s / 2, j * s + s / 2);
                let hrow = hidden.row3(cy, cx).to_vec();
                let frow = features.row3_mut(i, j);
                frow.copy_from_slice(self.b_feature.data());
                for (jj, &hj) in hrow.iter().enumerate() {
                    let wrow = &self.w_feature.data()[jj * d..(jj + 1) * d];
                    for (fd, &wjd) in frow.iter_mut().zip(wrow) {
                        *fd += hj * wjd;
                    }
                }
            }
        }

        Ok(ForwardPass {
            logits,
            features,
            hidden,
        })
    }

    /// Exact reverse-mode gradients for all parameters given upstream
    /// gradients on both heads.
    pub fn backward(
        &self,
        image: &Tensor<f64>,
        fwd: &ForwardPass,
        grad_logits: &Tensor<f64>,
        grad_features: &Tensor<f64>,
    ) -> Result<ModelGrads> {
        let (h, w) = self.check_image(image)?;
        let s = self.shape.stride;
        let (dh, d, c) = (
            self.shape.hidden_dim,
            self.shape.feature_dim,
            self.shape.num_classes,
        );
        if grad_logits.shape() != [h, w, c] {
            return Err(HarnessError::Dataset(format!(
                "grad_logits must be [{h}, {w}, {c}], got {:?}",
                grad_logits.shape()
            )));
        }
        if grad_features.shape() != [h / s, w / s, d] {
            return Err(HarnessError::Dataset(format!(
                "grad_features must be [{}, {}, {d}], got {:?}",
                h / s,
                w / s,
                grad_features.shape()
            )));
        }

        let mut grads = ModelGrads::zeros_like(self);
        let d_in = self.shape.input_dim();
        let mut patch = vec![0.0; d_in];
        let mut dh_buf = vec![0.0; dh];
        let half = s / 2;

        for y in 0..h {
            for x in 0..w {
                let hrow = fwd.hidden.row3(y, x);
                let glog = grad_logits.row3(y, x);
                dh_buf.iter_mut().for_each(|v| *v = 0.0);

                let mut any_signal = false;
                if glog.iter().any(|&g| g != 0.0) {
                    any_signal = true;
                    for (k, &gk) in glog.iter().enumerate() {
                        grads.b_logits.data_mut()[k] += gk;
                    }
                    for (j, &hj) in hrow.iter().enumerate() {
                        let wrow = &self.w_logits.data()[j * c..(j + 1) * c];
                        let grow = &mut grads.w_logits.data_mut()[j * c..(j + 1) * c];
                        let mut acc = 0.0;
                        for ((gw, &wjk), &gk) in grow.iter_mut().zip(wrow).zip(glog) {
                            *gw += hj * gk;
                            acc += wjk * gk;
                        }
                        dh_buf[j] += acc;
                    }
                }

                if y % s == half && x % s == half {
                    let gfeat = grad_features.row3(y / s, x / s);
                    if gfeat.iter().any(|&g| g != 0.0) {
                        any_signal = true;
                        for (k, &gk) in gfeat.iter().enumerate() {
                            grads.b_feature.data_mut()[k] += gk;
                        }
                        for (j, &hj) in hrow.iter().enumerate() {
                            let wrow = &self.w_feature.data()[j * d..(j + 1) * d];
                            let grow = &mut grads.w_feature.data_mut()[j * d..(j + 1) * d];
                            let mut acc = 0.0;
                            for ((gw, &wjd), &gk) in grow.iter_mut().zip(wrow).zip(gfeat) {
                                *gw += hj * gk;
                                acc += wjd * gk;
                            }
                            dh_buf[j] += acc;
                        }
                    }
                }

                if !any_signal {
                    continue;
                }

                self.fill_patch(image, y, x, &mut patch);
                for (j, (&hj, &dhj)) in hrow.iter().zip(dh_buf.iter()).enumerate() {
                    let dz = dhj * (1.0 - hj * hj);
                    grads.b_hidden.data_mut()[j] += dz;
                    for (i, &p) in patch.iter().enumerate() {
                        grads.w_hidden.data_mut()[i * dh + j] += p * dz;
                    }
                }
            }
        }
        Ok(grads)
    }

    pub fn sgd_step(&mut self, grads: &ModelGrads, lr: f64) {
        let pairs: [(&mut Tensor<f64>, &Tensor<f64>); 6] = [
            (&mut self.w_hidden, &grads.w_hidden),
            (&mut self.b_hidden, &grads.b_hidden),
            (&mut self.w_feature, &grads.w_feature),
            (&mut self.b_feature, &grads.b_feature),
            (&mut self.w_logits, &grads.w_logits),
            (&mut self.b_logits, &grads.b_logits),
        ];
        for (param, grad) in pairs {
            for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
                *p -= lr * g;
            }
        }
    }

    fn param_buffers(&self) -> [&Tensor<f64>; 6] {
        [
            &self.w_hidden,
            &self.b_hidden,
            &self.w_feature,
            &self.b_feature,
            &self.w_logits,
            &self.b_logits,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.param_buffers().iter().map(|b| b.len()).sum()
    }

    pub fn param(&self, index: usize) -> f64 {
        let mut i = index;
        for buf in self.param_buffers() {
            if i < buf.len() {
                return buf.data()[i];
            }
            i -= buf.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let mut i = index;
        let bufs: [&mut Tensor<f64>; 6] = [
            &mut self.w_hidden,
            &mut self.b_hidden,
            &mut self.w_feature,
            &mut self.b_feature,
            &mut self.w_logits,
            &mut self.b_logits,
        ];
        for buf in bufs {
            if i < buf.len() {
                buf.data_mut()[i] = value;
                return;
            }
            i -= buf.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("model.json"),
            serde_json::to_string_pretty(&self.shape)?,
        )?;
        npy::write_tensor(dir.join("w_hidden.npy"), &self.w_hidden)?;
        npy::write_tensor(dir.join("b_hidden.npy"), &self.b_hidden)?;
        npy::write_tensor(dir.join("w_feature.npy"), &self.w_feature)?;
        npy::write_tensor(dir.join("b_feature.npy"), &self.b_feature)?;
        npy::write_tensor(dir.join("w_logits.npy"), &self.w_logits)?;
        npy::write_tensor(dir.join("b_logits.npy"), &self.b_logits)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let shape: ModelShape = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
        let read_f64 = |name: &str| -> Result<Tensor<f64>> {
            match npy::read_tensor(dir.join(name))? {
                NpyArray::F64(t) => Ok(t),
                other => Err(HarnessError::Dataset(format!(
                    "{name} must be float64, found {}",
                    other.dtype()
                ))),
            }
        };
        Ok(ToyModel {
            shape,
            w_hidden: read_f64("w_hidden.npy")?,
            b_hidden: read_f64("b_hidden.npy")?,
            w_feature: read_f64("w_feature.npy")?,
            b_feature: read_f64("b_feature.npy")?,
            w_logits: read_f64("w_logits.npy")?,
            b_logits: read_f64("b_logits.npy")?,
        })
    }
}
