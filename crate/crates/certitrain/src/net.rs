//! Feed-forward networks over a flat parameter vector.
//!
//! Layers are declared as [`LayerSpec`]s; the network materializes them into
//! offset plans over a single `theta` vector (layer-major: weights then bias,
//! in declaration order). Keeping every parameter in one flat vector means
//! the optimizer can treat gradients as plain vectors.

use serde::{Deserialize, Serialize};

use crate::error::{CertError, Result};
use crate::rng::{derive_rng, sample_standard_normal, stream};
use crate::tensor::{affine_forward, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Affine { out_dim: usize },
    Conv { filters: usize, kh: usize, kw: usize, stride: usize },
    Relu,
    Flatten,
}

/// Resolved layer: shapes and theta offsets fixed at construction.
#[derive(Debug, Clone, Copy)]
pub(crate) enum LayerPlan {
    Affine {
        in_dim: usize,
        out_dim: usize,
        w_off: usize,
        b_off: usize,
    },
    Conv {
        in_c: usize,
        in_h: usize,
        in_w: usize,
        filters: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        out_h: usize,
        out_w: usize,
        w_off: usize,
        b_off: usize,
    },
    Relu,
    Flatten,
}

#[derive(Debug, Clone)]
pub struct Network {
    specs: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    pub theta: Vec<f64>,
    plans: Vec<LayerPlan>,
    /// shapes[l] is the input shape of layer l; shapes[L] is the output shape.
    shapes: Vec<Vec<usize>>,
}

/// Inputs seen by each layer during one forward pass, plus the logits.
/// For ReLU layers the stored input is the pre-activation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layer_inputs: Vec<Tensor>,
    pub output: Tensor,
}

impl Network {
    /// Type-checks the layer sequence and fixes the theta layout. All
    /// parameters start at zero.
    pub fn new(specs: Vec<LayerSpec>, input_shape: Vec<usize>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(CertError::InvalidArgument(format!(
                "bad input shape {input_shape:?}"
            )));
        }
        let mut shapes = vec![input_shape.clone()];
        let mut plans = Vec::with_capacity(specs.len());
        let mut offset = 0usize;
        for (idx, spec) in specs.iter().enumerate() {
            let cur = shapes.last().unwrap().clone();
            let plan = match *spec {
                LayerSpec::Affine { out_dim } => {
                    if cur.len() != 1 {
                        return Err(CertError::ShapeMismatch {
                            context: "affine layer needs rank-1 input",
                            expected: vec![1],
                            got: cur.clone(),
                        });
                    }
                    if out_dim == 0 {
                        return Err(CertError::InvalidArgument(format!(
                            "layer {idx}: affine out_dim must be positive"
                        )));
                    }
                    let in_dim = cur[0];
                    let w_off = offset;
                    let b_off = offset + out_dim * in_dim;
                    offset = b_off + out_dim;
                    shapes.push(vec![out_dim]);
                    LayerPlan::Affine {
                        in_dim,
                        out_dim,
                        w_off,
                        b_off,
                    }
                }
                LayerSpec::Conv {
                    filters,
                    kh,
                    kw,
                    stride,
                } => {
                    if cur.len() != 3 {
                        return Err(CertError::ShapeMismatch {
                            context: "conv layer needs rank-3 input",
                            expected: vec![3],
                            got: cur.clone(),
                        });
                    }
                    let (c, h, w) = (cur[0], cur[1], cur[2]);
                    if filters == 0 || stride == 0 || kh == 0 || kw == 0 || kh > h || kw > w {
                        return Err(CertError::InvalidArgument(format!(
                            "layer {idx}: conv {filters}x{kh}x{kw}+{stride} does not fit {cur:?}"
                        )));
                    }
                    let out_h = (h - kh) / stride + 1;
                    let out_w = (w - kw) / stride + 1;
                    let w_off = offset;
                    let b_off = offset + filters * c * kh * kw;
                    offset = b_off + filters;
                    shapes.push(vec![filters, out_h, out_w]);
                    LayerPlan::Conv {
                        in_c: c,
                        in_h: h,
                        in_w: w,
                        filters,
                        kh,
                        kw,
                        stride,
                        out_h,
                        out_w,
                        w_off,
                        b_off,
                    }
                }
                LayerSpec::Relu => {
                    shapes.push(cur.clone());
                    LayerPlan::Relu
                }
                LayerSpec::Flatten => {
                    let numel = cur.iter().product::<usize>();
                    shapes.push(vec![numel]);
                    LayerPlan::Flatten
                }
            };
            plans.push(plan);
        }
        Ok(Network {
            specs,
            input_shape,
            theta: vec![0.0; offset],
            plans,
            shapes,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().unwrap().iter().product()
    }

    pub(crate) fn plans(&self) -> &[LayerPlan] {
        &self.plans
    }

    pub(crate) fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        if x.shape != self.input_shape {
            return Err(CertError::ShapeMismatch {
                context: "forward input",
                expected: self.input_shape.clone(),
                got: x.shape.clone(),
            });
        }
        let mut h = x.clone();
        let mut layer_inputs = Vec::with_capacity(self.plans.len());
        for plan in &self.plans {
            let next = self.apply_layer(plan, &h)?;
            layer_inputs.push(h);
            h = next;
        }
        Ok((
            h.clone(),
            ForwardCache {
                layer_inputs,
                output: h,
            },
        ))
    }

    fn apply_layer(&self, plan: &LayerPlan, h: &Tensor) -> Result<Tensor> {
        match *plan {
            LayerPlan::Affine {
                in_dim,
                out_dim,
                w_off,
                b_off,
            } => {
                let mut out = vec![0.0; out_dim];
                affine_forward(
                    &self.theta[w_off..w_off + out_dim * in_dim],
                    &self.theta[b_off..b_off + out_dim],
                    &h.data,
                    &mut out,
                );
                Tensor::new(vec![out_dim], out)
            }
            LayerPlan::Conv {
                in_c,
                filters,
                kh,
                kw,
                stride,
                w_off,
                b_off,
                ..
            } => {
                let kernel = Tensor::new(
                    vec![filters, in_c, kh, kw],
                    self.theta[w_off..w_off + filters * in_c * kh * kw].to_vec(),
                )?;
                h.conv2d(&kernel, &self.theta[b_off..b_off + filters], stride)
            }
            LayerPlan::Relu => Ok(h.relu()),
            LayerPlan::Flatten => Tensor::new(vec![h.numel()], h.data.clone()),
        }
    }

    /// Reverse-mode pass. `dlogits` is the gradient of some scalar loss with
    /// respect to the logits; returns that loss's gradient with respect to
    /// theta and to the input.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        if cache.layer_inputs.len() != self.plans.len() {
            return Err(CertError::ShapeMismatch {
                context: "backward cache layers",
                expected: vec![self.plans.len()],
                got: vec![cache.layer_inputs.len()],
            });
        }
        if dlogits.shape != *self.shapes.last().unwrap() {
            return Err(CertError::ShapeMismatch {
                context: "backward dlogits",
                expected: self.shapes.last().unwrap().clone(),
                got: dlogits.shape.clone(),
            });
        }
        let mut grad_theta = vec![0.0; self.theta.len()];
        let mut g = dlogits.clone();
        for (l, plan) in self.plans.iter().enumerate().rev() {
            let input = &cache.layer_inputs[l];
            if input.shape != self.shapes[l] {
                return Err(CertError::ShapeMismatch {
                    context: "backward cache shape",
                    expected: self.shapes[l].clone(),
                    got: input.shape.clone(),
                });
            }
            g = match *plan {
                LayerPlan::Affine {
                    in_dim,
                    out_dim,
                    w_off,
                    b_off,
                } => {
                    let w = &self.theta[w_off..w_off + out_dim * in_dim];
                    let mut gin = vec![0.0; in_dim];
                    for i in 0..out_dim {
                        let gi = g.data[i];
                        grad_theta[b_off + i] += gi;
                        let dw = &mut grad_theta[w_off + i * in_dim..w_off + (i + 1) * in_dim];
                        for j in 0..in_dim {
                            dw[j] += gi * input.data[j];
                        }
                        let row = &w[i * in_dim..(i + 1) * in_dim];
                        for j in 0..in_dim {
                            gin[j] += gi * row[j];
                        }
                    }
                    Tensor::new(vec![in_dim], gin)?
                }
                LayerPlan::Conv {
                    in_c,
                    in_h,
                    in_w,
                    filters,
                    kh,
                    kw,
                    stride,
                    out_h,
                    out_w,
                    w_off,
                    b_off,
                } => {
                    let mut gin = vec![0.0; in_c * in_h * in_w];
                    for f in 0..filters {
                        for y in 0..out_h {
                            for x in 0..out_w {
                                let go = g.data[(f * out_h + y) * out_w + x];
                                grad_theta[b_off + f] += go;
                                for ch in 0..in_c {
                                    for i in 0..kh {
                                        for j in 0..kw {
                                            let in_idx = ch * in_h * in_w
                                                + (y * stride + i) * in_w
                                                + (x * stride + j);
                                            let k_idx = ((f * in_c + ch) * kh + i) * kw + j;
                                            grad_theta[w_off + k_idx] += go * input.data[in_idx];
                                            gin[in_idx] += go * self.theta[w_off + k_idx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    Tensor::new(vec![in_c, in_h, in_w], gin)?
                }
                LayerPlan::Relu => {
                    let mask = input.relu_grad_mask();
                    let data = g
                        .data
                        .iter()
                        .zip(&mask.data)
                        .map(|(a, m)| a * m)
                        .collect();
                    Tensor::new(input.shape.clone(), data)?
                }
                LayerPlan::Flatten => Tensor::new(input.shape.clone(), g.data.clone())?,
            };
        }
        Ok((grad_theta, g))
    }

    /// In-place descent step: theta <- theta - step * direction.
    pub fn apply_update(&mut self, direction: &[f64], step: f64) -> Result<()> {
        if direction.len() != self.theta.len() {
            return Err(CertError::ShapeMismatch {
                context: "apply_update direction",
                expected: vec![self.theta.len()],
                got: vec![direction.len()],
            });
        }
        for (t, d) in self.theta.iter_mut().zip(direction) {
            *t -= step * d;
        }
        Ok(())
    }
}

/// Builds a network with Gaussian weights (std sqrt(2/fan_in)) and zero
/// biases, fully determined by the seed.
pub fn init_network(specs: Vec<LayerSpec>, input_shape: Vec<usize>, seed: u64) -> Result<Network> {
    let mut net = Network::new(specs, input_shape)?;
    let mut rng = derive_rng(seed, &[stream::INIT]);
    for plan in net.plans.clone() {
        let (w_off, w_len, fan_in) = match plan {
            LayerPlan::Affine {
                in_dim,
                out_dim,
                w_off,
                ..
            } => (w_off, out_dim * in_dim, in_dim),
            LayerPlan::Conv {
                in_c,
                filters,
                kh,
                kw,
                w_off,
                ..
            } => (w_off, filters * in_c * kh * kw, in_c * kh * kw),
            _ => continue,
        };
        let std = (2.0 / fan_in as f64).sqrt();
        for w in &mut net.theta[w_off..w_off + w_len] {
            *w = std * sample_standard_normal(&mut rng);
        }
    }
    Ok(net)
}

/// Cross-entropy with max-subtracted softmax.
/// Returns the loss and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, y: usize) -> Result<(f64, Tensor)> {
    let n = logits.numel();
    if logits.shape.len() != 1 {
        return Err(CertError::ShapeMismatch {
            context: "cross_entropy logits",
            expected: vec![1],
            got: logits.shape.clone(),
        });
    }
    if y >= n {
        return Err(CertError::LabelOutOfRange {
            label: y,
            num_classes: n,
        });
    }
    let m = logits.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = m + sum.ln() - logits.data[y];
    let mut dlogits: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    dlogits[y] -= 1.0;
    Ok((loss, Tensor::new(vec![n], dlogits)?))
}

/// Forward + cross-entropy + backward in one call.
/// Returns (loss, grad_theta, grad_input).
pub fn ce_loss_grads(net: &Network, x: &Tensor, y: usize) -> Result<(f64, Vec<f64>, Tensor)> {
    let (logits, cache) = net.forward(x)?;
    let (loss, dlogits) = cross_entropy(&logits, y)?;
    let (grad_theta, grad_input) = net.backward(&cache, &dlogits)?;
    Ok((loss, grad_theta, grad_input))
}
