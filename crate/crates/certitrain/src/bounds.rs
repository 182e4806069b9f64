//! Interval bound propagation and the abstract (worst-case) loss.
//!
//! An input box [x-eps, x+eps] clamped to the pixel domain is pushed through
//! the network with the interval affine rule
//!
//!   upper = W+ . upper_in + W- . lower_in + b
//!   lower = W+ . lower_in + W- . upper_in + b
//!
//! where W+ = max(0, W) and W- = min(0, W), and monotone activations apply
//! to both bounds. The class-margin rows e_y - e_j are merged into the final
//! affine layer before the last application of the rule, which is strictly
//! tighter than bounding logits first and subtracting afterwards.
//!
//! The abstract loss feeds the margin lower bounds through a softmax
//! cross-entropy as pseudo-logits; its gradient is propagated by hand back
//! through every interval operation to theta. Ties in the min/max splits
//! (a weight exactly zero, a bound exactly at a ReLU kink) take the first
//! argument's derivative, i.e. contribute zero.

use crate::error::{CertError, Result};
use crate::net::{cross_entropy, LayerPlan, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BoundPair {
    pub lower: Tensor,
    pub upper: Tensor,
}

impl BoundPair {
    pub fn degenerate(x: &Tensor) -> Self {
        BoundPair {
            lower: x.clone(),
            upper: x.clone(),
        }
    }

    /// True when `point` lies inside the box, with slack `tol` on both sides.
    pub fn contains(&self, point: &Tensor, tol: f64) -> bool {
        point.shape == self.lower.shape
            && point
                .data
                .iter()
                .zip(self.lower.data.iter().zip(&self.upper.data))
                .all(|(p, (l, u))| *p >= l - tol && *p <= u + tol)
    }

    /// True when `self` is contained in `outer` (with slack `tol`).
    pub fn nested_in(&self, outer: &BoundPair, tol: f64) -> bool {
        self.lower
            .data
            .iter()
            .zip(&outer.lower.data)
            .all(|(a, b)| *a >= b - tol)
            && self
                .upper
                .data
                .iter()
                .zip(&outer.upper.data)
                .all(|(a, b)| *a <= b + tol)
    }
}

/// Margin coefficient rows e_y - e_j for every j != y, in ascending j order.
#[derive(Debug, Clone)]
pub struct MarginSpec {
    pub true_class: usize,
    pub num_classes: usize,
}

impl MarginSpec {
    pub fn new(true_class: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(CertError::InvalidArgument(format!(
                "margins need at least 2 classes, got {num_classes}"
            )));
        }
        if true_class >= num_classes {
            return Err(CertError::LabelOutOfRange {
                label: true_class,
                num_classes,
            });
        }
        Ok(MarginSpec {
            true_class,
            num_classes,
        })
    }

    /// The j-values the margin rows compare against, slot by slot.
    pub fn other_classes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_classes).filter(move |&j| j != self.true_class)
    }

    /// Materialized coefficient rows (num_classes-1 x num_classes).
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.other_classes()
            .map(|j| {
                let mut row = vec![0.0; self.num_classes];
                row[self.true_class] = 1.0;
                row[j] = -1.0;
                row
            })
            .collect()
    }
}

/// Lower bounds on the margins z_y - z_j, one slot per j != y (ascending j).
#[derive(Debug, Clone)]
pub struct MarginBounds {
    pub true_class: usize,
    pub lower: Vec<f64>,
}

/// Everything the backward pass needs: the bounds seen at each layer's input
/// (the final entry feeds the merged margin layer).
#[derive(Debug, Clone)]
pub struct IbpTrace {
    pub layer_bounds: Vec<BoundPair>,
    pub eps: f64,
    pub true_class: usize,
}

/// The allowed perturbation box around x, clamped to the [0,1] pixel domain.
pub fn input_interval(x: &Tensor, eps: f64) -> Result<BoundPair> {
    if !(eps >= 0.0) {
        return Err(CertError::InvalidArgument(format!(
            "eps must be non-negative, got {eps}"
        )));
    }
    let lower = x.data.iter().map(|v| (v - eps).max(0.0)).collect();
    let upper = x.data.iter().map(|v| (v + eps).min(1.0)).collect();
    Ok(BoundPair {
        lower: Tensor::new(x.shape.clone(), lower)?,
        upper: Tensor::new(x.shape.clone(), upper)?,
    })
}

fn ibp_affine_raw(
    l_in: &[f64],
    u_in: &[f64],
    w: &[f64],
    bias: &[f64],
    l_out: &mut [f64],
    u_out: &mut [f64],
) {
    let n = l_in.len();
    for i in 0..bias.len() {
        let row = &w[i * n..(i + 1) * n];
        let mut lo = 0.0;
        let mut hi = 0.0;
        for j in 0..n {
            let wv = row[j];
            if wv > 0.0 {
                lo += wv * l_in[j];
                hi += wv * u_in[j];
            } else {
                lo += wv * u_in[j];
                hi += wv * l_in[j];
            }
        }
        l_out[i] = lo + bias[i];
        u_out[i] = hi + bias[i];
    }
}

/// Interval affine rule for a dense layer. `w` is [out x in] row-major.
pub fn ibp_affine(b: &BoundPair, w: &Tensor, bias: &[f64]) -> Result<BoundPair> {
    if w.shape.len() != 2 || w.shape[1] != b.lower.numel() || w.shape[0] != bias.len() {
        return Err(CertError::ShapeMismatch {
            context: "ibp_affine",
            expected: vec![bias.len(), b.lower.numel()],
            got: w.shape.clone(),
        });
    }
    let out = w.shape[0];
    let mut lower = vec![0.0; out];
    let mut upper = vec![0.0; out];
    ibp_affine_raw(&b.lower.data, &b.upper.data, &w.data, bias, &mut lower, &mut upper);
    Ok(BoundPair {
        lower: Tensor::new(vec![out], lower)?,
        upper: Tensor::new(vec![out], upper)?,
    })
}

#[allow(clippy::too_many_arguments)]
fn ibp_conv_raw(
    l_in: &[f64],
    u_in: &[f64],
    ker: &[f64],
    bias: &[f64],
    dims: ConvDims,
    l_out: &mut [f64],
    u_out: &mut [f64],
) {
    let ConvDims {
        in_c,
        in_h,
        in_w,
        filters,
        kh,
        kw,
        stride,
        out_h,
        out_w,
    } = dims;
    for f in 0..filters {
        for y in 0..out_h {
            for x in 0..out_w {
                let mut lo = 0.0;
                let mut hi = 0.0;
                for ch in 0..in_c {
                    for i in 0..kh {
                        for j in 0..kw {
                            let kv = ker[((f * in_c + ch) * kh + i) * kw + j];
                            let idx = ch * in_h * in_w + (y * stride + i) * in_w + (x * stride + j);
                            if kv > 0.0 {
                                lo += kv * l_in[idx];
                                hi += kv * u_in[idx];
                            } else {
                                lo += kv * u_in[idx];
                                hi += kv * l_in[idx];
                            }
                        }
                    }
                }
                let o = (f * out_h + y) * out_w + x;
                l_out[o] = lo + bias[f];
                u_out[o] = hi + bias[f];
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

/// Interval rule for a convolution (affine in its input, so the same split
/// applies tap by tap).
pub fn ibp_conv(b: &BoundPair, kernel: &Tensor, bias: &[f64], stride: usize) -> Result<BoundPair> {
    if b.lower.shape.len() != 3 || kernel.shape.len() != 4 {
        return Err(CertError::ShapeMismatch {
            context: "ibp_conv rank",
            expected: vec![3, 4],
            got: vec![b.lower.shape.len(), kernel.shape.len()],
        });
    }
    let (c, h, w) = (b.lower.shape[0], b.lower.shape[1], b.lower.shape[2]);
    let (k, kc, kh, kw) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    if kc != c || bias.len() != k || kh > h || kw > w || stride == 0 {
        return Err(CertError::InvalidArgument(format!(
            "ibp_conv: kernel {k}x{kc}x{kh}x{kw} stride {stride} does not fit input {c}x{h}x{w}"
        )));
    }
    let dims = ConvDims {
        in_c: c,
        in_h: h,
        in_w: w,
        filters: k,
        kh,
        kw,
        stride,
        out_h: (h - kh) / stride + 1,
        out_w: (w - kw) / stride + 1,
    };
    let mut lower = vec![0.0; k * dims.out_h * dims.out_w];
    let mut upper = vec![0.0; k * dims.out_h * dims.out_w];
    ibp_conv_raw(
        &b.lower.data,
        &b.upper.data,
        &kernel.data,
        bias,
        dims,
        &mut lower,
        &mut upper,
    );
    Ok(BoundPair {
        lower: Tensor::new(vec![k, dims.out_h, dims.out_w], lower)?,
        upper: Tensor::new(vec![k, dims.out_h, dims.out_w], upper)?,
    })
}

/// Monotone activation rule: ReLU on both bounds.
pub fn ibp_activation(b: &BoundPair) -> BoundPair {
    BoundPair {
        lower: b.lower.relu(),
        upper: b.upper.relu(),
    }
}

fn conv_dims(plan: &LayerPlan) -> ConvDims {
    match *plan {
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
            ..
        } => ConvDims {
            in_c,
            in_h,
            in_w,
            filters,
            kh,
            kw,
            stride,
            out_h,
            out_w,
        },
        _ => unreachable!("conv_dims on non-conv plan"),
    }
}

/// Propagates the input box through the network and merges the margin rows
/// into the final affine layer, returning the margin lower bounds together
/// with the per-layer trace the backward pass consumes.
pub fn margin_lower_bounds(
    net: &Network,
    x: &Tensor,
    eps: f64,
    y: usize,
) -> Result<(MarginBounds, IbpTrace)> {
    if x.shape != net.input_shape() {
        return Err(CertError::ShapeMismatch {
            context: "margin_lower_bounds input",
            expected: net.input_shape().to_vec(),
            got: x.shape.clone(),
        });
    }
    let plans = net.plans();
    let Some(LayerPlan::Affine {
        in_dim,
        out_dim,
        w_off,
        b_off,
    }) = plans.last().copied()
    else {
        return Err(CertError::InvalidArgument(
            "margin bounds need a network ending in an affine layer".into(),
        ));
    };
    let spec = MarginSpec::new(y, out_dim)?;

    let mut b = input_interval(x, eps)?;
    let mut layer_bounds = Vec::with_capacity(plans.len());
    let shapes = net.layer_shapes();
    for (l, plan) in plans[..plans.len() - 1].iter().enumerate() {
        let next = match plan {
            LayerPlan::Affine {
                in_dim,
                out_dim,
                w_off,
                b_off,
            } => {
                let mut lower = vec![0.0; *out_dim];
                let mut upper = vec![0.0; *out_dim];
                ibp_affine_raw(
                    &b.lower.data,
                    &b.upper.data,
                    &net.theta[*w_off..w_off + out_dim * in_dim],
                    &net.theta[*b_off..b_off + out_dim],
                    &mut lower,
                    &mut upper,
                );
                BoundPair {
                    lower: Tensor::new(vec![*out_dim], lower)?,
                    upper: Tensor::new(vec![*out_dim], upper)?,
                }
            }
            LayerPlan::Conv { w_off, b_off, filters, in_c, kh, kw, .. } => {
                let dims = conv_dims(plan);
                let n_out = dims.filters * dims.out_h * dims.out_w;
                let mut lower = vec![0.0; n_out];
                let mut upper = vec![0.0; n_out];
                ibp_conv_raw(
                    &b.lower.data,
                    &b.upper.data,
                    &net.theta[*w_off..w_off + filters * in_c * kh * kw],
                    &net.theta[*b_off..b_off + filters],
                    dims,
                    &mut lower,
                    &mut upper,
                );
                BoundPair {
                    lower: Tensor::new(shapes[l + 1].clone(), lower)?,
                    upper: Tensor::new(shapes[l + 1].clone(), upper)?,
                }
            }
            LayerPlan::Relu => ibp_activation(&b),
            LayerPlan::Flatten => BoundPair {
                lower: Tensor::new(shapes[l + 1].clone(), b.lower.data.clone())?,
                upper: Tensor::new(shapes[l + 1].clone(), b.upper.data.clone())?,
            },
        };
        layer_bounds.push(b);
        b = next;
    }

    // Merged margin layer: rows (W[y]-W[j]) with bias (b[y]-b[j]); only the
    // lower bound is needed.
    let w = &net.theta[w_off..w_off + out_dim * in_dim];
    let bias = &net.theta[b_off..b_off + out_dim];
    let mut lower = Vec::with_capacity(out_dim - 1);
    for j in spec.other_classes() {
        let mut acc = 0.0;
        for k in 0..in_dim {
            let m = w[y * in_dim + k] - w[j * in_dim + k];
            if m > 0.0 {
                acc += m * b.lower.data[k];
            } else {
                acc += m * b.upper.data[k];
            }
        }
        lower.push(acc + (bias[y] - bias[j]));
    }
    layer_bounds.push(b);
    Ok((
        MarginBounds {
            true_class: y,
            lower,
        },
        IbpTrace {
            layer_bounds,
            eps,
            true_class: y,
        },
    ))
}

/// All margins strictly positive: no perturbation in the box can flip the
/// prediction.
pub fn is_verified(mb: &MarginBounds) -> bool {
    mb.lower.iter().all(|&m| m > 0.0)
}

/// Cross-entropy over the pseudo-logits u_y = 0, u_j = -m_j.
/// Returns the loss and d loss / d m per margin slot.
pub fn pseudo_logit_ce(mb: &MarginBounds, num_classes: usize) -> Result<(f64, Vec<f64>)> {
    if mb.lower.len() + 1 != num_classes {
        return Err(CertError::ShapeMismatch {
            context: "pseudo_logit_ce",
            expected: vec![num_classes - 1],
            got: vec![mb.lower.len()],
        });
    }
    let spec = MarginSpec::new(mb.true_class, num_classes)?;
    let mut u = vec![0.0; num_classes];
    for (slot, j) in spec.other_classes().enumerate() {
        u[j] = -mb.lower[slot];
    }
    let (loss, dlogits) = cross_entropy(&Tensor::new(vec![num_classes], u)?, mb.true_class)?;
    let dm = spec
        .other_classes()
        .map(|j| -dlogits.data[j])
        .collect();
    Ok((loss, dm))
}

/// Abstract loss value alone (no gradient context needed).
pub fn abstract_loss_from_margins(mb: &MarginBounds, num_classes: usize) -> Result<f64> {
    Ok(pseudo_logit_ce(mb, num_classes)?.0)
}

/// Abstract loss and its exact gradient with respect to theta, backpropagated
/// through the merged margin layer and every interval operation below it.
pub fn abstract_loss(
    net: &Network,
    trace: &IbpTrace,
    mb: &MarginBounds,
) -> Result<(f64, Vec<f64>)> {
    if mb.true_class != trace.true_class {
        return Err(CertError::InvalidArgument(format!(
            "margin bounds for class {} paired with trace for class {}",
            mb.true_class, trace.true_class
        )));
    }
    let plans = net.plans();
    if trace.layer_bounds.len() != plans.len() {
        return Err(CertError::ShapeMismatch {
            context: "abstract_loss trace layers",
            expected: vec![plans.len()],
            got: vec![trace.layer_bounds.len()],
        });
    }
    let out_dim = net.output_dim();
    let (loss, dm) = pseudo_logit_ce(mb, out_dim)?;
    let mut grad_theta = vec![0.0; net.num_params()];

    // Merged final layer.
    let Some(LayerPlan::Affine {
        in_dim,
        out_dim: _,
        w_off,
        b_off,
    }) = plans.last().copied()
    else {
        return Err(CertError::InvalidArgument(
            "abstract_loss needs a network ending in an affine layer".into(),
        ));
    };
    let y = mb.true_class;
    let spec = MarginSpec::new(y, out_dim)?;
    let final_in = &trace.layer_bounds[plans.len() - 1];
    let w = &net.theta[w_off..w_off + out_dim * in_dim];
    let mut dl = vec![0.0; in_dim];
    let mut du = vec![0.0; in_dim];
    for (slot, j) in spec.other_classes().enumerate() {
        let g = dm[slot];
        grad_theta[b_off + y] += g;
        grad_theta[b_off + j] -= g;
        for k in 0..in_dim {
            let m = w[y * in_dim + k] - w[j * in_dim + k];
            if m > 0.0 {
                let dmk = g * final_in.lower.data[k];
                grad_theta[w_off + y * in_dim + k] += dmk;
                grad_theta[w_off + j * in_dim + k] -= dmk;
                dl[k] += g * m;
            } else if m < 0.0 {
                let dmk = g * final_in.upper.data[k];
                grad_theta[w_off + y * in_dim + k] += dmk;
                grad_theta[w_off + j * in_dim + k] -= dmk;
                du[k] += g * m;
            }
        }
    }

    // Walk the remaining layers in reverse.
    for (l, plan) in plans[..plans.len() - 1].iter().enumerate().rev() {
        let input = &trace.layer_bounds[l];
        let (l_in, u_in) = (&input.lower.data, &input.upper.data);
        match plan {
            LayerPlan::Affine {
                in_dim,
                out_dim,
                w_off,
                b_off,
            } => {
                let w = &net.theta[*w_off..w_off + out_dim * in_dim];
                let mut ndl = vec![0.0; *in_dim];
                let mut ndu = vec![0.0; *in_dim];
                for i in 0..*out_dim {
                    let gl = dl[i];
                    let gu = du[i];
                    grad_theta[b_off + i] += gl + gu;
                    let row = &w[i * in_dim..(i + 1) * in_dim];
                    for j in 0..*in_dim {
                        let wv = row[j];
                        if wv > 0.0 {
                            grad_theta[w_off + i * in_dim + j] += gu * u_in[j] + gl * l_in[j];
                            ndu[j] += gu * wv;
                            ndl[j] += gl * wv;
                        } else if wv < 0.0 {
                            grad_theta[w_off + i * in_dim + j] += gu * l_in[j] + gl * u_in[j];
                            ndl[j] += gu * wv;
                            ndu[j] += gl * wv;
                        }
                    }
                }
                dl = ndl;
                du = ndu;
            }
            LayerPlan::Conv { w_off, b_off, .. } => {
                let dims = conv_dims(plan);
                let n_in = dims.in_c * dims.in_h * dims.in_w;
                let mut ndl = vec![0.0; n_in];
                let mut ndu = vec![0.0; n_in];
                for f in 0..dims.filters {
                    for yy in 0..dims.out_h {
                        for xx in 0..dims.out_w {
                            let o = (f * dims.out_h + yy) * dims.out_w + xx;
                            let gl = dl[o];
                            let gu = du[o];
                            grad_theta[b_off + f] += gl + gu;
                            for ch in 0..dims.in_c {
                                for i in 0..dims.kh {
                                    for j in 0..dims.kw {
                                        let k_idx =
                                            ((f * dims.in_c + ch) * dims.kh + i) * dims.kw + j;
                                        let in_idx = ch * dims.in_h * dims.in_w
                                            + (yy * dims.stride + i) * dims.in_w
                                            + (xx * dims.stride + j);
                                        let kv = net.theta[w_off + k_idx];
                                        if kv > 0.0 {
                                            grad_theta[w_off + k_idx] +=
                                                gu * u_in[in_idx] + gl * l_in[in_idx];
                                            ndu[in_idx] += gu * kv;
                                            ndl[in_idx] += gl * kv;
                                        } else if kv < 0.0 {
                                            grad_theta[w_off + k_idx] +=
                                                gu * l_in[in_idx] + gl * u_in[in_idx];
                                            ndl[in_idx] += gu * kv;
                                            ndu[in_idx] += gl * kv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                dl = ndl;
                du = ndu;
            }
            LayerPlan::Relu => {
                for (g, z) in dl.iter_mut().zip(l_in) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
                for (g, z) in du.iter_mut().zip(u_in) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            LayerPlan::Flatten => {}
        }
    }
    Ok((loss, grad_theta))
}

/// margin_lower_bounds + abstract_loss in one call.
/// Returns (loss, grad_theta, margin bounds).
pub fn abstract_loss_at(
    net: &Network,
    x: &Tensor,
    eps: f64,
    y: usize,
) -> Result<(f64, Vec<f64>, MarginBounds)> {
    let (mb, trace) = margin_lower_bounds(net, x, eps, y)?;
    let (loss, grad) = abstract_loss(net, &trace, &mb)?;
    Ok((loss, grad, mb))
}
