//! Multilayer perceptron with flat parameter storage.
//!
//! Layout: `depth` blocks of `Linear → LayerNorm → SiLU` (the first maps
//! `d_in → h`, the rest `h → h`), then `Linear(h → p)`. All tensors live in
//! one `Vec<f64>` so the optimizer and checkpoints see a single array.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub d_in: usize,
    pub width: usize,
    pub depth: usize,
    pub p: usize,
}

/// One named tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug)]
struct BlockOffsets {
    w: usize,
    b: usize,
    gain: usize,
    shift: usize,
    fan_in: usize,
}

impl MlpShape {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.width == 0 || self.depth == 0 || self.p < 2 {
            return Err(Error::InvalidParameter(format!("invalid network shape {self:?}")));
        }
        Ok(())
    }

    fn blocks(&self) -> Vec<BlockOffsets> {
        let h = self.width;
        let mut off = 0;
        (0..self.depth)
            .map(|k| {
                let fan_in = if k == 0 { self.d_in } else { h };
                let w = off;
                off += h * fan_in;
                let b = off;
                off += h;
                let gain = off;
                off += h;
                let shift = off;
                off += h;
                BlockOffsets { w, b, gain, shift, fan_in }
            })
            .collect()
    }

    fn output_offsets(&self) -> (usize, usize) {
        let h = self.width;
        let body: usize = (0..self.depth)
            .map(|k| h * if k == 0 { self.d_in } else { h } + 3 * h)
            .sum();
        (body, body + self.p * h)
    }

    pub fn num_params(&self) -> usize {
        let (w_out, b_out) = self.output_offsets();
        debug_assert_eq!(b_out, w_out + self.p * self.width);
        b_out + self.p
    }

    /// Named tensors in storage order.
    pub fn groups(&self) -> Vec<ParamGroup> {
        let h = self.width;
        let mut out = Vec::new();
        for (k, b) in self.blocks().iter().enumerate() {
            out.push(ParamGroup { name: format!("block{k}.weight"), offset: b.w, rows: h, cols: b.fan_in });
            out.push(ParamGroup { name: format!("block{k}.bias"), offset: b.b, rows: h, cols: 1 });
            out.push(ParamGroup { name: format!("block{k}.norm_gain"), offset: b.gain, rows: h, cols: 1 });
            out.push(ParamGroup { name: format!("block{k}.norm_shift"), offset: b.shift, rows: h, cols: 1 });
        }
        let (w_out, b_out) = self.output_offsets();
        out.push(ParamGroup { name: "output.weight".into(), offset: w_out, rows: self.p, cols: h });
        out.push(ParamGroup { name: "output.bias".into(), offset: b_out, rows: self.p, cols: 1 });
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    shape: MlpShape,
    theta: Vec<f64>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    /// Input to each block (`inputs[0]` is the batch itself).
    inputs: Vec<Array2<f64>>,
    xhat: Vec<Array2<f64>>,
    inv_std: Vec<Array1<f64>>,
    pre_act: Vec<Array2<f64>>,
    last: Array2<f64>,
    pub output: Array2<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn view2(theta: &[f64], offset: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), &theta[offset..offset + rows * cols]).expect("layout")
}

fn view1(theta: &[f64], offset: usize, len: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&theta[offset..offset + len])
}

fn view2_mut(theta: &mut [f64], offset: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut theta[offset..offset + rows * cols]).expect("layout")
}

fn view1_mut(theta: &mut [f64], offset: usize, len: usize) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut theta[offset..offset + len])
}

impl Mlp {
    pub fn zeros(shape: MlpShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self { theta: vec![0.0; shape.num_params()], shape })
    }

    /// Weights and biases uniform in `±1/√fan_in`, norm gains 1, shifts 0.
    pub fn init<R: Rng + ?Sized>(shape: MlpShape, rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(shape)?;
        for g in shape.groups() {
            let values = &mut mlp.theta[g.range()];
            if g.name.ends_with("norm_gain") {
                values.fill(1.0);
            } else if !g.name.ends_with("norm_shift") {
                let fan_in = if g.name.starts_with("block0") { shape.d_in } else { shape.width };
                let bound = 1.0 / (fan_in as f64).sqrt();
                values.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
            }
        }
        Ok(mlp)
    }

    pub fn from_params(shape: MlpShape, theta: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if theta.len() != shape.num_params() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for a network needing {}",
                theta.len(),
                shape.num_params()
            )));
        }
        Ok(Self { shape, theta })
    }

    pub fn shape(&self) -> MlpShape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// Forward pass over a batch (`B × d_in`), returning `B × p`.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.output)
    }

    /// Single input vector.
    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        let s = self.shape;
        if x.ncols() != s.d_in {
            return Err(Error::DimensionMismatch(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                s.d_in
            )));
        }
        let h = s.width;
        let batch = x.nrows();
        let mut inputs = Vec::with_capacity(s.depth);
        let mut xhats = Vec::with_capacity(s.depth);
        let mut inv_stds = Vec::with_capacity(s.depth);
        let mut pre_acts = Vec::with_capacity(s.depth);
        let mut act = x.to_owned();
        for b in s.blocks() {
            let w = view2(&self.theta, b.w, h, b.fan_in);
            let mut z = act.dot(&w.t());
            z += &view1(&self.theta, b.b, h);
            let gain = view1(&self.theta, b.gain, h);
            let shift = view1(&self.theta, b.shift, h);
            let mut inv_std = Array1::zeros(batch);
            let mut y = Array2::zeros((batch, h));
            for ((mut zr, mut yr), is) in z.rows_mut().into_iter().zip(y.rows_mut()).zip(inv_std.iter_mut()) {
                let mean = zr.sum() / h as f64;
                let var = zr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
                *is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                zr.mapv_inplace(|v| (v - mean) * *is);
                // zr now holds x̂
                for k in 0..h {
                    yr[k] = gain[k] * zr[k] + shift[k];
                }
            }
            let next = y.mapv(|v| v * sigmoid(v));
            inputs.push(act);
            xhats.push(z);
            inv_stds.push(inv_std);
            pre_acts.push(y);
            act = next;
        }
        let (w_out, b_out) = s.output_offsets();
        let mut output = act.dot(&view2(&self.theta, w_out, s.p, h).t());
        output += &view1(&self.theta, b_out, s.p);
        Ok(ForwardCache {
            inputs,
            xhat: xhats,
            inv_std: inv_stds,
            pre_act: pre_acts,
            last: act,
            output,
        })
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂output`.
    pub fn backward(&self, cache: &ForwardCache, d_out: ArrayView2<'_, f64>, grad: &mut [f64]) {
        let s = self.shape;
        let h = s.width;
        let (w_out, b_out) = s.output_offsets();
        general_mat_mul(1.0, &d_out.t(), &cache.last, 1.0, &mut view2_mut(grad, w_out, s.p, h));
        view1_mut(grad, b_out, s.p).scaled_add(1.0, &d_out.sum_axis(Axis(0)));
        let mut d_act = d_out.dot(&view2(&self.theta, w_out, s.p, h));

        let blocks = s.blocks();
        for (k, b) in blocks.iter().enumerate().rev() {
            let y = &cache.pre_act[k];
            let xhat = &cache.xhat[k];
            // through SiLU
            let mut dy = d_act;
            dy.zip_mut_with(y, |d, &v| {
                let sg = sigmoid(v);
                *d *= sg * (1.0 + v * (1.0 - sg));
            });
            let gain = view1(&self.theta, b.gain, h);
            {
                let mut dg = view1_mut(grad, b.gain, h);
                for (dyr, xr) in dy.rows().into_iter().zip(xhat.rows()) {
                    for j in 0..h {
                        dg[j] += dyr[j] * xr[j];
                    }
                }
            }
            view1_mut(grad, b.shift, h).scaled_add(1.0, &dy.sum_axis(Axis(0)));
            // through layer norm
            let mut dz = dy;
            for ((mut dr, xr), &is) in dz.rows_mut().into_iter().zip(xhat.rows()).zip(cache.inv_std[k].iter()) {
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for j in 0..h {
                    let d = dr[j] * gain[j];
                    dr[j] = d;
                    mean_d += d;
                    mean_dx += d * xr[j];
                }
                mean_d /= h as f64;
                mean_dx /= h as f64;
                for j in 0..h {
                    dr[j] = is * (dr[j] - mean_d - xr[j] * mean_dx);
                }
            }
            general_mat_mul(1.0, &dz.t(), &cache.inputs[k], 1.0, &mut view2_mut(grad, b.w, h, b.fan_in));
            view1_mut(grad, b.b, h).scaled_add(1.0, &dz.sum_axis(Axis(0)));
            if k == 0 {
                break;
            }
            d_act = dz.dot(&view2(&self.theta, b.w, h, b.fan_in));
        }
    }
}
