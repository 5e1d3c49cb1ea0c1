use super::network::Mode;
use super::rng::Rng;
use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// One layer of a block. Feature maps are `[h, w, c]`, vectors are `[n]`.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2D {
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
        activation: Activation,
    },
    MaxPool2D {
        window: usize,
        stride: usize,
    },
    Dense {
        units: usize,
        activation: Activation,
    },
    GlobalAvgPool2D,
    Flatten,
    Dropout {
        rate: f64,
    },
    /// Joins the flattened outputs of a block's sources. Must open the block.
    Concat,
}

impl LayerSpec {
    /// 3×3, stride 1, `same` padding convolution.
    pub fn conv3x3(filters: usize, activation: Activation) -> Self {
        LayerSpec::Conv2D {
            filters,
            kernel: (3, 3),
            stride: 1,
            padding: Padding::Same,
            activation,
        }
    }

    pub fn max_pool(window: usize) -> Self {
        LayerSpec::MaxPool2D {
            window,
            stride: window,
        }
    }

    pub fn dense(units: usize, activation: Activation) -> Self {
        LayerSpec::Dense { units, activation }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2D { .. } => "Conv2D",
            LayerSpec::MaxPool2D { .. } => "MaxPool2D",
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::GlobalAvgPool2D => "GlobalAvgPool2D",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::Dropout { .. } => "Dropout",
            LayerSpec::Concat => "Concat",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2D { .. } | LayerSpec::Dense { .. })
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2D {
                filters,
                kernel,
                stride,
                ..
            } => {
                if filters == 0 || kernel.0 == 0 || kernel.1 == 0 {
                    return Err(Error::InvalidArgument(
                        "Conv2D needs nonzero filters and kernel".into(),
                    ));
                }
                if stride == 0 {
                    return Err(Error::InvalidArgument("Conv2D stride must be >= 1".into()));
                }
            }
            LayerSpec::MaxPool2D { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err(Error::InvalidArgument(
                        "MaxPool2D window and stride must be >= 1".into(),
                    ));
                }
            }
            LayerSpec::Dense { units, .. } => {
                if units == 0 {
                    return Err(Error::InvalidArgument("Dense needs >= 1 unit".into()));
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::InvalidArgument(format!(
                        "Dropout rate {rate} outside [0, 1)"
                    )));
                }
            }
            LayerSpec::GlobalAvgPool2D | LayerSpec::Flatten | LayerSpec::Concat => {}
        }
        Ok(())
    }

    pub(crate) fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let need_map = || -> Result<(usize, usize, usize)> {
            match *input {
                [h, w, c] => Ok((h, w, c)),
                _ => Err(Error::Shape(format!(
                    "{} expects a [h, w, c] map, got {input:?}",
                    self.kind()
                ))),
            }
        };
        match *self {
            LayerSpec::Conv2D { filters, .. } => {
                let g = ConvGeom::new(self, input)?;
                Ok(vec![g.oh, g.ow, filters])
            }
            LayerSpec::MaxPool2D { window, stride } => {
                let (h, w, c) = need_map()?;
                if h < window || w < window {
                    return Err(Error::Shape(format!(
                        "MaxPool2D window {window} larger than map {h}x{w}"
                    )));
                }
                Ok(vec![(h - window) / stride + 1, (w - window) / stride + 1, c])
            }
            LayerSpec::Dense { units, .. } => match input {
                [_] => Ok(vec![units]),
                _ => Err(Error::Shape(format!(
                    "Dense expects a flat vector, got {input:?}"
                ))),
            },
            LayerSpec::GlobalAvgPool2D => {
                let (_, _, c) = need_map()?;
                Ok(vec![c])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::Concat => match input {
                [_] => Ok(input.to_vec()),
                _ => Err(Error::Shape(format!(
                    "Concat expects flat inputs, got {input:?}"
                ))),
            },
        }
    }

    /// `(suffix, shape)` of each parameter tensor for the given input shape.
    pub(crate) fn param_shapes(&self, input: &[usize]) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2D {
                filters, kernel, ..
            } => {
                let cin = input.last().copied().unwrap_or(0);
                vec![
                    ("bias", vec![filters]),
                    ("kernel", vec![kernel.0, kernel.1, cin, filters]),
                ]
            }
            LayerSpec::Dense { units, .. } => {
                let n = input.first().copied().unwrap_or(0);
                vec![("bias", vec![units]), ("kernel", vec![n, units])]
            }
            _ => Vec::new(),
        }
    }

    /// `(fan_in, fan_out)` used by Glorot initialization.
    pub(crate) fn fans(&self, input: &[usize]) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv2D {
                filters, kernel, ..
            } => {
                let cin = input.last().copied().unwrap_or(0);
                let area = kernel.0 * kernel.1;
                Some((area * cin, area * filters))
            }
            LayerSpec::Dense { units, .. } => Some((input[0], units)),
            _ => None,
        }
    }

    pub(crate) fn forward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        params: Option<LayerParams<'_, T>>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Tensor<T>, LayerCache<T>)> {
        match *self {
            LayerSpec::Conv2D {
                filters,
                activation,
                ..
            } => {
                let p = params.expect("conv parameters");
                let g = ConvGeom::new(self, x.shape())?;
                let cols = g.im2col(x.data());
                let positions = g.oh * g.ow;
                let mut out = vec![T::zero(); positions * filters];
                T::gemm(
                    positions,
                    g.patch_len(),
                    filters,
                    &cols,
                    false,
                    p.kernel.data(),
                    false,
                    &mut out,
                    false,
                );
                for row in out.chunks_exact_mut(filters) {
                    for (v, &b) in row.iter_mut().zip(p.bias.data()) {
                        *v = *v + b;
                    }
                }
                activate(activation, &mut out);
                Ok((
                    Tensor::new(vec![g.oh, g.ow, filters], out)?,
                    LayerCache::Cols(cols),
                ))
            }
            LayerSpec::MaxPool2D { window, stride } => {
                let shape = self.output_shape(x.shape())?;
                let (w, c) = (x.shape()[1], x.shape()[2]);
                let (oh, ow) = (shape[0], shape[1]);
                let src = x.data();
                let mut out = Vec::with_capacity(oh * ow * c);
                let mut argmax = Vec::with_capacity(oh * ow * c);
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let mut best_idx = ((oy * stride) * w + ox * stride) * c + ch;
                            let mut best = src[best_idx];
                            for i in 0..window {
                                for j in 0..window {
                                    let idx = ((oy * stride + i) * w + ox * stride + j) * c + ch;
                                    if src[idx] > best {
                                        best = src[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            out.push(best);
                            argmax.push(best_idx as u32);
                        }
                    }
                }
                Ok((Tensor::new(shape, out)?, LayerCache::Argmax(argmax)))
            }
            LayerSpec::Dense { units, activation } => {
                let p = params.expect("dense parameters");
                let n = x.len();
                let mut out = p.bias.data().to_vec();
                T::gemm(1, n, units, x.data(), false, p.kernel.data(), false, &mut out, true);
                activate(activation, &mut out);
                Ok((Tensor::vector(out), LayerCache::None))
            }
            LayerSpec::GlobalAvgPool2D => {
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut sums = vec![0.0f64; c];
                for px in x.data().chunks_exact(c) {
                    for (s, v) in sums.iter_mut().zip(px) {
                        *s += v.as_f64();
                    }
                }
                let area = (h * w) as f64;
                let out = sums.into_iter().map(|s| T::of(s / area)).collect();
                Ok((Tensor::vector(out), LayerCache::None))
            }
            LayerSpec::Flatten | LayerSpec::Concat => {
                Ok((x.clone().reshape(&[x.len()])?, LayerCache::None))
            }
            LayerSpec::Dropout { rate } => {
                if mode == Mode::Eval || rate == 0.0 {
                    return Ok((x.clone(), LayerCache::None));
                }
                let scale = T::of(1.0 / (1.0 - rate));
                let mask: Vec<T> = (0..x.len())
                    .map(|_| if rng.next_f64() < rate { T::zero() } else { scale })
                    .collect();
                let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                Ok((Tensor::new(x.shape().to_vec(), out)?, LayerCache::Mask(mask)))
            }
        }
    }

    /// Accumulates parameter gradients (when `grads` is given) and returns the
    /// gradient with respect to `x` when `need_dx` is set.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        cache: &LayerCache<T>,
        dy: Tensor<T>,
        params: Option<LayerParams<'_, T>>,
        grads: Option<LayerGrads<'_, T>>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        match *self {
            LayerSpec::Conv2D {
                filters,
                activation,
                ..
            } => {
                let g = ConvGeom::new(self, x.shape())?;
                let LayerCache::Cols(cols) = cache else {
                    return Err(Error::Missing("Conv2D forward cache".into()));
                };
                let mut dz = dy.into_data();
                activation_grad(activation, y.data(), &mut dz);
                let positions = g.oh * g.ow;
                let patch = g.patch_len();
                if let Some(gr) = grads {
                    T::gemm(patch, positions, filters, cols, true, &dz, false, gr.kernel.data_mut(), true);
                    accumulate_column_sums(&dz, filters, gr.bias.data_mut());
                }
                if !need_dx {
                    return Ok(None);
                }
                let p = params.expect("conv parameters");
                let mut dcols = vec![T::zero(); positions * patch];
                T::gemm(positions, filters, patch, &dz, false, p.kernel.data(), true, &mut dcols, false);
                Ok(Some(Tensor::new(x.shape().to_vec(), g.col2im(&dcols))?))
            }
            LayerSpec::MaxPool2D { .. } => {
                if !need_dx {
                    return Ok(None);
                }
                let LayerCache::Argmax(argmax) = cache else {
                    return Err(Error::Missing("MaxPool2D forward cache".into()));
                };
                let mut dx = vec![T::zero(); x.len()];
                for (&idx, &g) in argmax.iter().zip(dy.data()) {
                    dx[idx as usize] = dx[idx as usize] + g;
                }
                Ok(Some(Tensor::new(x.shape().to_vec(), dx)?))
            }
            LayerSpec::Dense { units, activation } => {
                let n = x.len();
                let mut dz = dy.into_data();
                activation_grad(activation, y.data(), &mut dz);
                if let Some(gr) = grads {
                    T::gemm(n, 1, units, x.data(), false, &dz, false, gr.kernel.data_mut(), true);
                    for (b, &d) in gr.bias.data_mut().iter_mut().zip(&dz) {
                        *b = *b + d;
                    }
                }
                if !need_dx {
                    return Ok(None);
                }
                let p = params.expect("dense parameters");
                let mut dx = vec![T::zero(); n];
                T::gemm(1, units, n, &dz, false, p.kernel.data(), true, &mut dx, false);
                Ok(Some(Tensor::vector(dx)))
            }
            LayerSpec::GlobalAvgPool2D => {
                if !need_dx {
                    return Ok(None);
                }
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let inv = T::of(1.0 / (h * w) as f64);
                let per_channel: Vec<T> = dy.data().iter().map(|&g| g * inv).collect();
                let mut dx = Vec::with_capacity(x.len());
                for _ in 0..h * w {
                    dx.extend_from_slice(&per_channel[..c]);
                }
                Ok(Some(Tensor::new(x.shape().to_vec(), dx)?))
            }
            LayerSpec::Flatten | LayerSpec::Concat => {
                if !need_dx {
                    return Ok(None);
                }
                Ok(Some(dy.reshape(x.shape())?))
            }
            LayerSpec::Dropout { .. } => {
                if !need_dx {
                    return Ok(None);
                }
                match cache {
                    LayerCache::Mask(mask) => {
                        let dx = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                        Ok(Some(Tensor::new(x.shape().to_vec(), dx)?))
                    }
                    _ => Ok(Some(dy)),
                }
            }
        }
    }
}

pub(crate) struct LayerParams<'a, T> {
    pub kernel: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
}

pub(crate) struct LayerGrads<'a, T> {
    pub kernel: &'a mut Tensor<T>,
    pub bias: &'a mut Tensor<T>,
}

#[derive(Debug, Clone)]
pub(crate) enum LayerCache<T> {
    None,
    Cols(Vec<T>),
    Argmax(Vec<u32>),
    Mask(Vec<T>),
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn activate<T: Scalar>(activation: Activation, values: &mut [T]) {
    match activation {
        Activation::Relu => values.iter_mut().for_each(|v| *v = v.max(T::zero())),
        Activation::Sigmoid => values.iter_mut().for_each(|v| *v = sigmoid(*v)),
        Activation::None => {}
    }
}

/// Multiplies `grad` in place by the activation derivative, expressed through
/// the activation output `y`.
fn activation_grad<T: Scalar>(activation: Activation, y: &[T], grad: &mut [T]) {
    match activation {
        Activation::Relu => {
            for (g, &v) in grad.iter_mut().zip(y) {
                if v <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        Activation::Sigmoid => {
            for (g, &v) in grad.iter_mut().zip(y) {
                *g = *g * v * (T::one() - v);
            }
        }
        Activation::None => {}
    }
}

fn accumulate_column_sums<T: Scalar>(rows: &[T], width: usize, into: &mut [T]) {
    let mut sums = vec![0.0f64; width];
    for row in rows.chunks_exact(width) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v.as_f64();
        }
    }
    for (b, s) in into.iter_mut().zip(sums) {
        *b = *b + T::of(s);
    }
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn new(layer: &LayerSpec, input: &[usize]) -> Result<Self> {
        let LayerSpec::Conv2D {
            kernel: (kh, kw),
            stride,
            padding,
            ..
        } = *layer
        else {
            unreachable!("ConvGeom on a non-conv layer");
        };
        let [h, w, cin] = *input else {
            return Err(Error::Shape(format!(
                "Conv2D expects a [h, w, c] map, got {input:?}"
            )));
        };
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(Error::Shape(format!(
                        "Conv2D kernel {kh}x{kw} larger than map {h}x{w}"
                    )));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            stride,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn source(&self, out: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let patch = self.patch_len();
        let mut cols = vec![T::zero(); self.oh * self.ow * patch];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = (oy * self.ow + ox) * patch;
                for i in 0..self.kh {
                    let Some(iy) = self.source(oy, i, self.pad_top, self.h) else {
                        continue;
                    };
                    for j in 0..self.kw {
                        let Some(ix) = self.source(ox, j, self.pad_left, self.w) else {
                            continue;
                        };
                        let dst = row + (i * self.kw + j) * self.cin;
                        let src = (iy * self.w + ix) * self.cin;
                        cols[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let patch = self.patch_len();
        let mut dx = vec![T::zero(); self.h * self.w * self.cin];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = (oy * self.ow + ox) * patch;
                for i in 0..self.kh {
                    let Some(iy) = self.source(oy, i, self.pad_top, self.h) else {
                        continue;
                    };
                    for j in 0..self.kw {
                        let Some(ix) = self.source(ox, j, self.pad_left, self.w) else {
                            continue;
                        };
                        let src = row + (i * self.kw + j) * self.cin;
                        let dst = (iy * self.w + ix) * self.cin;
                        for (d, &s) in dx[dst..dst + self.cin].iter_mut().zip(&cols[src..src + self.cin]) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
        dx
    }
}
