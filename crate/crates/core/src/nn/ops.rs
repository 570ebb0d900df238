use rayon::prelude::*;

use super::matrix::{matmul_raw, FeatureMatrix};
use super::weights::{Init, TensorSpec, WeightStore};
use crate::error::{Error, Result};

/// `y = x·W + b` with `W = {prefix}.weight` of shape `[in, out]` and
/// `b = {prefix}.bias` of shape `[out]`.
pub fn linear(x: &FeatureMatrix, prefix: &str, w: &WeightStore) -> Result<FeatureMatrix> {
    let wt = w.get(&format!("{prefix}.weight"))?;
    let bias = w.get(&format!("{prefix}.bias"))?;
    let [fan_in, fan_out] = match wt.shape() {
        &[a, b] => [a, b],
        s => return Err(Error::shape(format!("{prefix}.weight"), s, &[x.cols(), 0])),
    };
    if x.cols() != fan_in {
        return Err(Error::shape(format!("linear `{prefix}`"), &x.shape(), wt.shape()));
    }
    if bias.shape() != [fan_out] {
        return Err(Error::shape(format!("{prefix}.bias"), bias.shape(), &[fan_out]));
    }
    let y = matmul_raw(x.data(), x.rows(), fan_in, &wt.to_f64(), fan_out);
    y.add_row(&bias.to_f64())
}

/// Stacked linear layers `{prefix}.0`, `{prefix}.1`, ... with ReLU between
/// layers but not after the last. `dims` includes the input width.
pub fn mlp(x: &FeatureMatrix, prefix: &str, dims: &[usize], w: &WeightStore) -> Result<FeatureMatrix> {
    if dims.len() < 2 {
        return Err(Error::invalid("mlp needs at least an input and an output width"));
    }
    if dims[0] != x.cols() {
        return Err(Error::shape(format!("mlp `{prefix}` input"), &x.shape(), &[dims[0]]));
    }
    let layers = dims.len() - 1;
    let mut h = x.clone();
    for (i, pair) in dims.windows(2).enumerate() {
        let name = format!("{prefix}.{i}");
        let wt = w.get(&format!("{name}.weight"))?;
        if wt.shape() != [pair[0], pair[1]] {
            return Err(Error::shape(format!("{name}.weight"), wt.shape(), pair));
        }
        h = linear(&h, &name, w)?;
        if i + 1 < layers {
            h = h.relu();
        }
    }
    Ok(h)
}

pub fn mlp_specs(prefix: &str, dims: &[usize]) -> Vec<TensorSpec> {
    dims.windows(2)
        .enumerate()
        .flat_map(|(i, p)| TensorSpec::linear(&format!("{prefix}.{i}"), p[0], p[1]))
        .collect()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &FeatureMatrix) -> FeatureMatrix {
    let cols = x.cols();
    let mut data = x.data().to_vec();
    if cols > 0 {
        data.par_chunks_mut(cols).for_each(softmax_in_place);
    }
    FeatureMatrix::from_raw(x.rows(), cols, data)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Transformer sinusoid: channel `2k` is `sin(t / 10000^(2k/C))`, channel
/// `2k+1` the matching cosine.
pub fn sinusoidal_embed(t: f64, channels: usize) -> Result<Vec<f64>> {
    if channels < 2 || !channels.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "sinusoidal width must be even and at least 2, got {channels}"
        )));
    }
    let mut out = Vec::with_capacity(channels);
    for k in 0..channels / 2 {
        let freq = 10000f64.powf((2 * k) as f64 / channels as f64);
        let a = t / freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

/// One embedding row per value.
pub fn sinusoidal_rows(ts: &[f64], channels: usize) -> Result<FeatureMatrix> {
    let mut data = Vec::with_capacity(ts.len() * channels);
    for &t in ts {
        data.extend(sinusoidal_embed(t, channels)?);
    }
    if ts.is_empty() {
        sinusoidal_embed(0.0, channels)?;
    }
    Ok(FeatureMatrix::from_raw(ts.len(), channels, data))
}

/// Channel plan of the strided depth-map encoder, excluding the final
/// width which is configurable.
pub const CONV_STAGE_WIDTHS: [usize; 4] = [16, 32, 64, 128];

/// Single-channel image stack, each `height × width`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    pub height: usize,
    pub width: usize,
    pub images: Vec<Vec<f64>>,
}

pub fn conv_encoder_specs(prefix: &str, out_channels: usize) -> Vec<TensorSpec> {
    let mut widths = vec![1];
    widths.extend(CONV_STAGE_WIDTHS);
    widths.push(out_channels);
    widths
        .windows(2)
        .enumerate()
        .flat_map(|(s, p)| conv_stage_specs(&format!("{prefix}.{s}"), p[0], p[1]))
        .collect()
}

pub fn conv_stage_specs(prefix: &str, cin: usize, cout: usize) -> [TensorSpec; 2] {
    [
        TensorSpec {
            name: format!("{prefix}.weight"),
            shape: vec![cout, cin, 3, 3],
            init: Init::Xavier {
                fan_in: cin * 9,
                fan_out: cout * 9,
            },
        },
        TensorSpec {
            name: format!("{prefix}.bias"),
            shape: vec![cout],
            init: Init::Zeros,
        },
    ]
}

/// 3×3 convolution, stride 2, zero padding 1, ReLU. Input and output are
/// channel-major (`C × H × W`). Output is `ceil(H/2) × ceil(W/2)`.
pub fn conv3x3_s2(
    input: &[f64],
    cin: usize,
    h: usize,
    wd: usize,
    prefix: &str,
    w: &WeightStore,
) -> Result<(Vec<f64>, usize, usize, usize)> {
    let wt = w.get(&format!("{prefix}.weight"))?;
    let bias = w.get(&format!("{prefix}.bias"))?;
    let cout = match wt.shape() {
        &[co, ci, 3, 3] if ci == cin => co,
        s => return Err(Error::shape(format!("conv `{prefix}`"), s, &[0, cin, 3, 3])),
    };
    if bias.shape() != [cout] {
        return Err(Error::shape(format!("{prefix}.bias"), bias.shape(), &[cout]));
    }
    if input.len() != cin * h * wd {
        return Err(Error::shape(
            format!("conv `{prefix}` input"),
            &[input.len()],
            &[cin, h, wd],
        ));
    }
    let kernel = wt.to_f64();
    let b = bias.to_f64();
    let (oh, ow) = (h.div_ceil(2), wd.div_ceil(2));
    let mut out = vec![0.0; cout * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(co, plane)| {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[co];
                for ci in 0..cin {
                    let kbase = (co * cin + ci) * 9;
                    let ibase = ci * h * wd;
                    for ky in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += kernel[kbase + ky * 3 + kx] * input[ibase + iy as usize * wd + ix as usize];
                        }
                    }
                }
                plane[oy * ow + ox] = acc.max(0.0);
            }
        }
    });
    Ok((out, cout, oh, ow))
}

/// Five stride-2 conv stages; each image becomes an `(H/32)·(W/32) × C`
/// token matrix, tokens in row-major grid order.
pub fn conv2d_encoder(stack: &ImageStack, prefix: &str, w: &WeightStore) -> Result<Vec<FeatureMatrix>> {
    if stack.height == 0 || stack.width == 0 || !stack.height.is_multiple_of(32) || !stack.width.is_multiple_of(32) {
        return Err(Error::invalid(format!(
            "image size {}x{} is not divisible by 32",
            stack.height, stack.width
        )));
    }
    let mut out = Vec::with_capacity(stack.images.len());
    for img in &stack.images {
        if img.len() != stack.height * stack.width {
            return Err(Error::shape(
                "conv2d_encoder image",
                &[img.len()],
                &[stack.height, stack.width],
            ));
        }
        let (mut buf, mut c, mut h, mut wd) = (img.clone(), 1, stack.height, stack.width);
        for s in 0..=CONV_STAGE_WIDTHS.len() {
            (buf, c, h, wd) = conv3x3_s2(&buf, c, h, wd, &format!("{prefix}.{s}"), w)?;
        }
        // Channel-major to token-major.
        let p = h * wd;
        let mut tokens = vec![0.0; p * c];
        for ch in 0..c {
            for t in 0..p {
                tokens[t * c + ch] = buf[ch * p + t];
            }
        }
        out.push(FeatureMatrix::from_raw(p, c, tokens));
    }
    Ok(out)
}

pub fn conv_transpose1d_specs(prefix: &str, cin: usize, cout: usize, n_out: usize) -> [TensorSpec; 2] {
    [
        TensorSpec {
            name: format!("{prefix}.weight"),
            shape: vec![cin, cout, n_out],
            init: Init::Xavier {
                fan_in: cin,
                fan_out: cout * n_out,
            },
        },
        TensorSpec {
            name: format!("{prefix}.bias"),
            shape: vec![cout],
            init: Init::Zeros,
        },
    ]
}

/// Transposed 1-d convolution of a length-1 sequence with kernel size and
/// stride both `n_out`: `out[t][o] = b[o] + Σ_i g[i]·W[i][o][t]`.
pub fn conv_transpose1d(g: &[f64], n_out: usize, prefix: &str, w: &WeightStore) -> Result<FeatureMatrix> {
    let wt = w.get(&format!("{prefix}.weight"))?;
    let bias = w.get(&format!("{prefix}.bias"))?;
    let (cin, cout) = match wt.shape() {
        &[ci, co, k] if ci == g.len() && k == n_out => (ci, co),
        s => {
            return Err(Error::shape(
                format!("conv_transpose1d `{prefix}`"),
                s,
                &[g.len(), 0, n_out],
            ))
        }
    };
    if n_out == 0 {
        return Err(Error::invalid("n_out must be at least 1"));
    }
    let kernel = wt.data();
    let b = bias.to_f64();
    let mut out = vec![0.0; n_out * cout];
    out.par_chunks_mut(cout).enumerate().for_each(|(t, row)| {
        for (o, v) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..cin {
                acc += g[i] * kernel[(i * cout + o) * n_out + t] as f64;
            }
            *v = acc + b[o];
        }
    });
    Ok(FeatureMatrix::from_raw(n_out, cout, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::weights::Tensor;

    fn store_with(entries: &[(&str, Vec<usize>, Vec<f32>)]) -> WeightStore {
        let mut s = WeightStore::new();
        for (n, shape, d) in entries {
            s.insert(n, Tensor::new(shape.clone(), d.clone()).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn linear_identity_and_constant() {
        let w = store_with(&[
            ("id.weight", vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
            ("id.bias", vec![2], vec![0.0, 0.0]),
            ("c.weight", vec![2, 3], vec![0.0; 6]),
            ("c.bias", vec![3], vec![1.0, 2.0, 3.0]),
        ]);
        let x = FeatureMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(linear(&x, "id", &w).unwrap().data(), &[1.0, 2.0]);
        let x2 = FeatureMatrix::from_rows(&[vec![5.0, -1.0], vec![0.5, 9.0]]).unwrap();
        let y = linear(&x2, "c", &w).unwrap();
        assert_eq!(y.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(y.row(1), &[1.0, 2.0, 3.0]);
        let err = linear(&FeatureMatrix::zeros(1, 3), "id", &w).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        assert!(matches!(linear(&x, "nope", &w), Err(Error::MissingTensor(_))));
    }

    #[test]
    fn mlp_relu_kill() {
        // First layer maps everything negative; relu zeroes it and the last
        // layer then emits its bias.
        let w = store_with(&[
            ("m.0.weight", vec![1, 2], vec![-1.0, -1.0]),
            ("m.0.bias", vec![2], vec![-1.0, -1.0]),
            ("m.1.weight", vec![2, 1], vec![3.0, 4.0]),
            ("m.1.bias", vec![1], vec![0.5]),
        ]);
        let x = FeatureMatrix::from_rows(&[vec![2.0], vec![7.0]]).unwrap();
        assert_eq!(mlp(&x, "m", &[1, 2, 1], &w).unwrap().data(), &[0.5, 0.5]);
        assert!(mlp(&x, "m", &[1, 3, 1], &w).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let x = FeatureMatrix::from_rows(&[vec![0.0, 3f64.ln()], vec![2.0; 2]]).unwrap();
        let s = softmax_rows(&x);
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15 && (s.get(0, 1) - 0.75).abs() < 1e-15);
        assert!(s.row(1).iter().all(|&v| v == 0.5));
        let big = FeatureMatrix::from_rows(&[vec![1000.0, 1000.0, -1000.0]]).unwrap();
        let sb = softmax_rows(&big);
        assert!(sb.data().iter().all(|v| v.is_finite()));
        assert_eq!(sb.get(0, 0), 0.5);
    }

    #[test]
    fn sigmoid_tails() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((1.0 - sigmoid(20.0)) < 1e-8);
        assert!(sigmoid(-20.0) < 1e-8 && sigmoid(-20.0) > 0.0);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn sinusoid_values() {
        assert_eq!(sinusoidal_embed(0.0, 6).unwrap(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = sinusoidal_embed(std::f64::consts::PI, 2).unwrap();
        assert!(e[0].abs() < 1e-15 && (e[1] + 1.0).abs() < 1e-15);
        assert!(sinusoidal_embed(1.0, 3).is_err());
        assert!(sinusoidal_embed(1.0, 0).is_err());
        assert!(sinusoidal_embed(1234.5, 64).unwrap().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn conv_transpose_single_output_is_linear() {
        let w = store_with(&[
            ("t.weight", vec![2, 3, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            ("t.bias", vec![3], vec![0.0, 0.0, 1.0]),
            ("l.weight", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            ("l.bias", vec![3], vec![0.0, 0.0, 1.0]),
        ]);
        let g = [0.5, -2.0];
        let a = conv_transpose1d(&g, 1, "t", &w).unwrap();
        let b = linear(&FeatureMatrix::from_rows(&[g.to_vec()]).unwrap(), "l", &w).unwrap();
        assert_eq!(a, b);
        assert!(conv_transpose1d(&g, 2, "t", &w).is_err());
    }

    #[test]
    fn encoder_rejects_indivisible() {
        let stack = ImageStack {
            height: 48,
            width: 64,
            images: vec![vec![0.0; 48 * 64]],
        };
        assert!(conv2d_encoder(&stack, "cnn", &WeightStore::new()).is_err());
    }
}
