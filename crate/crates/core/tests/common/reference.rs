//! Plain f64 re-implementations of the forward operators, written directly
//! from their definitions. They share no code with the library kernels.

pub fn conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, ci, h, wd] = xs;
    let [co, _, k, _] = ws;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for bi in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.map_or(0.0, |b| b[o]);
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((bi * ci + c) * h + iy as usize) * wd + ix as usize];
                                s += w[((o * ci + c) * k + ky) * k + kx] * xv;
                            }
                        }
                    }
                    out[((bi * co + o) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    (out, [n, co, ho, wo])
}

/// Batch statistics per channel of `[B, C, S]` (S = flattened spatial).
pub fn batch_norm_train(x: &[f64], b: usize, c: usize, s: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let m = (b * s) as f64;
    for ch in 0..c {
        let idx = |n: usize, i: usize| (n * c + ch) * s + i;
        let mut mean = 0.0;
        for n in 0..b {
            for i in 0..s {
                mean += x[idx(n, i)];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for n in 0..b {
            for i in 0..s {
                var += (x[idx(n, i)] - mean).powi(2);
            }
        }
        var /= m;
        let inv = 1.0 / (var + eps).sqrt();
        for n in 0..b {
            for i in 0..s {
                out[idx(n, i)] = gamma[ch] * (x[idx(n, i)] - mean) * inv + beta[ch];
            }
        }
    }
    out
}

pub fn batch_norm_eval(x: &[f64], b: usize, c: usize, s: usize, bn: [&[f64]; 4], eps: f64) -> Vec<f64> {
    let [gamma, beta, mean, var] = bn;
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        for ch in 0..c {
            for i in 0..s {
                let j = (n * c + ch) * s + i;
                out[j] = gamma[ch] * (x[j] - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

/// Normalizes each contiguous run of `len` values.
fn standardize(x: &[f64], len: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(len).zip(out.chunks_mut(len)) {
        let mean = src.iter().sum::<f64>() / len as f64;
        let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
    }
    out
}

pub fn layer_norm(x: &[f64], c: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    standardize(x, c, eps)
        .iter()
        .enumerate()
        .map(|(i, v)| gamma[i % c] * v + beta[i % c])
        .collect()
}

pub fn group_norm(x: &[f64], c: usize, s: usize, groups: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    standardize(x, c / groups * s, eps)
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = (i / s) % c;
            gamma[ch] * v + beta[ch]
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
}

/// 3x3, stride 1, padding 1, averaging only the cells inside the plane.
pub fn avg_pool3x3(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for p in 0..planes {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let (mut s, mut cnt) = (0.0, 0.0);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xi) = (y + dy, xx + dx);
                        if yy >= 0 && xi >= 0 && yy < h as isize && xi < w as isize {
                            s += x[p * h * w + yy as usize * w + xi as usize];
                            cnt += 1.0;
                        }
                    }
                }
                out[p * h * w + y as usize * w + xx as usize] = s / cnt;
            }
        }
    }
    out
}

/// `rows × d_in` times `d_in × d_out` plus bias.
pub fn linear(x: &[f64], d_in: usize, w: &[f64], d_out: usize, b: Option<&[f64]>) -> Vec<f64> {
    let rows = x.len() / d_in;
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for o in 0..d_out {
            let mut s = b.map_or(0.0, |b| b[o]);
            for i in 0..d_in {
                s += x[r * d_in + i] * w[i * d_out + o];
            }
            out[r * d_out + o] = s;
        }
    }
    out
}

/// Softmax along `axis` of a tensor with `shape`.
pub fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|k| (x[at(k)] - m).exp()).sum();
            for k in 0..len {
                out[at(k)] = (x[at(k)] - m).exp() / z;
            }
        }
    }
    out
}

pub struct AttnShapeRef {
    pub width: usize,
    pub heads: usize,
    pub d_qk: usize,
    pub d_v: usize,
    pub tokens: usize,
    pub scale: f64,
}

/// Attention weights by name: `q.weight`, `q.bias`, ... `proj.bias`, `attn_bias`.
pub fn mhsa(x: &[f64], batch: usize, a: &AttnShapeRef, p: &dyn Fn(&str) -> Vec<f64>) -> Vec<f64> {
    let (n, c, h) = (a.tokens, a.width, a.heads);
    let q = linear(x, c, &p("q.weight"), h * a.d_qk, Some(&p("q.bias")));
    let k = linear(x, c, &p("k.weight"), h * a.d_qk, Some(&p("k.bias")));
    let v = linear(x, c, &p("v.weight"), h * a.d_v, Some(&p("v.bias")));
    let bias = p("attn_bias");
    let mut cat = vec![0.0; batch * n * h * a.d_v];
    for b in 0..batch {
        for hd in 0..h {
            for i in 0..n {
                let mut logits = vec![0.0; n];
                for (j, l) in logits.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for d in 0..a.d_qk {
                        let qi = q[(b * n + i) * h * a.d_qk + hd * a.d_qk + d];
                        let kj = k[(b * n + j) * h * a.d_qk + hd * a.d_qk + d];
                        s += qi * kj;
                    }
                    *l = s * a.scale + bias[(hd * n + i) * n + j];
                }
                let w = softmax(&logits, &[n], 0);
                for d in 0..a.d_v {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += w[j] * v[(b * n + j) * h * a.d_v + hd * a.d_v + d];
                    }
                    cat[(b * n + i) * h * a.d_v + hd * a.d_v + d] = s;
                }
            }
        }
    }
    linear(&cat, h * a.d_v, &p("proj.weight"), c, Some(&p("proj.bias")))
}

/// Conv-BN 4D MetaBlock in training mode on `[B, C, H, W]`.
pub fn mb4d_train(x: &[f64], xs: [usize; 4], exp: usize, p: &dyn Fn(&str) -> Vec<f64>) -> Vec<f64> {
    let [b, c, h, w] = xs;
    let s = h * w;
    let pooled = avg_pool3x3(x, b * c, h, w);
    let mixed: Vec<f64> = pooled.iter().zip(x).map(|(a, b)| a + b).collect();
    let hid = c * exp;
    let (y, _) = conv2d(&mixed, xs, &p("fc1.conv.weight"), [hid, c, 1, 1], Some(&p("fc1.conv.bias")), 1, 0);
    let y = batch_norm_train(&y, b, hid, s, &p("fc1.bn.gamma"), &p("fc1.bn.beta"), 1e-5);
    let y: Vec<f64> = y.into_iter().map(gelu).collect();
    let (y, _) = conv2d(&y, [b, hid, h, w], &p("fc2.conv.weight"), [c, hid, 1, 1], Some(&p("fc2.conv.bias")), 1, 0);
    let y = batch_norm_train(&y, b, c, s, &p("fc2.bn.gamma"), &p("fc2.bn.beta"), 1e-5);
    y.iter().zip(&mixed).map(|(a, b)| a + b).collect()
}

/// 3D MetaBlock on `[B, N, C]` tokens.
pub fn mb3d(x: &[f64], batch: usize, a: &AttnShapeRef, exp: usize, p: &dyn Fn(&str) -> Vec<f64>) -> Vec<f64> {
    let c = a.width;
    let n1 = layer_norm(x, c, &p("norm1.gamma"), &p("norm1.beta"), 1e-5);
    let attn = mhsa(&n1, batch, a, &|k: &str| p(&format!("attn.{k}")));
    let mixed: Vec<f64> = attn.iter().zip(x).map(|(a, b)| a + b).collect();
    let n2 = layer_norm(&mixed, c, &p("norm2.gamma"), &p("norm2.beta"), 1e-5);
    let hdn = linear(&n2, c, &p("fc1.weight"), c * exp, Some(&p("fc1.bias")));
    let hdn: Vec<f64> = hdn.into_iter().map(gelu).collect();
    let out = linear(&hdn, c * exp, &p("fc2.weight"), c, Some(&p("fc2.bias")));
    out.iter().zip(&mixed).map(|(a, b)| a + b).collect()
}
