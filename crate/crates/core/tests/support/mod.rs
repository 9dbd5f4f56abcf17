//! Brute-force loop oracles shared by the test suites. Everything here is
//! written with explicit index loops over plain `f64` buffers and uses no
//! crate kernels, so agreement with the library is meaningful.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod cases;

use stf_core::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn idx4(s: &[usize], n: usize, c: usize, t: usize, v: usize) -> usize {
    ((n * s[1] + c) * s[2] + t) * s[3] + v
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `out[n,o,t,u] = Σ_i Σ_v Σ_c A_i[u][v] · x[n,c,t,v] · W_i[o][c]`.
pub fn graph_aggregate(x: &Tensor<f64>, adj: &[Mat], w: &[Tensor<f64>]) -> Tensor<f64> {
    let s = x.shape();
    let (n, c, t, v) = (s[0], s[1], s[2], s[3]);
    let co = w[0].shape()[0];
    let os = [n, co, t, v];
    let mut out = vec![0.0; n * co * t * v];
    for i in 0..adj.len() {
        let wd = w[i].data();
        for nn in 0..n {
            for o in 0..co {
                for tt in 0..t {
                    for u in 0..v {
                        let mut acc = 0.0;
                        for vv in 0..v {
                            for ci in 0..c {
                                acc += adj[i][u][vv]
                                    * x.data()[idx4(s, nn, ci, tt, vv)]
                                    * wd[o * c + ci];
                            }
                        }
                        out[idx4(&os, nn, o, tt, u)] += acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&os, out).unwrap()
}

/// Training-mode batch norm over every axis but 1 (biased variance).
pub fn batch_norm_train(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor<f64> {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let l: usize = s[2..].iter().product();
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|nn| (0..l).map(move |k| (nn, k)))
            .map(|(nn, k)| d[(nn * c + ch) * l + k])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        for nn in 0..n {
            for k in 0..l {
                let i = (nn * c + ch) * l + k;
                out[i] = gamma[ch] * (d[i] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
    }
    Tensor::from_vec(s, out).unwrap()
}

pub fn relu(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| v.max(0.0))
}

/// 1×1 conv over axis 1 of a `[N, C, ...]` tensor.
pub fn pointwise(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let l: usize = s[2..].iter().product();
    let co = w.shape()[0];
    let mut out = vec![0.0; n * co * l];
    for nn in 0..n {
        for o in 0..co {
            for k in 0..l {
                let mut acc = b.map_or(0.0, |b| b.data()[o]);
                for ci in 0..c {
                    acc += w.data()[o * c + ci] * x.data()[(nn * c + ci) * l + k];
                }
                out[(nn * co + o) * l + k] = acc;
            }
        }
    }
    let mut os = s.to_vec();
    os[1] = co;
    Tensor::from_vec(&os, out).unwrap()
}

/// Zero-padded temporal conv of `[N, C, T]` with weight `[C', C/g, k]`.
pub fn conv1d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    groups: usize,
) -> Tensor<f64> {
    let s = x.shape();
    let (n, c, t) = (s[0], s[1], s[2]);
    let ws = w.shape();
    let (co, cig, k) = (ws[0], ws[1], ws[2]);
    let cog = co / groups;
    let pad = (k - 1) / 2;
    let t_out = t.div_ceil(stride);
    let mut out = vec![0.0; n * co * t_out];
    for nn in 0..n {
        for o in 0..co {
            let g = o / cog;
            for to in 0..t_out {
                let mut acc = b.map_or(0.0, |b| b.data()[o]);
                for ci in 0..cig {
                    let cin = g * cig + ci;
                    for kk in 0..k {
                        let ti = (to * stride + kk) as isize - pad as isize;
                        if ti >= 0 && (ti as usize) < t {
                            acc += w.data()[(o * cig + ci) * k + kk]
                                * x.data()[(nn * c + cin) * t + ti as usize];
                        }
                    }
                }
                out[(nn * co + o) * t_out + to] = acc;
            }
        }
    }
    Tensor::from_vec(&[n, co, t_out], out).unwrap()
}

pub type Conv = (Tensor<f64>, Option<Tensor<f64>>);

pub struct McfWeights {
    pub reduce: Conv,
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub recover: Tensor<f64>,
    pub omega: Vec<f64>,
}

/// Multi-grain attention written out joint by joint. Returns the output and,
/// per grain, the attention `[n][u][part]`.
pub fn mcf(x: &Tensor<f64>, p: &McfWeights, pooling: &[Mat]) -> (Tensor<f64>, Vec<Vec<Mat>>) {
    let s = x.shape().to_vec();
    let (n, t, v) = (s[0], s[2], s[3]);
    let xr = pointwise(x, &p.reduce.0, p.reduce.1.as_ref());
    let cr = xr.shape()[1];
    let q = pointwise(&xr, &p.query.0, p.query.1.as_ref());
    let k = pointwise(&xr, &p.key.0, p.key.1.as_ref());
    let val = pointwise(&xr, &p.value.0, p.value.1.as_ref());
    let rs = [n, cr, t, v];
    let mut fused = vec![0.0; n * cr * t * v];
    let mut attentions = Vec::new();
    for (g, pool) in pooling.iter().enumerate() {
        let parts = pool.len();
        let mut per_sample = Vec::new();
        for nn in 0..n {
            // part-pooled keys and values: [cr][t][part]
            let pooled = |src: &Tensor<f64>, c: usize, tt: usize, part: usize| -> f64 {
                (0..v)
                    .map(|j| pool[part][j] * src.data()[idx4(&rs, nn, c, tt, j)])
                    .sum()
            };
            let mut att = vec![vec![0.0; parts]; v];
            for u in 0..v {
                let mut scores = vec![0.0; parts];
                for (part, sc) in scores.iter_mut().enumerate() {
                    for c in 0..cr {
                        for tt in 0..t {
                            *sc += q.data()[idx4(&rs, nn, c, tt, u)] * pooled(&k, c, tt, part);
                        }
                    }
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for part in 0..parts {
                    att[u][part] = (scores[part] - m).exp() / z;
                }
            }
            for c in 0..cr {
                for tt in 0..t {
                    for u in 0..v {
                        let ctx: f64 = (0..parts)
                            .map(|part| att[u][part] * pooled(&val, c, tt, part))
                            .sum();
                        fused[idx4(&rs, nn, c, tt, u)] += p.omega[g] * ctx;
                    }
                }
            }
            per_sample.push(att);
        }
        attentions.push(per_sample);
    }
    let fused = Tensor::from_vec(&rs, fused).unwrap();
    let rec = pointwise(&fused, &p.recover, None);
    let out: Vec<f64> = x
        .data()
        .iter()
        .zip(rec.data())
        .map(|(a, b)| a + b)
        .collect();
    (Tensor::from_vec(&s, out).unwrap(), attentions)
}

/// Plain (single-grain, joint-resolution) non-local block in matrix form:
/// per sample, `Θ, Φ, G ∈ R^{V×D}` with `D = C'·T`,
/// `Z = X + W_z · (softmax_rows(Θ Φᵀ) G)`.
pub fn non_local(x: &Tensor<f64>, p: &McfWeights) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let (n, t, v) = (s[0], s[2], s[3]);
    let xr = pointwise(x, &p.reduce.0, p.reduce.1.as_ref());
    let cr = xr.shape()[1];
    let rs = [n, cr, t, v];
    let embed = |w: &Conv| -> Vec<Mat> {
        let e = pointwise(&xr, &w.0, w.1.as_ref());
        (0..n)
            .map(|nn| {
                (0..v)
                    .map(|u| {
                        (0..cr)
                            .flat_map(|c| (0..t).map(move |tt| (c, tt)))
                            .map(|(c, tt)| e.data()[idx4(&rs, nn, c, tt, u)])
                            .collect()
                    })
                    .collect()
            })
            .collect()
    };
    let (th, ph, gg) = (embed(&p.query), embed(&p.key), embed(&p.value));
    let mut y = vec![0.0; n * cr * t * v];
    for nn in 0..n {
        for u in 0..v {
            let logits: Vec<f64> = (0..v)
                .map(|w| th[nn][u].iter().zip(&ph[nn][w]).map(|(a, b)| a * b).sum())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..cr * t {
                let val: f64 = (0..v).map(|w| e[w] / z * gg[nn][w][d]).sum();
                y[idx4(&rs, nn, d / t, d % t, u)] = p.omega[0] * val;
            }
        }
    }
    let rec = pointwise(&Tensor::from_vec(&rs, y).unwrap(), &p.recover, None);
    let out: Vec<f64> = x
        .data()
        .iter()
        .zip(rec.data())
        .map(|(a, b)| a + b)
        .collect();
    Tensor::from_vec(&s, out).unwrap()
}

pub struct TdfWeights {
    pub squeeze: Tensor<f64>,
    pub bn: (Vec<f64>, Vec<f64>),
    pub excite: (Tensor<f64>, Tensor<f64>),
    pub groups: usize,
    pub motion: bool,
}

/// Temporal excitation with training-mode batch norm in the squeeze path.
/// Returns the output and the gate `[N, C, T]`.
pub fn tdf(y: &Tensor<f64>, p: &TdfWeights, eps: f64) -> (Tensor<f64>, Tensor<f64>) {
    let s = y.shape().to_vec();
    let (n, c, t, v) = (s[0], s[1], s[2], s[3]);
    let mut pooled = vec![0.0; n * c * t];
    for nn in 0..n {
        for ch in 0..c {
            for tt in 0..t {
                pooled[(nn * c + ch) * t + tt] = (0..v)
                    .map(|j| y.data()[idx4(&s, nn, ch, tt, j)])
                    .sum::<f64>()
                    / v as f64;
            }
        }
    }
    if p.motion {
        let src = pooled.clone();
        for nn in 0..n {
            for ch in 0..c {
                for tt in 0..t {
                    let i = (nn * c + ch) * t + tt;
                    pooled[i] = if tt + 1 < t { src[i + 1] - src[i] } else { 0.0 };
                }
            }
        }
    }
    let pooled = Tensor::from_vec(&[n, c, t], pooled).unwrap();
    let h = conv1d(&pooled, &p.squeeze, None, 1, p.groups);
    let h = relu(&batch_norm_train(&h, &p.bn.0, &p.bn.1, eps));
    let h = conv1d(&h, &p.excite.0, Some(&p.excite.1), 1, p.groups);
    let gate = h.map(|z| 1.0 / (1.0 + (-z).exp()));
    let mut out = vec![0.0; y.numel()];
    for nn in 0..n {
        for ch in 0..c {
            for tt in 0..t {
                let g = gate.data()[(nn * c + ch) * t + tt];
                for j in 0..v {
                    let i = idx4(&s, nn, ch, tt, j);
                    out[i] = y.data()[i] * (1.0 + g);
                }
            }
        }
    }
    (Tensor::from_vec(&s, out).unwrap(), gate)
}

/// Mean over `(T, V)` then `W · pooled + b`.
pub fn head(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let l = s[2] * s[3];
    let k = w.shape()[0];
    let mut out = vec![0.0; n * k];
    for nn in 0..n {
        let pooled: Vec<f64> = (0..c)
            .map(|ch| {
                x.data()[(nn * c + ch) * l..(nn * c + ch + 1) * l]
                    .iter()
                    .sum::<f64>()
                    / l as f64
            })
            .collect();
        for o in 0..k {
            out[nn * k + o] = b.data()[o]
                + (0..c)
                    .map(|ch| w.data()[o * c + ch] * pooled[ch])
                    .sum::<f64>();
        }
    }
    Tensor::from_vec(&[n, k], out).unwrap()
}

/// Numerically stable `mean_n(logsumexp(z_n) − z_n[label_n])`.
pub fn cross_entropy(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let rows: Vec<&[f64]> = logits.data().chunks(k).collect();
    rows.iter()
        .zip(labels)
        .map(|(r, &l)| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + r.iter().map(|z| (z - m).exp()).sum::<f64>().ln() - r[l]
        })
        .sum::<f64>()
        / labels.len() as f64
}
