//! Minimal trainable numeric stack: dense layers, ReLU MLPs, max-pooling,
//! losses and SGD with momentum. Double precision throughout so analytic
//! gradients can be checked tightly against finite differences.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rayon::prelude::*;

use crate::rng::SeededRng;
use crate::{Error, Result};

/// Minimum batch rows before a forward/backward pass fans out over rayon.
const PAR_ROWS: usize = 256;

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Mat {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c);
            data.extend(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Fully-connected layer with gradient buffers.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// out x in.
    pub w: Mat,
    pub b: Vec<f64>,
    pub gw: Mat,
    pub gb: Vec<f64>,
}

impl DenseLayer {
    /// Glorot-uniform init: +-sqrt(6 / (fan_in + fan_out)).
    pub fn new(input: usize, output: usize, rng: &mut SeededRng) -> DenseLayer {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let mut w = Mat::zeros(output, input);
        for v in &mut w.data {
            *v = (rng.draw_uniform() * 2.0 - 1.0) * bound;
        }
        DenseLayer {
            w,
            b: vec![0.0; output],
            gw: Mat::zeros(output, input),
            gb: vec![0.0; output],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows
    }

    /// y = x W^T + b, batched over rows of x.
    pub fn forward(&self, x: &Mat) -> Mat {
        assert_eq!(x.cols, self.in_dim(), "dense layer input width mismatch");
        let (out_dim, in_dim) = (self.out_dim(), self.in_dim());
        let mut y = Mat::zeros(x.rows, out_dim);
        let run_row = |xr: &[f64], yr: &mut [f64]| {
            yr.copy_from_slice(&self.b);
            for (j, yj) in yr.iter_mut().enumerate() {
                let wrow = &self.w.data[j * in_dim..(j + 1) * in_dim];
                let mut acc = 0.0;
                for k in 0..in_dim {
                    acc += xr[k] * wrow[k];
                }
                *yj += acc;
            }
        };
        if x.rows >= PAR_ROWS {
            y.data
                .par_chunks_mut(out_dim)
                .zip(x.data.par_chunks(in_dim))
                .for_each(|(yr, xr)| run_row(xr, yr));
        } else {
            for (yr, xr) in y.data.chunks_mut(out_dim).zip(x.data.chunks(in_dim)) {
                run_row(xr, yr);
            }
        }
        y
    }

    /// Accumulates gw/gb from (x, dL/dy) and returns dL/dx.
    pub fn backward(&mut self, x: &Mat, grad_out: &Mat) -> Mat {
        assert_eq!(grad_out.cols, self.out_dim());
        assert_eq!(grad_out.rows, x.rows);
        let (out_dim, in_dim) = (self.out_dim(), self.in_dim());
        for r in 0..x.rows {
            let xr = x.row(r);
            let gr = grad_out.row(r);
            for j in 0..out_dim {
                let g = gr[j];
                if g == 0.0 {
                    continue;
                }
                self.gb[j] += g;
                let wrow = &mut self.gw.data[j * in_dim..(j + 1) * in_dim];
                for k in 0..in_dim {
                    wrow[k] += g * xr[k];
                }
            }
        }
        let mut gx = Mat::zeros(x.rows, in_dim);
        let run_row = |gr: &[f64], gxr: &mut [f64]| {
            for j in 0..out_dim {
                let g = gr[j];
                if g == 0.0 {
                    continue;
                }
                let wrow = &self.w.data[j * in_dim..(j + 1) * in_dim];
                for k in 0..in_dim {
                    gxr[k] += g * wrow[k];
                }
            }
        };
        if x.rows >= PAR_ROWS {
            gx.data
                .par_chunks_mut(in_dim)
                .zip(grad_out.data.par_chunks(out_dim))
                .for_each(|(gxr, gr)| run_row(gr, gxr));
        } else {
            for (gxr, gr) in gx.data.chunks_mut(in_dim).zip(grad_out.data.chunks(out_dim)) {
                run_row(gr, gxr);
            }
        }
        gx
    }

    pub fn zero_grads(&mut self) {
        self.gw.data.iter_mut().for_each(|g| *g = 0.0);
        self.gb.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Mutable view of one named parameter tensor and its gradient.
pub struct ParamRef<'a> {
    pub name: String,
    pub values: &'a mut [f64],
    pub grads: &'a mut [f64],
}

/// Stack of dense layers: ReLU after every hidden layer, linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Per-layer activations retained for the backward pass.
pub struct MlpCache {
    /// inputs[i] is the input fed to layer i (post-activation of i-1).
    inputs: Vec<Mat>,
    /// pre[i] is the affine output of layer i.
    pre: Vec<Mat>,
}

fn relu(m: &Mat) -> Mat {
    Mat {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

impl Mlp {
    /// `sizes` = [input, hidden..., output].
    pub fn new(sizes: &[usize], rng: &mut SeededRng) -> Mlp {
        assert!(sizes.len() >= 2);
        let layers = sizes
            .windows(2)
            .map(|w| DenseLayer::new(w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().unwrap().in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&cur);
            cur = if i < last { relu(&pre) } else { pre };
        }
        cur
    }

    pub fn forward_cached(&self, x: &Mat) -> (Mat, MlpCache) {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            cache.inputs.push(cur.clone());
            let pre = layer.forward(&cur);
            cache.pre.push(pre.clone());
            cur = if i < last { relu(&pre) } else { pre };
        }
        (cur, cache)
    }

    /// Accumulates all layer gradients; returns dL/dx.
    pub fn backward(&mut self, cache: &MlpCache, grad_out: &Mat) -> Mat {
        let last = self.layers.len() - 1;
        let mut grad = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                // Undo the ReLU of layer i.
                let pre = &cache.pre[i];
                for (g, &p) in grad.data.iter_mut().zip(&pre.data) {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            grad = self.layers[i].backward(&cache.inputs[i], &grad);
        }
        grad
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            layer.zero_grads();
        }
    }

    pub fn params(&mut self, prefix: &str) -> Vec<ParamRef<'_>> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, layer)| {
                let DenseLayer { w, b, gw, gb } = layer;
                vec![
                    ParamRef {
                        name: format!("{prefix}.{i}.w"),
                        values: &mut w.data,
                        grads: &mut gw.data,
                    },
                    ParamRef {
                        name: format!("{prefix}.{i}.b"),
                        values: b,
                        grads: gb,
                    },
                ]
            })
            .collect()
    }

    /// Named tensors for checkpointing.
    pub fn tensors(&self, prefix: &str) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                vec![
                    (
                        format!("{prefix}.{i}.w"),
                        vec![l.w.rows, l.w.cols],
                        l.w.data.clone(),
                    ),
                    (format!("{prefix}.{i}.b"), vec![l.b.len()], l.b.clone()),
                ]
            })
            .collect()
    }

    pub fn load_tensors(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let w = ckpt.tensor(&format!("{prefix}.{i}.w"))?;
            if w.1 != [l.w.rows, l.w.cols] {
                return Err(Error::Format(format!(
                    "checkpoint tensor {prefix}.{i}.w has shape {:?}, expected {:?}",
                    w.1,
                    [l.w.rows, l.w.cols]
                )));
            }
            l.w.data.copy_from_slice(w.2);
            let b = ckpt.tensor(&format!("{prefix}.{i}.b"))?;
            if b.1 != [l.b.len()] {
                return Err(Error::Format(format!(
                    "checkpoint tensor {prefix}.{i}.b has shape {:?}, expected {:?}",
                    b.1,
                    [l.b.len()]
                )));
            }
            l.b.copy_from_slice(b.2);
        }
        Ok(())
    }
}

/// Channel-wise max over unmasked rows; argmax row per channel for backprop.
pub fn masked_max_pool(features: &Mat, mask: &[bool]) -> Result<(Vec<f64>, Vec<usize>)> {
    assert_eq!(mask.len(), features.rows);
    let mut pooled = vec![f64::NEG_INFINITY; features.cols];
    let mut argmax = vec![usize::MAX; features.cols];
    for r in 0..features.rows {
        if !mask[r] {
            continue;
        }
        let row = features.row(r);
        for c in 0..features.cols {
            if row[c] > pooled[c] {
                pooled[c] = row[c];
                argmax[c] = r;
            }
        }
    }
    if argmax.iter().any(|&a| a == usize::MAX) {
        return Err(Error::Numeric("max pool over an all-masked input".into()));
    }
    Ok((pooled, argmax))
}

/// Scatters a pooled gradient back to the argmax rows.
pub fn max_pool_backward(grad: &[f64], argmax: &[usize], grad_features: &mut Mat) {
    for (c, (&g, &r)) in grad.iter().zip(argmax).enumerate() {
        *grad_features.at_mut(r, c) += g;
    }
}

/// Component-wise Huber penalty summed over the residual vector; returns
/// (value, d/d residual).
pub fn huber(residual: &[f64], delta: f64) -> (f64, Vec<f64>) {
    assert!(delta > 0.0);
    let mut value = 0.0;
    let grad = residual
        .iter()
        .map(|&e| {
            if e.abs() <= delta {
                value += 0.5 * e * e;
                e
            } else {
                value += delta * (e.abs() - 0.5 * delta);
                delta * e.signum()
            }
        })
        .collect();
    (value, grad)
}

/// Numerically stabilized -log softmax(target); returns (loss, d/d logits).
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    assert!(logits.len() >= 2);
    assert!(target < logits.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[target] - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| e / sum - if i == target { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Classical momentum SGD. Velocity buffers are keyed by parameter name.
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> SgdMomentum {
        assert!(lr > 0.0);
        SgdMomentum {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// v = momentum * v - lr * g; p += v. Rejects non-finite gradients,
    /// naming the parameter.
    pub fn step(&mut self, params: &mut [ParamRef<'_>]) -> Result<()> {
        for p in params.iter() {
            if p.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter '{}'",
                    p.name
                )));
            }
        }
        for p in params.iter_mut() {
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.values.len()]);
            for ((value, &grad), vel) in p.values.iter_mut().zip(p.grads.iter()).zip(v.iter_mut())
            {
                *vel = self.momentum * *vel - self.lr * grad;
                *value += *vel;
            }
        }
        Ok(())
    }
}

/// Self-describing binary checkpoint: per tensor name, shape, f64 LE data.
#[derive(Debug, Default, Clone)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

const CKPT_MAGIC: &[u8; 8] = b"TNCKPT01";

impl Checkpoint {
    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name.to_string(), shape, data));
    }

    pub fn tensor(&self, name: &str) -> Result<(&str, &[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(n, s, d)| (n.as_str(), s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Format(format!("checkpoint tensor '{name}' missing")))
    }

    /// Convenience for scalar metadata stored as a 1-element tensor.
    pub fn scalar(&self, name: &str) -> Result<f64> {
        let (_, _, d) = self.tensor(name)?;
        Ok(d[0])
    }

    pub fn push_scalar(&mut self, name: &str, value: f64) {
        self.push(name, vec![1], vec![value]);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CKPT_MAGIC);
        bytes.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.tensors {
            let nb = name.as_bytes();
            bytes.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            bytes.extend_from_slice(nb);
            bytes.push(shape.len() as u8);
            for &d in shape {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let fail = |what: &str| Error::Format(format!("{}: {what}", path.display()));
        if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
            return Err(fail("not a checkpoint file"));
        }
        let mut off = 8;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(fail("truncated checkpoint"));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        let mut ckpt = Checkpoint::default();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
                .map_err(|_| fail("bad tensor name"))?;
            let ndim = take(&mut off, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize);
            }
            let len: usize = shape.iter().product();
            let raw = take(&mut off, len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ckpt.tensors.push((name, shape, data));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    /// Central finite difference of `f` w.r.t. a single scalar slot.
    fn fd(mut f: impl FnMut(f64) -> f64, x0: f64) -> f64 {
        let h = 1e-5;
        (f(x0 + h) - f(x0 - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = seeded_rng(1);
        let mut mlp = Mlp::new(&[3, 4, 2], &mut rng);
        for l in &mut mlp.layers {
            l.w.data.iter_mut().for_each(|v| *v = 0.0);
            l.b.iter_mut().for_each(|v| *v = 0.0);
        }
        let y = mlp.forward(&Mat::from_rows(vec![vec![1.0, -2.0, 3.0]]));
        assert_eq!(y.data, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layers_pass_positive_input_through() {
        let mut rng = seeded_rng(1);
        let mut mlp = Mlp::new(&[3, 3, 3], &mut rng);
        for l in &mut mlp.layers {
            l.w.data.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..3 {
                *l.w.at_mut(i, i) = 1.0;
            }
            l.b.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = vec![0.5, 1.5, 2.0];
        let y = mlp.forward(&Mat::from_rows(vec![x.clone()]));
        assert_eq!(y.data, x);
    }

    /// Independent straight-line recomputation of a 3-layer forward pass.
    fn reference_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for (li, layer) in mlp.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.out_dim()];
            for (j, nj) in next.iter_mut().enumerate() {
                let mut acc = layer.b[j];
                for (k, &xk) in cur.iter().enumerate() {
                    acc += layer.w.at(j, k) * xk;
                }
                *nj = if li + 1 < mlp.layers.len() && acc < 0.0 {
                    0.0
                } else {
                    acc
                };
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn random_mlp_matches_reference_forward() {
        let mut rng = seeded_rng(9);
        let mlp = Mlp::new(&[5, 7, 6, 3], &mut rng);
        for case in 0..20 {
            let x: Vec<f64> = (0..5)
                .map(|i| ((case * 5 + i) as f64 * 0.37).sin() * 2.0)
                .collect();
            let got = mlp.forward(&Mat::from_rows(vec![x.clone()]));
            let want = reference_forward(&mlp, &x);
            for (g, w) in got.data.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_pool_examples() {
        let m = Mat::from_rows(vec![vec![1.0, 5.0], vec![3.0, 2.0]]);
        let (pooled, argmax) = masked_max_pool(&m, &[true, true]).unwrap();
        assert_eq!(pooled, vec![3.0, 5.0]);
        assert_eq!(argmax, vec![1, 0]);

        let single = Mat::from_rows(vec![vec![-1.0, 4.0]]);
        let (pooled, _) = masked_max_pool(&single, &[true]).unwrap();
        assert_eq!(pooled, vec![-1.0, 4.0]);

        assert!(masked_max_pool(&m, &[false, false]).is_err());
    }

    #[test]
    fn max_pool_gradient_routes_to_argmax() {
        // Loss = sum of pooled channels; FD over each input element.
        let base = Mat::from_rows(vec![vec![1.0, 5.0], vec![3.0, 2.0]]);
        let loss = |m: &Mat| {
            let (pooled, _) = masked_max_pool(m, &[true, true]).unwrap();
            pooled.iter().sum::<f64>()
        };
        let (_, argmax) = masked_max_pool(&base, &[true, true]).unwrap();
        let mut grad = Mat::zeros(2, 2);
        max_pool_backward(&[1.0, 1.0], &argmax, &mut grad);
        for r in 0..2 {
            for c in 0..2 {
                let mut m = base.clone();
                let numeric = fd(
                    |v| {
                        *m.at_mut(r, c) = v;
                        loss(&m)
                    },
                    base.at(r, c),
                );
                assert!(
                    (numeric - grad.at(r, c)).abs() < 1e-6,
                    "({r},{c}): fd {numeric} vs {}",
                    grad.at(r, c)
                );
            }
        }
    }

    #[test]
    fn huber_closed_forms() {
        assert_eq!(huber(&[0.0], 1.0).0, 0.0);
        assert!((huber(&[0.5], 1.0).0 - 0.125).abs() < 1e-15);
        assert!((huber(&[2.0], 1.0).0 - 1.5).abs() < 1e-15);
        // Summed over components.
        assert!((huber(&[0.5, 2.0], 1.0).0 - 1.625).abs() < 1e-15);
        // Gradient: e inside, delta*sign outside.
        assert_eq!(huber(&[0.5], 1.0).1, vec![0.5]);
        assert_eq!(huber(&[-2.0], 1.0).1, vec![-1.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, _) = softmax_cross_entropy(&[0.3, 0.3, 0.3, 0.3], 2);
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        let (loss, _) = softmax_cross_entropy(&[100.0, 0.0], 0);
        assert!(loss < 1e-12);
        // Stays finite on extreme logits.
        let (loss, grad) = softmax_cross_entropy(&[1e4, -1e4], 1);
        assert!(loss.is_finite() && grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn cross_entropy_gradient_matches_fd() {
        let logits = vec![0.2, -1.3, 0.7, 2.0];
        let (_, grad) = softmax_cross_entropy(&logits, 1);
        for i in 0..logits.len() {
            let mut l = logits.clone();
            let numeric = fd(
                |v| {
                    l[i] = v;
                    softmax_cross_entropy(&l, 1).0
                },
                logits[i],
            );
            assert!(rel_err(numeric, grad[i]) < 1e-4, "slot {i}");
        }
    }

    #[test]
    fn dense_layer_gradients_match_fd() {
        let mut rng = seeded_rng(17);
        for (inp, out, batch) in [(3usize, 2usize, 1usize), (4, 5, 3), (2, 2, 7)] {
            let mut layer = DenseLayer::new(inp, out, &mut rng);
            let x = Mat::from_rows(
                (0..batch)
                    .map(|_| (0..inp).map(|_| rng.draw_uniform() * 2.0 - 1.0).collect())
                    .collect(),
            );
            // Loss = 0.5 * sum(y^2) so dL/dy = y.
            let y = layer.forward(&x);
            layer.zero_grads();
            let gx = layer.backward(&x, &y);
            let loss = |layer: &DenseLayer, x: &Mat| -> f64 {
                let y = layer.forward(x);
                0.5 * y.data.iter().map(|v| v * v).sum::<f64>()
            };
            for idx in 0..layer.w.data.len() {
                let orig = layer.w.data[idx];
                let mut probe = layer.clone();
                let numeric = fd(
                    |v| {
                        probe.w.data[idx] = v;
                        loss(&probe, &x)
                    },
                    orig,
                );
                assert!(rel_err(numeric, layer.gw.data[idx]) < 1e-4);
            }
            for idx in 0..layer.b.len() {
                let orig = layer.b[idx];
                let mut probe = layer.clone();
                let numeric = fd(
                    |v| {
                        probe.b[idx] = v;
                        loss(&probe, &x)
                    },
                    orig,
                );
                assert!(rel_err(numeric, layer.gb[idx]) < 1e-4);
            }
            for idx in 0..x.data.len() {
                let orig = x.data[idx];
                let mut probe = x.clone();
                let numeric = fd(
                    |v| {
                        probe.data[idx] = v;
                        loss(&layer, &probe)
                    },
                    orig,
                );
                assert!(rel_err(numeric, gx.data[idx]) < 1e-4);
            }
        }
    }

    #[test]
    fn sgd_definitions() {
        let mut opt = SgdMomentum::new(0.1, 0.0);
        let mut p = vec![0.0];
        let mut g = vec![1.0];
        opt.step(&mut [ParamRef {
            name: "p".into(),
            values: &mut p,
            grads: &mut g,
        }])
        .unwrap();
        assert!((p[0] + 0.1).abs() < 1e-15);

        // Zero gradient leaves parameters unchanged.
        let mut p = vec![0.7];
        let mut g = vec![0.0];
        let mut opt = SgdMomentum::new(0.1, 0.9);
        opt.step(&mut [ParamRef {
            name: "p".into(),
            values: &mut p,
            grads: &mut g,
        }])
        .unwrap();
        assert_eq!(p[0], 0.7);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut opt = SgdMomentum::new(0.1, 0.0);
        let mut p = vec![0.0];
        let mut g = vec![f64::NAN];
        let err = opt
            .step(&mut [ParamRef {
                name: "encoder.0.w".into(),
                values: &mut p,
                grads: &mut g,
            }])
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("encoder.0.w")));
    }

    #[test]
    fn sgd_descends_a_convex_quadratic_monotonically() {
        // f(p) = sum (p_i - a_i)^2
        let target = [1.0, -2.0, 0.5];
        let mut p = vec![5.0, 5.0, 5.0];
        let mut opt = SgdMomentum::new(0.05, 0.0);
        let f = |p: &[f64]| -> f64 {
            p.iter()
                .zip(&target)
                .map(|(x, a)| (x - a) * (x - a))
                .sum()
        };
        let mut prev = f(&p);
        for _ in 0..100 {
            let mut g: Vec<f64> = p.iter().zip(&target).map(|(x, a)| 2.0 * (x - a)).collect();
            opt.step(&mut [ParamRef {
                name: "p".into(),
                values: &mut p,
                grads: &mut g,
            }])
            .unwrap();
            let cur = f(&p);
            assert!(cur <= prev + 1e-12);
            prev = cur;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seeded_rng(4);
        let mlp = Mlp::new(&[3, 5, 2], &mut rng);
        let mut ckpt = Checkpoint::default();
        for (n, s, d) in mlp.tensors("enc") {
            ckpt.push(&n, s, d);
        }
        ckpt.push_scalar("meta.iteration", 123.0);
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.scalar("meta.iteration").unwrap(), 123.0);
        let mut fresh = Mlp::new(&[3, 5, 2], &mut seeded_rng(5));
        fresh.load_tensors("enc", &loaded).unwrap();
        for (a, b) in mlp.layers.iter().zip(&fresh.layers) {
            assert_eq!(a.w.data, b.w.data);
            assert_eq!(a.b, b.b);
        }
    }

    #[test]
    fn forward_is_deterministic_across_large_batches() {
        // Large enough to hit the rayon path; results must match serial rows.
        let mut rng = seeded_rng(21);
        let mlp = Mlp::new(&[4, 8, 3], &mut rng);
        let big = Mat::from_rows(
            (0..600)
                .map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 0.01).sin()).collect())
                .collect(),
        );
        let out = mlp.forward(&big);
        for r in (0..big.rows).step_by(97) {
            let single = mlp.forward(&Mat::from_rows(vec![big.row(r).to_vec()]));
            assert_eq!(single.data, out.row(r).to_vec());
        }
    }
}
