//! Dense D2RL networks: every hidden layer sees the previous activations
//! concatenated with the raw input. Hidden layers are linear, batch
//! normalised, rectified and then dropped out; the output layer is linear.
//!
//! Parameters live in one flat vector so that optimisers, Polyak averaging
//! and serialisation can treat a network as a single tensor. Matrices are
//! row-major with the batch along rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub output_dim: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl NetSpec {
    pub fn new(input_dim: usize, hidden_layers: usize, hidden_width: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_layers,
            hidden_width,
            output_dim,
            dropout: 0.5,
            batch_norm: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn layer_input(&self, k: usize) -> usize {
        if k == 0 {
            self.input_dim
        } else {
            self.hidden_width + self.input_dim
        }
    }

    /// Named parameter blocks in storage order.
    pub fn blocks(&self) -> Vec<Block> {
        let w = self.hidden_width;
        let mut out = Vec::new();
        let mut off = 0;
        let mut push = |name: String, len: usize| {
            out.push(Block { name, offset: off, len });
            off += len;
        };
        for k in 0..self.hidden_layers {
            push(format!("hidden{k}.weight"), w * self.layer_input(k));
            if self.batch_norm {
                push(format!("hidden{k}.norm_scale"), w);
                push(format!("hidden{k}.norm_shift"), w);
            } else {
                push(format!("hidden{k}.bias"), w);
            }
        }
        let last = if self.hidden_layers == 0 { self.input_dim } else { w };
        push("output.weight".into(), self.output_dim * last);
        push("output.bias".into(), self.output_dim);
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len).sum()
    }

    fn output_input(&self) -> usize {
        if self.hidden_layers == 0 {
            self.input_dim
        } else {
            self.hidden_width
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// `C = alpha * A B + beta * C` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(a.len() > last(m, k, rsa, csa) && b.len() > last(k, n, rsb, csb));
    }
    assert!(c.len() > last(m, n, rsc, csc));
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalisation, dropout when masks are given.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

/// Everything a backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct Pass {
    pub batch: usize,
    pub mode: Mode,
    x0: Vec<f64>,
    /// Hidden activations after normalisation and before rectification.
    pre: Vec<Vec<f64>>,
    /// Normalised pre-activations.
    xhat: Vec<Vec<f64>>,
    inv_std: Vec<Vec<f64>>,
    batch_mean: Vec<Vec<f64>>,
    batch_var: Vec<Vec<f64>>,
    /// Layer outputs after rectification and dropout.
    h: Vec<Vec<f64>>,
    masks: Option<Vec<Vec<f64>>>,
    pub out: Vec<f64>,
}

/// Dropout masks (0 or 1/(1-p)) for every hidden layer of one batch.
pub type Masks = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub spec: NetSpec,
    pub params: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl Net {
    pub fn zeros(spec: NetSpec) -> Self {
        let stats = spec.hidden_layers * spec.hidden_width;
        let mut net = Self {
            params: vec![0.0; spec.param_count()],
            running_mean: vec![0.0; stats],
            running_var: vec![1.0; stats],
            spec,
        };
        net.reset_norm_scale();
        net
    }

    fn reset_norm_scale(&mut self) {
        for b in self.spec.blocks() {
            if b.name.ends_with("norm_scale") {
                self.params[b.offset..b.offset + b.len].fill(1.0);
            }
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights and biases; unit normalisation scale.
    pub fn init<R: Rng>(spec: NetSpec, rng: &mut R) -> Self {
        let mut net = Self::zeros(spec);
        let blocks = net.spec.blocks();
        for b in &blocks {
            let fan_in = if b.name.starts_with("output") {
                net.spec.output_input()
            } else {
                let k: usize = b.name["hidden".len()..].split('.').next().unwrap().parse().unwrap();
                net.spec.layer_input(k)
            };
            if b.name.ends_with("weight") || b.name.ends_with("bias") {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for p in &mut net.params[b.offset..b.offset + b.len] {
                    *p = rng.gen_range(-bound..bound);
                }
            }
        }
        net
    }

    pub fn block(&self, name: &str) -> Option<Block> {
        self.spec.blocks().into_iter().find(|b| b.name == name)
    }

    pub fn sample_masks<R: Rng>(&self, rng: &mut R, batch: usize) -> Option<Masks> {
        let p = self.spec.dropout;
        if p <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - p);
        let n = batch * self.spec.hidden_width;
        Some(
            (0..self.spec.hidden_layers)
                .map(|_| (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect())
                .collect(),
        )
    }

    pub fn forward(&self, x: &[f64], batch: usize, mode: Mode, masks: Option<&Masks>) -> Pass {
        let spec = &self.spec;
        let (d, w) = (spec.input_dim, spec.hidden_width);
        assert_eq!(x.len(), batch * d, "input size");
        let blocks = spec.blocks();
        let mut bi = 0;
        let mut next_block = || {
            let b = blocks[bi].clone();
            bi += 1;
            b
        };
        let layers = spec.hidden_layers;
        let mut pass = Pass {
            batch,
            mode,
            x0: x.to_vec(),
            pre: Vec::with_capacity(layers),
            xhat: Vec::with_capacity(layers),
            inv_std: Vec::with_capacity(layers),
            batch_mean: Vec::with_capacity(layers),
            batch_var: Vec::with_capacity(layers),
            h: Vec::with_capacity(layers),
            masks: if mode == Mode::Train { masks.cloned() } else { None },
            out: Vec::new(),
        };
        for k in 0..layers {
            let wb = next_block();
            let in_k = spec.layer_input(k);
            let weights = &self.params[wb.offset..wb.offset + wb.len];
            let mut z = vec![0.0; batch * w];
            if k == 0 {
                gemm(batch, d, w, 1.0, x, (d, 1), weights, (1, in_k), 0.0, &mut z, (w, 1));
            } else {
                let prev = &pass.h[k - 1];
                gemm(batch, w, w, 1.0, prev, (w, 1), weights, (1, in_k), 0.0, &mut z, (w, 1));
                gemm(batch, d, w, 1.0, x, (d, 1), &weights[w..], (1, in_k), 1.0, &mut z, (w, 1));
            }
            let mut inv_std = vec![0.0; w];
            let mut mean = vec![0.0; w];
            let mut var = vec![0.0; w];
            let mut xhat = z.clone();
            let mut pre = z;
            if spec.batch_norm {
                let scale_b = next_block();
                let shift_b = next_block();
                let scale = &self.params[scale_b.offset..scale_b.offset + w];
                let shift = &self.params[shift_b.offset..shift_b.offset + w];
                match mode {
                    Mode::Train => {
                        for r in 0..batch {
                            for j in 0..w {
                                mean[j] += pre[r * w + j];
                            }
                        }
                        mean.iter_mut().for_each(|m| *m /= batch as f64);
                        for r in 0..batch {
                            for j in 0..w {
                                let c = pre[r * w + j] - mean[j];
                                var[j] += c * c;
                            }
                        }
                        var.iter_mut().for_each(|v| *v /= batch as f64);
                        for j in 0..w {
                            inv_std[j] = 1.0 / (var[j] + spec.bn_eps).sqrt();
                        }
                    }
                    Mode::Eval => {
                        let rm = &self.running_mean[k * w..(k + 1) * w];
                        let rv = &self.running_var[k * w..(k + 1) * w];
                        mean.copy_from_slice(rm);
                        for j in 0..w {
                            inv_std[j] = 1.0 / (rv[j] + spec.bn_eps).sqrt();
                        }
                    }
                }
                for r in 0..batch {
                    for j in 0..w {
                        let i = r * w + j;
                        let xh = (pre[i] - mean[j]) * inv_std[j];
                        xhat[i] = xh;
                        pre[i] = scale[j] * xh + shift[j];
                    }
                }
            } else {
                let bias_b = next_block();
                let bias = &self.params[bias_b.offset..bias_b.offset + w];
                for r in 0..batch {
                    for j in 0..w {
                        pre[r * w + j] += bias[j];
                    }
                }
            }
            let mut h: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            if let Some(m) = &pass.masks {
                for (v, s) in h.iter_mut().zip(&m[k]) {
                    *v *= s;
                }
            }
            pass.pre.push(pre);
            pass.xhat.push(xhat);
            pass.inv_std.push(inv_std);
            pass.batch_mean.push(mean);
            pass.batch_var.push(var);
            pass.h.push(h);
        }
        let ow = next_block();
        let ob = next_block();
        let o = spec.output_dim;
        let last_in = spec.output_input();
        let src: &[f64] = if layers == 0 { x } else { &pass.h[layers - 1] };
        let mut out = vec![0.0; batch * o];
        for r in 0..batch {
            out[r * o..(r + 1) * o].copy_from_slice(&self.params[ob.offset..ob.offset + o]);
        }
        gemm(
            batch,
            last_in,
            o,
            1.0,
            src,
            (last_in, 1),
            &self.params[ow.offset..ow.offset + ow.len],
            (1, last_in),
            1.0,
            &mut out,
            (o, 1),
        );
        pass.out = out;
        pass
    }

    /// Backpropagate `d_out` (batch x output). Parameter gradients are
    /// accumulated into `grad` and input gradients into `d_input` when given.
    pub fn backward(&self, pass: &Pass, d_out: &[f64], grad: Option<&mut [f64]>, d_input: Option<&mut [f64]>) {
        let spec = &self.spec;
        let (d, w, o, batch) = (spec.input_dim, spec.hidden_width, spec.output_dim, pass.batch);
        assert_eq!(d_out.len(), batch * o);
        let layers = spec.hidden_layers;
        let blocks = spec.blocks();
        let mut scratch;
        let grad: &mut [f64] = match grad {
            Some(g) => {
                assert_eq!(g.len(), self.params.len());
                g
            }
            None => {
                scratch = vec![0.0; self.params.len()];
                &mut scratch
            }
        };
        let mut dx_local;
        let d_x0: &mut [f64] = match d_input {
            Some(g) => {
                assert_eq!(g.len(), batch * d);
                g
            }
            None => {
                dx_local = vec![0.0; batch * d];
                &mut dx_local
            }
        };

        let ob = &blocks[blocks.len() - 1];
        let ow = &blocks[blocks.len() - 2];
        let last_in = spec.output_input();
        let src: &[f64] = if layers == 0 { &pass.x0 } else { &pass.h[layers - 1] };
        for r in 0..batch {
            for j in 0..o {
                grad[ob.offset + j] += d_out[r * o + j];
            }
        }
        // dW_out = d_out^T src
        gemm(
            o,
            batch,
            last_in,
            1.0,
            d_out,
            (1, o),
            src,
            (last_in, 1),
            1.0,
            &mut grad[ow.offset..ow.offset + ow.len],
            (last_in, 1),
        );
        let out_w = &self.params[ow.offset..ow.offset + ow.len];
        if layers == 0 {
            gemm(batch, o, d, 1.0, d_out, (o, 1), out_w, (last_in, 1), 1.0, d_x0, (d, 1));
            return;
        }
        let mut dh = vec![0.0; batch * w];
        gemm(batch, o, w, 1.0, d_out, (o, 1), out_w, (w, 1), 0.0, &mut dh, (w, 1));

        let per_layer = if spec.batch_norm { 3 } else { 2 };
        for k in (0..layers).rev() {
            let wb = &blocks[k * per_layer];
            // Through dropout and rectifier.
            let mut da = dh;
            if let Some(m) = &pass.masks {
                for (v, s) in da.iter_mut().zip(&m[k]) {
                    *v *= s;
                }
            }
            for (v, p) in da.iter_mut().zip(&pass.pre[k]) {
                if *p <= 0.0 {
                    *v = 0.0;
                }
            }
            // Through normalisation (or bias).
            let mut dz = vec![0.0; batch * w];
            if spec.batch_norm {
                let scale_b = &blocks[k * per_layer + 1];
                let shift_b = &blocks[k * per_layer + 2];
                let xhat = &pass.xhat[k];
                let inv_std = &pass.inv_std[k];
                let mut sum_d = vec![0.0; w];
                let mut sum_dx = vec![0.0; w];
                for r in 0..batch {
                    for j in 0..w {
                        let i = r * w + j;
                        grad[scale_b.offset + j] += da[i] * xhat[i];
                        grad[shift_b.offset + j] += da[i];
                        let dxh = da[i] * self.params[scale_b.offset + j];
                        sum_d[j] += dxh;
                        sum_dx[j] += dxh * xhat[i];
                        dz[i] = dxh;
                    }
                }
                match pass.mode {
                    Mode::Train => {
                        let n = batch as f64;
                        for r in 0..batch {
                            for j in 0..w {
                                let i = r * w + j;
                                dz[i] = inv_std[j] / n * (n * dz[i] - sum_d[j] - xhat[i] * sum_dx[j]);
                            }
                        }
                    }
                    Mode::Eval => {
                        for r in 0..batch {
                            for j in 0..w {
                                dz[r * w + j] *= inv_std[j];
                            }
                        }
                    }
                }
            } else {
                let bias_b = &blocks[k * per_layer + 1];
                for r in 0..batch {
                    for j in 0..w {
                        grad[bias_b.offset + j] += da[r * w + j];
                    }
                }
                dz = da;
            }
            // Through the linear map.
            let in_k = spec.layer_input(k);
            let weights = &self.params[wb.offset..wb.offset + wb.len];
            let gw = &mut grad[wb.offset..wb.offset + wb.len];
            if k == 0 {
                gemm(w, batch, d, 1.0, &dz, (1, w), &pass.x0, (d, 1), 1.0, gw, (in_k, 1));
                gemm(batch, w, d, 1.0, &dz, (w, 1), weights, (in_k, 1), 1.0, d_x0, (d, 1));
                dh = Vec::new();
            } else {
                let prev = &pass.h[k - 1];
                gemm(w, batch, w, 1.0, &dz, (1, w), prev, (w, 1), 1.0, gw, (in_k, 1));
                gemm(w, batch, d, 1.0, &dz, (1, w), &pass.x0, (d, 1), 1.0, &mut gw[w..], (in_k, 1));
                gemm(batch, w, d, 1.0, &dz, (w, 1), &weights[w..], (in_k, 1), 1.0, d_x0, (d, 1));
                let mut next = vec![0.0; batch * w];
                gemm(batch, w, w, 1.0, &dz, (w, 1), weights, (in_k, 1), 0.0, &mut next, (w, 1));
                dh = next;
            }
        }
    }

    /// Fold the batch statistics of a training pass into the running ones.
    pub fn update_running_stats(&mut self, pass: &Pass) {
        if !self.spec.batch_norm || pass.mode != Mode::Train {
            return;
        }
        let w = self.spec.hidden_width;
        let m = self.spec.bn_momentum;
        let n = pass.batch as f64;
        let unbias = if pass.batch > 1 { n / (n - 1.0) } else { 1.0 };
        for k in 0..self.spec.hidden_layers {
            for j in 0..w {
                let i = k * w + j;
                self.running_mean[i] = (1.0 - m) * self.running_mean[i] + m * pass.batch_mean[k][j];
                self.running_var[i] = (1.0 - m) * self.running_var[i] + m * pass.batch_var[k][j] * unbias;
            }
        }
    }

    /// `self <- tau * source + (1 - tau) * self` for parameters and running statistics.
    pub fn polyak_from(&mut self, source: &Net, tau: f64) {
        let mix = |t: &mut [f64], s: &[f64]| {
            for (a, b) in t.iter_mut().zip(s) {
                *a = tau * b + (1.0 - tau) * *a;
            }
        };
        mix(&mut self.params, &source.params);
        mix(&mut self.running_mean, &source.running_mean);
        mix(&mut self.running_var, &source.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(bn: bool) -> NetSpec {
        let mut s = NetSpec::new(5, 3, 7, 2);
        s.batch_norm = bn;
        s
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Scalar loss `sum(c * out)` for fixed random weights `c`.
    fn loss(net: &Net, x: &[f64], batch: usize, mode: Mode, masks: Option<&Masks>, c: &[f64]) -> f64 {
        net.forward(x, batch, mode, masks).out.iter().zip(c).map(|(a, b)| a * b).sum()
    }

    fn check_gradients(bn: bool, mode: Mode, dropout: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = Net::init(spec(bn), &mut rng);
        for v in net.running_mean.iter_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
        for v in net.running_var.iter_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        let batch = 6;
        let x = random_input(&mut rng, batch * 5);
        let c = random_input(&mut rng, batch * 2);
        let masks = if dropout { net.sample_masks(&mut rng, batch) } else { None };
        let pass = net.forward(&x, batch, mode, masks.as_ref());
        let mut grad = vec![0.0; net.params.len()];
        let mut dx = vec![0.0; x.len()];
        net.backward(&pass, &c, Some(&mut grad), Some(&mut dx));
        let h = 1e-5;
        for i in 0..net.params.len() {
            let mut p = net.clone();
            p.params[i] += h;
            let up = loss(&p, &x, batch, mode, masks.as_ref(), &c);
            p.params[i] -= 2.0 * h;
            let down = loss(&p, &x, batch, mode, masks.as_ref(), &c);
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: fd {fd} analytic {}", grad[i]);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let up = loss(&net, &xp, batch, mode, masks.as_ref(), &c);
            xp[i] -= 2.0 * h;
            let down = loss(&net, &xp, batch, mode, masks.as_ref(), &c);
            let fd = (up - down) / (2.0 * h);
            let err = (fd - dx[i]).abs() / fd.abs().max(dx[i].abs()).max(1e-6);
            assert!(err < 1e-4, "input {i}: fd {fd} analytic {}", dx[i]);
        }
    }

    #[test]
    fn gradients_eval_mode() {
        check_gradients(true, Mode::Eval, false);
    }

    #[test]
    fn gradients_batch_statistics_with_fixed_dropout() {
        check_gradients(true, Mode::Train, true);
    }

    #[test]
    fn gradients_without_normalisation() {
        check_gradients(false, Mode::Train, true);
    }

    #[test]
    fn block_layout() {
        let s = NetSpec::new(78, 4, 16, 6);
        let blocks = s.blocks();
        assert_eq!(blocks[0].len, 16 * 78);
        assert_eq!(blocks[3].len, 16 * (16 + 78));
        assert_eq!(blocks.last().unwrap().name, "output.bias");
        let mut off = 0;
        for b in &blocks {
            assert_eq!(b.offset, off);
            off += b.len;
        }
        assert_eq!(off, s.param_count());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Net::zeros(NetSpec::new(4, 2, 8, 3));
        let x = vec![0.3; 5 * 4];
        for mode in [Mode::Train, Mode::Eval] {
            assert!(net.forward(&x, 5, mode, None).out.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn eval_rows_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Net::init(NetSpec::new(4, 2, 8, 3), &mut rng);
        let x = random_input(&mut rng, 3 * 4);
        let all = net.forward(&x, 3, Mode::Eval, None).out;
        let one = net.forward(&x[4..8], 1, Mode::Eval, None).out;
        assert_eq!(&all[3..6], &one[..]);
    }

    #[test]
    fn dropout_masks_scale_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Net::init(NetSpec::new(4, 2, 64, 1), &mut rng);
        let masks = net.sample_masks(&mut rng, 50).unwrap();
        let kept = masks[0].iter().filter(|v| **v > 0.0).count() as f64 / masks[0].len() as f64;
        assert!((kept - 0.5).abs() < 0.05);
        assert!(masks[0].iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn polyak_is_exact_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Net::init(NetSpec::new(3, 1, 4, 1), &mut rng);
        let mut b = Net::init(NetSpec::new(3, 1, 4, 1), &mut rng);
        let old = b.clone();
        b.polyak_from(&a, 0.005);
        for i in 0..a.params.len() {
            assert_eq!(b.params[i], 0.005 * a.params[i] + 0.995 * old.params[i]);
        }
    }

    #[test]
    fn running_stats_track_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Net::init(NetSpec::new(3, 1, 4, 1), &mut rng);
        net.spec.bn_momentum = 1.0;
        let x = random_input(&mut rng, 10 * 3);
        let pass = net.forward(&x, 10, Mode::Train, None);
        net.update_running_stats(&pass);
        // With full momentum, eval reproduces the train pass up to the
        // unbiased variance correction.
        for v in net.running_var.iter_mut() {
            *v *= 0.9;
        }
        let eval = net.forward(&x, 10, Mode::Eval, None);
        for (a, b) in eval.out.iter().zip(&pass.out) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
