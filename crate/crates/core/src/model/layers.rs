//! Dense f64 kernels with analytic backward passes.
//!
//! Feature maps are channel-major (`[c][y][x]`). All convolutions use a 3x3
//! kernel with stride 2 and padding 1; the transposed variant adds output
//! padding 1 so that it exactly doubles the spatial size.

/// 3x3 stride-2 convolution, weights `[out][in][3][3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub in_c: usize,
    pub out_c: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// 3x3 stride-2 transposed convolution, weights `[in][out][3][3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose {
    pub in_c: usize,
    pub out_c: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Fully connected layer, weights `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[inline]
fn tap(o: usize, k: usize, size: usize) -> Option<usize> {
    let i = (2 * o + k) as isize - 1;
    (i >= 0 && (i as usize) < size).then_some(i as usize)
}

impl Conv {
    pub fn zeros(in_c: usize, out_c: usize) -> Self {
        Self {
            in_c,
            out_c,
            weight: vec![0.0; out_c * in_c * 9],
            bias: vec![0.0; out_c],
        }
    }

    /// `input` is `in_c x size x size`; output is `out_c x size/2 x size/2`.
    pub fn forward(&self, input: &[f64], size: usize) -> Vec<f64> {
        let os = size / 2;
        let mut out = vec![0.0; self.out_c * os * os];
        for oc in 0..self.out_c {
            let plane = &mut out[oc * os * os..(oc + 1) * os * os];
            plane.fill(self.bias[oc]);
            for ic in 0..self.in_c {
                let src = &input[ic * size * size..(ic + 1) * size * size];
                let w = &self.weight[(oc * self.in_c + ic) * 9..(oc * self.in_c + ic + 1) * 9];
                for oy in 0..os {
                    for ky in 0..3 {
                        let Some(iy) = tap(oy, ky, size) else { continue };
                        let row = &src[iy * size..(iy + 1) * size];
                        let orow = &mut plane[oy * os..(oy + 1) * os];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            for kx in 0..3 {
                                if let Some(ix) = tap(ox, kx, size) {
                                    *o += w[ky * 3 + kx] * row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grad` and returns the input gradient.
    pub fn backward(&self, input: &[f64], size: usize, grad_out: &[f64], grad: &mut Conv) -> Vec<f64> {
        let os = size / 2;
        let mut grad_in = vec![0.0; self.in_c * size * size];
        for oc in 0..self.out_c {
            let g = &grad_out[oc * os * os..(oc + 1) * os * os];
            grad.bias[oc] += g.iter().sum::<f64>();
            for ic in 0..self.in_c {
                let src = &input[ic * size * size..(ic + 1) * size * size];
                let gin = &mut grad_in[ic * size * size..(ic + 1) * size * size];
                let base = (oc * self.in_c + ic) * 9;
                let w = &self.weight[base..base + 9];
                let gw = &mut grad.weight[base..base + 9];
                for oy in 0..os {
                    for ky in 0..3 {
                        let Some(iy) = tap(oy, ky, size) else { continue };
                        for ox in 0..os {
                            let go = g[oy * os + ox];
                            if go == 0.0 {
                                continue;
                            }
                            for kx in 0..3 {
                                if let Some(ix) = tap(ox, kx, size) {
                                    gw[ky * 3 + kx] += go * src[iy * size + ix];
                                    gin[iy * size + ix] += go * w[ky * 3 + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

impl ConvTranspose {
    pub fn zeros(in_c: usize, out_c: usize) -> Self {
        Self {
            in_c,
            out_c,
            weight: vec![0.0; in_c * out_c * 9],
            bias: vec![0.0; out_c],
        }
    }

    /// `input` is `in_c x size x size`; output is `out_c x 2size x 2size`.
    pub fn forward(&self, input: &[f64], size: usize) -> Vec<f64> {
        let os = size * 2;
        let mut out = vec![0.0; self.out_c * os * os];
        for oc in 0..self.out_c {
            out[oc * os * os..(oc + 1) * os * os].fill(self.bias[oc]);
        }
        for ic in 0..self.in_c {
            let src = &input[ic * size * size..(ic + 1) * size * size];
            for oc in 0..self.out_c {
                let base = (ic * self.out_c + oc) * 9;
                let w = &self.weight[base..base + 9];
                let plane = &mut out[oc * os * os..(oc + 1) * os * os];
                for iy in 0..size {
                    for ky in 0..3 {
                        let Some(oy) = tap(iy, ky, os) else { continue };
                        for ix in 0..size {
                            let v = src[iy * size + ix];
                            for kx in 0..3 {
                                if let Some(ox) = tap(ix, kx, os) {
                                    plane[oy * os + ox] += w[ky * 3 + kx] * v;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(
        &self,
        input: &[f64],
        size: usize,
        grad_out: &[f64],
        grad: &mut ConvTranspose,
    ) -> Vec<f64> {
        let os = size * 2;
        let mut grad_in = vec![0.0; self.in_c * size * size];
        for oc in 0..self.out_c {
            grad.bias[oc] += grad_out[oc * os * os..(oc + 1) * os * os].iter().sum::<f64>();
        }
        for ic in 0..self.in_c {
            let src = &input[ic * size * size..(ic + 1) * size * size];
            let gin = &mut grad_in[ic * size * size..(ic + 1) * size * size];
            for oc in 0..self.out_c {
                let base = (ic * self.out_c + oc) * 9;
                let w = &self.weight[base..base + 9];
                let gw = &mut grad.weight[base..base + 9];
                let g = &grad_out[oc * os * os..(oc + 1) * os * os];
                for iy in 0..size {
                    for ky in 0..3 {
                        let Some(oy) = tap(iy, ky, os) else { continue };
                        for ix in 0..size {
                            let v = src[iy * size + ix];
                            let mut acc = 0.0;
                            for kx in 0..3 {
                                if let Some(ox) = tap(ix, kx, os) {
                                    let go = g[oy * os + ox];
                                    gw[ky * 3 + kx] += go * v;
                                    acc += go * w[ky * 3 + kx];
                                }
                            }
                            gin[iy * size + ix] += acc;
                        }
                    }
                }
            }
        }
        grad_in
    }
}

impl Linear {
    pub fn zeros(in_f: usize, out_f: usize) -> Self {
        Self {
            in_f,
            out_f,
            weight: vec![0.0; in_f * out_f],
            bias: vec![0.0; out_f],
        }
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.in_f)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    pub fn backward(&self, input: &[f64], grad_out: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.in_f];
        for (o, &go) in grad_out.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            grad.bias[o] += go;
            let row = &self.weight[o * self.in_f..(o + 1) * self.in_f];
            let grow = &mut grad.weight[o * self.in_f..(o + 1) * self.in_f];
            for i in 0..self.in_f {
                grow[i] += go * input[i];
                grad_in[i] += go * row[i];
            }
        }
        grad_in
    }
}

pub fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Masks `grad` by the rectifier derivative evaluated at `pre`.
pub fn relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
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

pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}
