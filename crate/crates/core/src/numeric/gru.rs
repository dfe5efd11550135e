//! Gated recurrent unit with hand-derived backpropagation through time.
//!
//! Gate equations, with row-vector inputs `x_t` and state `h_{t-1}`:
//!
//! ```text
//! z_t = σ(x_t W_z + h_{t-1} U_z + b_z)
//! r_t = σ(x_t W_r + h_{t-1} U_r + b_r)
//! ĥ_t = tanh(x_t W_h + (r_t ⊙ h_{t-1}) U_h + b_h)
//! h_t = (1 - z_t) ⊙ h_{t-1} + z_t ⊙ ĥ_t
//! ```

use serde::{Deserialize, Serialize};

use super::param::{Param, ParamSet};
use super::tensor::{add_row_bias, col_sum_acc, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor2};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_z: Param,
    pub w_r: Param,
    pub w_h: Param,
    pub u_z: Param,
    pub u_r: Param,
    pub u_h: Param,
    pub b_z: Param,
    pub b_r: Param,
    pub b_h: Param,
}

impl GruCell {
    /// All-zero cell; parameter names are prefixed with `prefix`.
    pub fn zeros(prefix: &str, input_size: usize, hidden_size: usize) -> Self {
        let w = |n: &str| Param::zeros(format!("{prefix}.{n}"), input_size, hidden_size);
        let u = |n: &str| Param::zeros(format!("{prefix}.{n}"), hidden_size, hidden_size);
        let b = |n: &str| Param::zeros(format!("{prefix}.{n}"), 1, hidden_size);
        GruCell {
            input_size,
            hidden_size,
            w_z: w("W_z"),
            w_r: w("W_r"),
            w_h: w("W_h"),
            u_z: u("U_z"),
            u_r: u("U_r"),
            u_h: u("U_h"),
            b_z: b("b_z"),
            b_r: b("b_r"),
            b_h: b("b_h"),
        }
    }
}

impl ParamSet for GruCell {
    fn params(&self) -> Vec<&Param> {
        vec![
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r, &self.b_h,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct GruStep {
    pub x: Tensor2,
    pub h_prev: Tensor2,
    pub z: Tensor2,
    pub r: Tensor2,
    pub h_cand: Tensor2,
    pub h: Tensor2,
}

/// Cached activations from [`gru_forward`], one entry per time step.
#[derive(Clone, Debug, Default)]
pub struct GruTrace {
    pub steps: Vec<GruStep>,
}

impl GruTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn affine(x: &Tensor2, w: &Param, h: &Tensor2, u: &Param, b: &Param) -> Tensor2 {
    let mut a = Tensor2::zeros(x.rows(), w.shape().1);
    matmul_acc(x, &w.value, &mut a);
    matmul_acc(h, &u.value, &mut a);
    add_row_bias(&mut a, &b.value);
    a
}

/// Runs the cell over `inputs` (one `batch × input_size` tensor per step).
pub fn gru_forward(cell: &GruCell, inputs: &[Tensor2], h0: &Tensor2) -> Result<(Vec<Tensor2>, GruTrace)> {
    let batch = h0.rows();
    if h0.cols() != cell.hidden_size {
        return Err(Error::shape("gru_forward h0 cols", cell.hidden_size, h0.cols()));
    }
    let mut hidden = Vec::with_capacity(inputs.len());
    let mut trace = GruTrace {
        steps: Vec::with_capacity(inputs.len()),
    };
    let mut h_prev = h0.clone();
    for x in inputs {
        if x.shape() != (batch, cell.input_size) {
            return Err(Error::shape(
                "gru_forward input",
                format!("{}x{}", batch, cell.input_size),
                format!("{}x{}", x.rows(), x.cols()),
            ));
        }
        let mut z = affine(x, &cell.w_z, &h_prev, &cell.u_z, &cell.b_z);
        z.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut r = affine(x, &cell.w_r, &h_prev, &cell.u_r, &cell.b_r);
        r.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));

        let mut rh = h_prev.clone();
        rh.data_mut().iter_mut().zip(r.data()).for_each(|(a, &rv)| *a *= rv);
        let mut h_cand = affine(x, &cell.w_h, &rh, &cell.u_h, &cell.b_h);
        h_cand.data_mut().iter_mut().for_each(|v| *v = v.tanh());

        let mut h = Tensor2::zeros(batch, cell.hidden_size);
        for (((o, &zv), &hp), &hc) in h
            .data_mut()
            .iter_mut()
            .zip(z.data())
            .zip(h_prev.data())
            .zip(h_cand.data())
        {
            *o = (1.0 - zv) * hp + zv * hc;
        }
        hidden.push(h.clone());
        trace.steps.push(GruStep {
            x: x.clone(),
            h_prev,
            z,
            r,
            h_cand,
            h: h.clone(),
        });
        h_prev = h;
    }
    Ok((hidden, trace))
}

/// Backpropagation through time.
///
/// `d_hidden[t]` is the upstream gradient on `h_t`; every step may carry one.
/// Parameter gradients are accumulated into `cell`; parameter values are not
/// touched. Returns the gradient with respect to each input step.
pub fn gru_backward(cell: &mut GruCell, trace: &GruTrace, d_hidden: &[Tensor2]) -> Result<Vec<Tensor2>> {
    if d_hidden.len() != trace.len() {
        return Err(Error::shape("gru_backward steps", trace.len(), d_hidden.len()));
    }
    let Some(first) = trace.steps.first() else {
        return Ok(Vec::new());
    };
    let batch = first.h.rows();
    let hs = cell.hidden_size;
    for d in d_hidden {
        if d.shape() != (batch, hs) {
            return Err(Error::shape(
                "gru_backward d_hidden",
                format!("{batch}x{hs}"),
                format!("{}x{}", d.rows(), d.cols()),
            ));
        }
    }

    let mut d_inputs = vec![Tensor2::zeros(0, 0); trace.len()];
    let mut dh_next = Tensor2::zeros(batch, hs);
    for t in (0..trace.len()).rev() {
        let s = &trace.steps[t];
        let n = batch * hs;
        let mut dh = dh_next;
        dh.data_mut()
            .iter_mut()
            .zip(d_hidden[t].data())
            .for_each(|(a, &b)| *a += b);

        let mut da_z = Tensor2::zeros(batch, hs);
        let mut da_h = Tensor2::zeros(batch, hs);
        let mut dh_prev = Tensor2::zeros(batch, hs);
        {
            let (dhd, z, hc, hp) = (dh.data(), s.z.data(), s.h_cand.data(), s.h_prev.data());
            let (daz, dah, dhp) = (da_z.data_mut(), da_h.data_mut(), dh_prev.data_mut());
            for i in 0..n {
                let d_cand = dhd[i] * z[i];
                let dz = dhd[i] * (hc[i] - hp[i]);
                dhp[i] = dhd[i] * (1.0 - z[i]);
                dah[i] = d_cand * (1.0 - hc[i] * hc[i]);
                daz[i] = dz * z[i] * (1.0 - z[i]);
            }
        }

        // candidate path
        let mut rh = s.h_prev.clone();
        rh.data_mut().iter_mut().zip(s.r.data()).for_each(|(a, &rv)| *a *= rv);
        matmul_tn_acc(&s.x, &da_h, &mut cell.w_h.grad);
        matmul_tn_acc(&rh, &da_h, &mut cell.u_h.grad);
        col_sum_acc(&da_h, &mut cell.b_h.grad);
        let mut d_rh = Tensor2::zeros(batch, hs);
        matmul_nt_acc(&da_h, &cell.u_h.value, &mut d_rh);

        let mut da_r = Tensor2::zeros(batch, hs);
        {
            let (drh, r, hp) = (d_rh.data(), s.r.data(), s.h_prev.data());
            let (dar, dhp) = (da_r.data_mut(), dh_prev.data_mut());
            for i in 0..n {
                dhp[i] += drh[i] * r[i];
                dar[i] = drh[i] * hp[i] * r[i] * (1.0 - r[i]);
            }
        }

        matmul_tn_acc(&s.x, &da_z, &mut cell.w_z.grad);
        matmul_tn_acc(&s.h_prev, &da_z, &mut cell.u_z.grad);
        col_sum_acc(&da_z, &mut cell.b_z.grad);
        matmul_tn_acc(&s.x, &da_r, &mut cell.w_r.grad);
        matmul_tn_acc(&s.h_prev, &da_r, &mut cell.u_r.grad);
        col_sum_acc(&da_r, &mut cell.b_r.grad);

        matmul_nt_acc(&da_z, &cell.u_z.value, &mut dh_prev);
        matmul_nt_acc(&da_r, &cell.u_r.value, &mut dh_prev);

        let mut dx = Tensor2::zeros(batch, cell.input_size);
        matmul_nt_acc(&da_z, &cell.w_z.value, &mut dx);
        matmul_nt_acc(&da_r, &cell.w_r.value, &mut dx);
        matmul_nt_acc(&da_h, &cell.w_h.value, &mut dx);
        d_inputs[t] = dx;
        dh_next = dh_prev;
    }
    Ok(d_inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::{finite_diff_check, FdOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor2 {
        let data = (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor2::from_vec(r, c, data).unwrap()
    }

    fn random_cell(seed: u64, input: usize, hidden: usize) -> GruCell {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cell = GruCell::zeros("g", input, hidden);
        for p in cell.params_mut() {
            let (r, c) = p.shape();
            p.value = random_tensor(&mut rng, r, c, 0.8);
        }
        cell
    }

    /// Independent scalar-loop re-implementation of one GRU step for one row.
    fn scalar_step(cell: &GruCell, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hs = cell.hidden_size;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let lin = |w: &Param, u: &Param, b: &Param, hv: &[f64], j: usize| {
            let mut s = b.value.get(0, j);
            for (k, &xk) in x.iter().enumerate() {
                s += xk * w.value.get(k, j);
            }
            for (k, &hk) in hv.iter().enumerate() {
                s += hk * u.value.get(k, j);
            }
            s
        };
        let z: Vec<f64> = (0..hs)
            .map(|j| sig(lin(&cell.w_z, &cell.u_z, &cell.b_z, h, j)))
            .collect();
        let r: Vec<f64> = (0..hs)
            .map(|j| sig(lin(&cell.w_r, &cell.u_r, &cell.b_r, h, j)))
            .collect();
        let rh: Vec<f64> = h.iter().zip(&r).map(|(a, b)| a * b).collect();
        (0..hs)
            .map(|j| {
                let c = lin(&cell.w_h, &cell.u_h, &cell.b_h, &rh, j).tanh();
                (1.0 - z[j]) * h[j] + z[j] * c
            })
            .collect()
    }

    #[test]
    fn zero_cell_stays_at_zero() {
        let cell = GruCell::zeros("g", 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs: Vec<_> = (0..5).map(|_| random_tensor(&mut rng, 2, 3, 5.0)).collect();
        let (hs, _) = gru_forward(&cell, &inputs, &Tensor2::zeros(2, 4)).unwrap();
        assert!(hs.iter().all(|h| h.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn output_shapes() {
        let cell = random_cell(2, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<_> = (0..4).map(|_| random_tensor(&mut rng, 2, 5, 1.0)).collect();
        let (hs, trace) = gru_forward(&cell, &inputs, &Tensor2::zeros(2, 3)).unwrap();
        assert_eq!(hs.len(), 4);
        assert!(hs.iter().all(|h| h.shape() == (2, 3)));
        assert_eq!(trace.len(), 4);
    }

    #[test]
    fn matches_scalar_loop() {
        let cell = random_cell(7, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs: Vec<_> = (0..5).map(|_| random_tensor(&mut rng, 2, 4, 1.0)).collect();
        let h0 = random_tensor(&mut rng, 2, 3, 0.5);
        let (hs, _) = gru_forward(&cell, &inputs, &h0).unwrap();
        for row in 0..2 {
            let mut h = h0.row(row).to_vec();
            for (t, x) in inputs.iter().enumerate() {
                h = scalar_step(&cell, x.row(row), &h);
                for (a, b) in hs[t].row(row).iter().zip(&h) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let cell = GruCell::zeros("g", 3, 2);
        let bad = vec![Tensor2::zeros(2, 4)];
        assert!(gru_forward(&cell, &bad, &Tensor2::zeros(2, 2)).is_err());
        assert!(gru_forward(&cell, &[], &Tensor2::zeros(2, 3)).is_err());
        let (_, trace) = gru_forward(&cell, &[Tensor2::zeros(2, 3)], &Tensor2::zeros(2, 2)).unwrap();
        let mut cell = cell;
        assert!(gru_backward(&mut cell, &trace, &[]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut cell = random_cell(4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs: Vec<_> = (0..3).map(|_| random_tensor(&mut rng, 2, 3, 1.0)).collect();
        let (_, trace) = gru_forward(&cell, &inputs, &Tensor2::zeros(2, 2)).unwrap();
        let d = vec![Tensor2::zeros(2, 2); 3];
        let dx = gru_backward(&mut cell, &trace, &d).unwrap();
        assert!(dx.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(cell.params().iter().all(|p| p.grad.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_leaves_values_untouched() {
        let mut cell = random_cell(9, 3, 2);
        let before = cell.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let inputs: Vec<_> = (0..3).map(|_| random_tensor(&mut rng, 1, 3, 1.0)).collect();
        let (hs, trace) = gru_forward(&cell, &inputs, &Tensor2::zeros(1, 2)).unwrap();
        gru_backward(&mut cell, &trace, &hs).unwrap();
        for (a, b) in cell.params().iter().zip(before.params()) {
            assert_eq!(a.value, b.value);
        }
    }

    /// Loss = Σ_t Σ c_t ⊙ h_t with fixed random weights c_t, so every step
    /// carries an upstream gradient.
    struct Fixture {
        cell: GruCell,
        inputs: Vec<Param>,
        coeffs: Vec<Tensor2>,
    }

    impl ParamSet for Fixture {
        fn params(&self) -> Vec<&Param> {
            let mut v = self.cell.params();
            v.extend(self.inputs.iter());
            v
        }
        fn params_mut(&mut self) -> Vec<&mut Param> {
            let mut v = self.cell.params_mut();
            v.extend(self.inputs.iter_mut());
            v
        }
    }

    fn fixture_loss(f: &Fixture) -> f64 {
        let xs: Vec<_> = f.inputs.iter().map(|p| p.value.clone()).collect();
        let (hs, _) = gru_forward(&f.cell, &xs, &Tensor2::zeros(3, f.cell.hidden_size)).unwrap();
        hs.iter()
            .zip(&f.coeffs)
            .map(|(h, c)| h.data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        // 2-input, 3-hidden cell, batch 3, sequence length 3
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut f = Fixture {
            cell: random_cell(12, 2, 3),
            inputs: (0..3)
                .map(|t| Param::new(format!("x{t}"), random_tensor(&mut rng, 3, 2, 1.0)))
                .collect(),
            coeffs: (0..3).map(|_| random_tensor(&mut rng, 3, 3, 1.0)).collect(),
        };
        let report = finite_diff_check(
            &mut f,
            |f| {
                let xs: Vec<_> = f.inputs.iter().map(|p| p.value.clone()).collect();
                let (_, trace) = gru_forward(&f.cell, &xs, &Tensor2::zeros(3, 3))?;
                let dx = gru_backward(&mut f.cell, &trace, &f.coeffs.clone())?;
                for (p, d) in f.inputs.iter_mut().zip(dx) {
                    p.grad = d;
                }
                Ok(fixture_loss(f))
            },
            |f| Ok(fixture_loss(f)),
            &FdOptions::default(),
        )
        .unwrap();
        assert_eq!(report.entries.len(), 12);
        for e in &report.entries {
            assert!(e.max_rel_error < 1e-5, "{}: {}", e.name, e.max_rel_error);
        }
    }
}
