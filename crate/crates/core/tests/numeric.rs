use dwellrec::numeric::{
    affine_softmax_xent, embedding_backward, embedding_forward, finite_diff_check, gru_forward, softmax_rows,
    FdOptions, GruCell, Param, ParamSet, Tensor2,
};
use proptest::prelude::*;

struct Head {
    w: Param,
    b: Param,
    h: Param,
}

impl ParamSet for Head {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b, &self.h]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b, &mut self.h]
    }
}

fn tight() -> FdOptions {
    FdOptions {
        tol: 1e-6,
        ..FdOptions::default()
    }
}

#[test]
fn xent_matches_finite_differences() {
    // 3 classes, 2 examples, hidden width 2; h is checked through d_h.
    let mut head = Head {
        w: Param::new("W", Tensor2::from_rows(&[vec![0.4, -0.7, 1.1], vec![-0.3, 0.9, 0.2]])),
        b: Param::new("b", Tensor2::from_rows(&[vec![0.1, -0.2, 0.35]])),
        h: Param::new("h", Tensor2::from_rows(&[vec![0.8, -1.3], vec![-0.6, 0.45]])),
    };
    let targets = [2usize, 0];
    let report = finite_diff_check(
        &mut head,
        |m| {
            let h = m.h.value.clone();
            let out = affine_softmax_xent(&mut m.w, &mut m.b, &h, &targets)?;
            for (g, d) in m.h.grad.data_mut().iter_mut().zip(out.d_h.data()) {
                *g += d;
            }
            Ok(out.loss)
        },
        |m| {
            let (mut w, mut b) = (m.w.clone(), m.b.clone());
            Ok(affine_softmax_xent(&mut w, &mut b, &m.h.value, &targets)?.loss)
        },
        &tight(),
    )
    .unwrap();
    for e in &report.entries {
        assert!(e.max_rel_error < 1e-6, "{}: {:e}", e.name, e.max_rel_error);
    }
}

struct Table(Param);

impl ParamSet for Table {
    fn params(&self) -> Vec<&Param> {
        vec![&self.0]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.0]
    }
}

#[test]
fn embedding_matches_finite_differences() {
    // Nonlinear readout L = sum c * tanh(E[ids]) over a 3x2 table.
    let ids = [2usize, 0, 2, 1];
    let c = Tensor2::from_rows(&[vec![0.5, -1.0], vec![1.5, 0.25], vec![-0.75, 2.0], vec![0.3, -0.6]]);
    let loss = |t: &Param| -> dwellrec::Result<(f64, Tensor2)> {
        let out = embedding_forward(t, &ids)?;
        let mut d = Tensor2::zeros(out.rows(), out.cols());
        let mut l = 0.0;
        for (i, (&x, &ci)) in out.data().iter().zip(c.data()).enumerate() {
            l += ci * x.tanh();
            d.data_mut()[i] = ci * (1.0 - x.tanh().powi(2));
        }
        Ok((l, d))
    };
    let mut table = Table(Param::new(
        "E",
        Tensor2::from_rows(&[vec![0.2, -0.4], vec![0.9, 0.1], vec![-0.5, 0.7]]),
    ));
    let report = finite_diff_check(
        &mut table,
        |m| {
            let (l, d) = loss(&m.0)?;
            embedding_backward(&mut m.0, &ids, &d)?;
            Ok(l)
        },
        |m| Ok(loss(&m.0)?.0),
        &tight(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-6, "{:e}", report.max_rel_error());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-700.0f64..700.0, 1..30)) {
        let mut t = Tensor2::from_rows(&[row]);
        softmax_rows(&mut t);
        let s: f64 = t.row(0).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
        prop_assert!(t.row(0).iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn zero_gru_stays_at_zero(
        xs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..6),
    ) {
        let cell = GruCell::zeros("g", 3, 4);
        let inputs: Vec<Tensor2> = xs
            .iter()
            .map(|x| Tensor2::from_vec(2, 3, x.clone()).unwrap())
            .collect();
        let (hs, _) = gru_forward(&cell, &inputs, &Tensor2::zeros(2, 4)).unwrap();
        prop_assert!(hs.iter().all(|h| h.data().iter().all(|&v| v == 0.0)));
    }
}
