//! Gated recurrent units and the bidirectional sequence encoder.

use rand::Rng;

use crate::tensor::{Graph, ParamId, ParamSet, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GruCell {
    w: [ParamId; 3],
    u: [ParamId; 3],
    b: [ParamId; 3],
    hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let gates = ["z", "r", "n"];
        let w = gates.map(|k| {
            ps.add(
                format!("{prefix}.w_{k}"),
                Tensor::glorot(input, hidden, rng),
            )
        });
        let u = gates.map(|k| {
            ps.add(
                format!("{prefix}.u_{k}"),
                Tensor::glorot(hidden, hidden, rng),
            )
        });
        let b = gates.map(|k| ps.add(format!("{prefix}.b_{k}"), Tensor::zeros(1, hidden)));
        Self { w, u, b, hidden }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Input projections `x W_k + b_k` for every row of `x` at once.
    pub fn project(&self, g: &mut Graph, x: Var) -> [Var; 3] {
        [0, 1, 2].map(|k| {
            let w = g.param(self.w[k]);
            let b = g.param(self.b[k]);
            let xw = g.matmul(x, w);
            g.add_row(xw, b)
        })
    }

    /// One step from pre-projected inputs:
    /// `z = σ(xz + h U_z)`, `r = σ(xr + h U_r)`, `n = tanh(xn + (r∘h) U_n)`,
    /// `h' = n + z∘(h - n)`.
    pub fn step_projected(&self, g: &mut Graph, xp: [Var; 3], h: Var) -> Var {
        let uz = g.param(self.u[0]);
        let ur = g.param(self.u[1]);
        let un = g.param(self.u[2]);
        let hz = g.matmul(h, uz);
        let z = g.add(xp[0], hz);
        let z = g.sigmoid(z);
        let hr = g.matmul(h, ur);
        let r = g.add(xp[1], hr);
        let r = g.sigmoid(r);
        let rh = g.mul(r, h);
        let rhu = g.matmul(rh, un);
        let n = g.add(xp[2], rhu);
        let n = g.tanh(n);
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let xp = self.project(g, x);
        self.step_projected(g, xp, h)
    }
}

/// Forward and backward GRUs whose states are concatenated per position.
#[derive(Debug, Clone)]
pub struct BiGru {
    fwd: GruCell,
    bwd: GruCell,
}

impl BiGru {
    /// `hidden` is the width of the concatenated output and must be even.
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        assert!(
            hidden.is_multiple_of(2),
            "bidirectional hidden size must be even"
        );
        Self {
            fwd: GruCell::new(ps, &format!("{prefix}.fwd"), input, hidden / 2, rng),
            bwd: GruCell::new(ps, &format!("{prefix}.bwd"), input, hidden / 2, rng),
        }
    }

    /// Encodes the `T x input` rows of `x` into `T x hidden`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Var {
        let t = g.shape(x).0;
        let run = |cell: &GruCell, g: &mut Graph, order: &mut dyn Iterator<Item = usize>| {
            let proj = cell.project(g, x);
            let mut h = g.zeros(1, cell.hidden());
            let mut states = vec![h; t];
            for i in order {
                let xp = proj.map(|p| g.row(p, i));
                h = cell.step_projected(g, xp, h);
                states[i] = h;
            }
            g.concat_rows(&states)
        };
        let f = run(&self.fwd, g, &mut (0..t));
        let b = run(&self.bwd, g, &mut (0..t).rev());
        g.concat_cols(&[f, b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn vecmat(x: &[f64], m: &Tensor) -> Vec<f64> {
        (0..m.cols())
            .map(|j| (0..m.rows()).map(|i| x[i] * m.get(i, j)).sum())
            .collect()
    }

    /// Scalar GRU step written out directly from the gate equations.
    fn oracle_step(ps: &ParamSet, prefix: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
        let p = |n: &str| ps.get(ps.id(&format!("{prefix}.{n}")).unwrap()).clone();
        let add = |a: Vec<f64>, b: Vec<f64>, c: &[f64]| -> Vec<f64> {
            a.iter()
                .zip(&b)
                .zip(c)
                .map(|((a, b), c)| a + b + c)
                .collect()
        };
        let z: Vec<f64> = add(vecmat(x, &p("w_z")), vecmat(h, &p("u_z")), p("b_z").data())
            .into_iter()
            .map(sigmoid)
            .collect();
        let r: Vec<f64> = add(vecmat(x, &p("w_r")), vecmat(h, &p("u_r")), p("b_r").data())
            .into_iter()
            .map(sigmoid)
            .collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let n: Vec<f64> = add(
            vecmat(x, &p("w_n")),
            vecmat(&rh, &p("u_n")),
            p("b_n").data(),
        )
        .into_iter()
        .map(f64::tanh)
        .collect();
        (0..h.len())
            .map(|i| (1.0 - z[i]) * n[i] + z[i] * h[i])
            .collect()
    }

    #[test]
    fn step_matches_gate_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let cell = GruCell::new(&mut ps, "c", 3, 4, &mut rng);
        for id in ps.ids().collect::<Vec<_>>() {
            let t = ps.get(id).clone();
            let fresh = Tensor::uniform(t.rows(), t.cols(), 0.5, &mut rng);
            ps.get_mut(id).data_mut().copy_from_slice(fresh.data());
        }
        let x = Tensor::uniform(1, 3, 1.0, &mut rng);
        let h = Tensor::uniform(1, 4, 1.0, &mut rng);
        let mut g = Graph::new(&ps);
        let xv = g.input(&x);
        let hv = g.input(&h);
        let out = cell.step(&mut g, xv, hv);
        let expected = oracle_step(&ps, "c", x.data(), h.data());
        for (a, b) in g.value(out).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bigru_output_shape_and_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let enc = BiGru::new(&mut ps, "e", 3, 6, &mut rng);
        let x = Tensor::uniform(5, 3, 1.0, &mut rng);
        let mut g = Graph::new(&ps);
        let xv = g.input(&x);
        let out = enc.encode(&mut g, xv);
        assert_eq!(g.shape(out), (5, 6));
        // the forward half of row 0 only sees x_0
        let first = g.input(&Tensor::row(x.data()[..3].to_vec()));
        let h0 = g.zeros(1, 3);
        let step = enc.fwd.step(&mut g, first, h0);
        let fwd0: Vec<f64> = g.value(step).to_vec();
        assert_eq!(&g.value(out)[..3], fwd0.as_slice());
        // the backward half of the last row only sees x_4
        let last = g.input(&Tensor::row(x.data()[12..].to_vec()));
        let step = enc.bwd.step(&mut g, last, h0);
        let bwd4: Vec<f64> = g.value(step).to_vec();
        assert_eq!(&g.value(out)[27..], bwd4.as_slice());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let enc = BiGru::new(&mut ps, "e", 3, 4, &mut rng);
        let x = Tensor::uniform(4, 3, 1.0, &mut rng);
        let w = Tensor::uniform(4, 4, 1.0, &mut rng);
        let report = gradient_check(
            &mut ps,
            |g| {
                let xv = g.input(&x);
                let wv = g.input(&w);
                let h = enc.encode(g, xv);
                let y = g.mul(h, wv);
                g.sum(y)
            },
            &GradCheckOptions::default(),
        );
        assert!(report.passes(1e-4), "{report:?}");
    }
}
