use super::Linear;
use crate::autodiff::{ScanOrder, Var};
use crate::error::Result;
use crate::params::{Bound, Init, ParamBuilder};
use crate::tensor::Tensor;

/// Initial step size `softplus(b_Δ)` of the scan.
const DELTA_INIT: f64 = 0.25;

/// 2D selective scan: four directional scans over the flattened grid sharing
/// one set of input-dependent parameters, summed, then projected.
#[derive(Clone, Debug)]
pub struct Ss2d {
    delta: Linear,
    proj_b: Linear,
    proj_c: Linear,
    a_log: String,
    d: String,
    proj_out: Linear,
    pub channels: usize,
    pub state_dim: usize,
}

impl Ss2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, out: usize, state_dim: usize) -> Self {
        let mut pb = pb.child(name);
        let delta = Linear::with_bias(&mut pb, "delta", channels, channels, (DELTA_INIT.exp() - 1.0).ln());
        // A = -exp(a_log) starts at -(1..=N) for every channel.
        let a_init: Vec<f64> = (0..channels)
            .flat_map(|_| (1..=state_dim).map(|k| (k as f64).ln()))
            .collect();
        Self {
            delta,
            proj_b: Linear::new(&mut pb, "proj_b", channels, state_dim, false),
            proj_c: Linear::new(&mut pb, "proj_c", channels, state_dim, false),
            a_log: pb.add(
                "a_log",
                &[channels, state_dim],
                Init::Value(Tensor::new(vec![channels, state_dim], a_init).expect("sized")),
            ),
            d: pb.add("d", &[channels], Init::Constant(1.0)),
            proj_out: Linear::output(&mut pb, "proj_out", channels, out, false),
            channels,
            state_dim,
        }
    }

    /// Sum of the four directional scans before the output projection,
    /// `[H, W, E]` → `[H·W, E]`.
    pub fn scan_sum<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (h, w) = (shape[0], shape[1]);
        let xs = x.reshape(&[h * w, self.channels])?;
        let delta = self.delta.forward(p, xs)?.softplus();
        let b = self.proj_b.forward(p, xs)?;
        let c = self.proj_c.forward(p, xs)?;
        let a = p.get(&self.a_log).exp().neg();
        let d = p.get(&self.d);
        let mut total: Option<Var<'t>> = None;
        for order in ScanOrder::four_directions(h, w) {
            let y = xs.selective_scan(delta, a, b, c, d, &order)?;
            total = Some(match total {
                Some(t) => t.add(y)?,
                None => y,
            });
        }
        Ok(total.expect("four directions"))
    }

    /// `[H, W, E]` → `[H, W, out]`.
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let y = self.proj_out.forward(p, self.scan_sum(p, x)?)?;
        y.reshape(&[shape[0], shape[1], self.proj_out.cout])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::ParameterTree;

    fn block(channels: usize, n: usize) -> (Ss2d, ParameterTree) {
        let mut tree = ParameterTree::new(11);
        let s = Ss2d::new(&mut ParamBuilder::new(&mut tree, ""), "ss", channels, channels, n);
        (s, tree)
    }

    #[test]
    fn initial_step_size_and_decay() {
        let (_, tree) = block(2, 3);
        let b = tree.get("ss.delta.b").unwrap().data()[0];
        assert!(((1.0 + b.exp()).ln() - DELTA_INIT).abs() < 1e-12);
        let a: Vec<f64> = tree.get("ss.a_log").unwrap().data()[..3].iter().map(|v| -v.exp()).collect();
        for (got, want) in a.iter().zip([-1.0, -2.0, -3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pixel_unrolls_by_hand() {
        let (s, tree) = block(2, 2);
        let tape = Tape::new();
        let p = Bound::new(&tape, &tree);
        let x = Tensor::new(vec![1, 1, 2], vec![0.7, -0.4]).unwrap();
        let y = s.scan_sum(&p, tape.constant(x.clone())).unwrap().to_tensor();
        let row = |name: &str, cols: usize| -> Vec<f64> {
            let w = tree.get(name).unwrap();
            (0..cols)
                .map(|j| (0..2).map(|i| x.data()[i] * w.at(&[i, j])).sum())
                .collect()
        };
        let bias = tree.get("ss.delta.b").unwrap().data().to_vec();
        let delta: Vec<f64> = row("ss.delta.w", 2)
            .iter()
            .zip(&bias)
            .map(|(v, b)| (1.0 + (v + b).exp()).ln())
            .collect();
        let bm = row("ss.proj_b.w", 2);
        let cm = row("ss.proj_c.w", 2);
        for ch in 0..2 {
            let state: f64 = (0..2).map(|k| cm[k] * delta[ch] * bm[k] * x.data()[ch]).sum();
            let expected = 4.0 * state + 4.0 * 1.0 * x.data()[ch];
            assert!((y.data()[ch] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn memoryless_limit_commutes_with_permutation() {
        let (s, mut tree) = block(2, 2);
        *tree.get_mut("ss.a_log").unwrap() = Tensor::full(&[2, 2], 50.0);
        let data: Vec<f64> = (0..18).map(|i| ((i * 5) % 7) as f64 / 7.0 - 0.4).collect();
        let x = Tensor::new(vec![3, 3, 2], data.clone()).unwrap();
        // Swap pixels 0 and 7.
        let mut pdata = data;
        for c in 0..2 {
            pdata.swap(c, 14 + c);
        }
        let px = Tensor::new(vec![3, 3, 2], pdata).unwrap();
        let tape = Tape::new();
        let p = Bound::new(&tape, &tree);
        let y = s.forward(&p, tape.constant(x)).unwrap().to_tensor();
        let py = s.forward(&p, tape.constant(px)).unwrap().to_tensor();
        let mut expect = y.data().to_vec();
        for c in 0..2 {
            expect.swap(c, 14 + c);
        }
        for (a, b) in expect.iter().zip(py.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
