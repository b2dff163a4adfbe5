use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{Gradients, ParamId, ParamStore};

/// A deterministic scalar objective with an analytic gradient.
pub trait Objective {
    fn loss(&self, params: &ParamStore<f64>) -> f64;
    fn loss_and_grad(&self, params: &ParamStore<f64>) -> (f64, Gradients<f64>);
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over probes where the loss is smooth.
    pub max_rel_error: f64,
    /// `(parameter name, flat index, analytic, numeric)` of the worst probe.
    pub worst: Option<(String, usize, f64, f64)>,
    pub probes: usize,
    /// Probes whose `±STEP` interval straddles a non-differentiable point
    /// (ReLU or clamp kink); excluded from `max_rel_error`.
    pub kinks: usize,
}

const STEP: f64 = 1e-4;
/// Gradients below this magnitude on both sides count as agreeing zeros.
const ABS_FLOOR: f64 = 1e-10;
/// Central differences at `STEP` and `STEP/2` agree to `O(STEP²)` on a
/// smooth loss; a larger gap means a kink lies inside the interval.
const KINK_TOL: f64 = 1e-5;

fn rel(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < ABS_FLOOR {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Compare analytic gradients with central finite differences on `probes`
/// randomly chosen scalar parameters.
pub fn grad_check<O: Objective>(objective: &O, params: &ParamStore<f64>, probes: usize, seed: u64) -> GradCheckReport {
    let (_, analytic) = objective.loss_and_grad(params);
    let total = params.scalar_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, probes, kinks: 0 };
    if total == 0 {
        return report;
    }
    let central = |work: &mut ParamStore<f64>, pid: ParamId, flat: usize, h: f64| {
        let orig = work.get(pid)[flat];
        work.get_mut(pid)[flat] = orig + h;
        let plus = objective.loss(work);
        work.get_mut(pid)[flat] = orig - h;
        let minus = objective.loss(work);
        work.get_mut(pid)[flat] = orig;
        (plus - minus) / (2.0 * h)
    };
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let mut id = 0;
        while flat >= work.params()[id].value.len() {
            flat -= work.params()[id].value.len();
            id += 1;
        }
        let pid = ParamId(id);
        let numeric = central(&mut work, pid, flat, STEP);
        let half = central(&mut work, pid, flat, STEP / 2.0);
        if rel(numeric, half) > KINK_TOL {
            report.kinks += 1;
            continue;
        }
        let a = analytic.get(pid)[flat];
        let r = rel(a, numeric);
        if r > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(r);
            report.worst = Some((work.params()[id].name.clone(), flat, a, numeric));
        }
    }
    report
}

impl GradCheckReport {
    /// True when the check passes `tol` and at most a tenth of probes hit kinks.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.kinks * 10 <= self.probes
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Layer, Sequential, Tensor};
    use super::*;

    struct Linear {
        a: Vec<f64>,
    }

    impl Objective for Linear {
        fn loss(&self, p: &ParamStore<f64>) -> f64 {
            p.get(ParamId(0)).iter().zip(&self.a).map(|(w, a)| w * a).sum()
        }
        fn loss_and_grad(&self, p: &ParamStore<f64>) -> (f64, Gradients<f64>) {
            let mut g = p.zero_grads();
            g.get_mut(ParamId(0)).copy_from_slice(&self.a);
            (self.loss(p), g)
        }
    }

    struct TinyMlp {
        net: Sequential,
        x: Tensor<f64>,
        y: Vec<f64>,
    }

    impl Objective for TinyMlp {
        fn loss(&self, p: &ParamStore<f64>) -> f64 {
            let out = self.net.infer(p, &self.x);
            out.data().iter().zip(&self.y).map(|(o, y)| (o - y).powi(2)).sum::<f64>() / self.y.len() as f64
        }
        fn loss_and_grad(&self, p: &ParamStore<f64>) -> (f64, Gradients<f64>) {
            let tape = self.net.forward(p, self.x.clone());
            let out = tape.output();
            let n = self.y.len() as f64;
            let loss = out.data().iter().zip(&self.y).map(|(o, y)| (o - y).powi(2)).sum::<f64>() / n;
            let d: Vec<f64> = out.data().iter().zip(&self.y).map(|(o, y)| 2.0 * (o - y) / n).collect();
            let mut g = p.zero_grads();
            self.net.backward(p, &tape, Tensor::from_vec(out.shape(), d).unwrap(), &mut g);
            (loss, g)
        }
    }

    #[test]
    fn linear_loss_is_exact() {
        let mut p = ParamStore::new();
        p.add("w", &[5], vec![0.1, 0.2, -0.3, 0.4, 0.5]);
        let obj = Linear { a: vec![1.5, -2.0, 0.25, 3.0, -0.75] };
        let r = grad_check(&obj, &p, 20, 1);
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
    }

    fn tiny() -> (TinyMlp, ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ParamStore::new();
        let net = Sequential::mlp(&mut p, "mlp", &[2, 4, 1], Layer::Tanh, &mut rng);
        let xs: Vec<f64> = (0..16).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
        let y: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        (TinyMlp { net, x: Tensor::from_vec(&[8, 2], xs).unwrap(), y }, p)
    }

    #[test]
    fn tiny_mlp_passes() {
        let (obj, p) = tiny();
        let r = grad_check(&obj, &p, 21, 2);
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn relu_kink_is_flagged_not_counted() {
        struct Hinge;
        impl Objective for Hinge {
            fn loss(&self, p: &ParamStore<f64>) -> f64 {
                p.get(ParamId(0))[0].max(0.0)
            }
            fn loss_and_grad(&self, p: &ParamStore<f64>) -> (f64, Gradients<f64>) {
                let mut g = p.zero_grads();
                g.get_mut(ParamId(0))[0] = if p.get(ParamId(0))[0] > 0.0 { 1.0 } else { 0.0 };
                (self.loss(p), g)
            }
        }
        let mut p = ParamStore::new();
        p.add("w", &[1], vec![3e-5]);
        let r = grad_check(&Hinge, &p, 4, 0);
        assert_eq!(r.kinks, 4);
        assert!(!r.passes(1e-4));
        p.get_mut(ParamId(0))[0] = 0.5;
        let r = grad_check(&Hinge, &p, 4, 0);
        assert_eq!(r.kinks, 0);
        assert!(r.passes(1e-12));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        struct Off;
        impl Objective for Off {
            fn loss(&self, p: &ParamStore<f64>) -> f64 {
                p.get(ParamId(0)).iter().map(|w| w * w).sum()
            }
            fn loss_and_grad(&self, p: &ParamStore<f64>) -> (f64, Gradients<f64>) {
                let mut g = p.zero_grads();
                for (d, w) in g.get_mut(ParamId(0)).iter_mut().zip(p.get(ParamId(0))) {
                    *d = 2.0 * w * 1.001;
                }
                (self.loss(p), g)
            }
        }
        let mut p = ParamStore::new();
        p.add("w", &[3], vec![0.3, -0.7, 1.2]);
        let r = grad_check(&Off, &p, 6, 0);
        assert!(r.max_rel_error > 5e-4 && r.kinks == 0, "{r:?}");
    }

    #[test]
    fn repeated_checks_agree() {
        let (obj, p) = tiny();
        assert_eq!(grad_check(&obj, &p, 10, 5), grad_check(&obj, &p, 10, 5));
    }

    #[test]
    fn conv_stack_passes() {
        use super::super::ConvGeom;
        struct ConvObj {
            net: Sequential,
            x: Tensor<f64>,
        }
        impl Objective for ConvObj {
            fn loss(&self, p: &ParamStore<f64>) -> f64 {
                self.net.infer(p, &self.x).data().iter().map(|v| v * v).sum::<f64>() * 0.5
            }
            fn loss_and_grad(&self, p: &ParamStore<f64>) -> (f64, Gradients<f64>) {
                let tape = self.net.forward(p, self.x.clone());
                let out = tape.output().clone();
                let loss = out.data().iter().map(|v| v * v).sum::<f64>() * 0.5;
                let mut g = p.zero_grads();
                self.net.backward(p, &tape, out, &mut g);
                (loss, g)
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = ParamStore::new();
        let mut net = Sequential::new();
        let c = ConvGeom::conv(1, 3, 5, 2, 1, 11, 10).unwrap();
        net.push(Layer::conv(&mut p, "c", c, &mut rng)).push(Layer::Tanh);
        let t = ConvGeom::transposed(3, 2, 3, 2, 1, c.out_h, c.out_w, (1, 0)).unwrap();
        net.push(Layer::conv_transpose(&mut p, "t", t, &mut rng)).push(Layer::Sigmoid);
        net.push(Layer::Reshape { shape: vec![2 * t.out_h * t.out_w] });
        net.push(Layer::dense(&mut p, "d", 2 * t.out_h * t.out_w, 3, &mut rng));
        let x: Vec<f64> = (0..110).map(|i| (i as f64 * 0.37).sin()).collect();
        let obj = ConvObj { net, x: Tensor::from_vec(&[1, 1, 11, 10], x).unwrap() };
        let r = grad_check(&obj, &p, 60, 3);
        assert!(r.passes(1e-4), "{r:?}");
    }
}
