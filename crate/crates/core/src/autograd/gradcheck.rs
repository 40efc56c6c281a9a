//! Central-finite-difference verification of analytic gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

use super::{Tape, Var};

/// A differentiable scalar function of several tensors.
pub type ScalarFn<'a> = dyn Fn(&Tape, &[Var]) -> Result<Var> + 'a;

fn eval(f: &ScalarFn, inputs: &[Tensor]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = out.value();
    if !v.is_scalar() {
        return Err(Error::InvalidInput(format!(
            "grad_check function must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Analytic gradients of `f` at `inputs`, one tensor per input.
pub fn analytic_grads(f: &ScalarFn, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    out.backward()?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            v.grad()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect())
}

/// Central-difference gradients of `f` at `inputs` with step `eps`.
pub fn numeric_grads(f: &ScalarFn, inputs: &[Tensor], eps: f64) -> Result<Vec<Tensor>> {
    if eps <= 0.0 {
        return Err(Error::InvalidInput("eps must be positive".into()));
    }
    let mut probe = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (j, slot) in g.iter_mut().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let fp = eval(f, &probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let fm = eval(f, &probe)?;
            probe[i].data_mut()[j] = orig;
            *slot = (fp - fm) / (2.0 * eps);
        }
        grads.push(Tensor::new(inputs[i].shape().to_vec(), g)?);
    }
    Ok(grads)
}

/// Max over coordinates of `|a - n| / max(1e-12, |a| + |n|)`.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let denom = (av.abs() + nv.abs()).max(1e-12);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Verify `f`'s tape gradients against central differences; returns the
/// max relative error over all input coordinates.
pub fn grad_check(f: &ScalarFn, inputs: &[Tensor], eps: f64) -> Result<f64> {
    let analytic = analytic_grads(f, inputs)?;
    let numeric = numeric_grads(f, inputs, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Result of one op check in the verification suite.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tol
    }
}

fn random_tensor(seed: u64, tag: &str, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut r = rng::stream(seed, tag);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Keep values away from zero so the relu kink never coincides with a
/// finite-difference probe.
fn random_tensor_off_kink(seed: u64, tag: &str, shape: &[usize]) -> Tensor {
    let mut r = rng::stream(seed, tag);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = r.random_range(0.2..1.5);
            if r.random_range(0.0..1.0) < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

const EPS: f64 = 1e-5;

/// Run the per-op finite-difference suite over the given seeds. One entry
/// per op, carrying the worst error across seeds and the op's tolerance.
pub fn suite(seeds: &[u64]) -> Vec<OpCheck> {
    type Case = (
        &'static str,
        f64,
        fn(u64) -> Vec<Tensor>,
        fn(&Tape, &[Var]) -> Result<Var>,
    );
    let cases: [Case; 17] = [
        (
            "add",
            1e-8,
            |s| {
                vec![
                    random_tensor(s, "add.a", &[3, 4], -1.0, 1.0),
                    random_tensor(s, "add.b", &[3, 4], -1.0, 1.0),
                ]
            },
            |_, v| v[0].add(&v[1])?.sum().mul(&v[0].sum().add_scalar(0.5)),
        ),
        (
            "sub",
            1e-8,
            |s| {
                vec![
                    random_tensor(s, "sub.a", &[3, 4], -1.0, 1.0),
                    random_tensor(s, "sub.b", &[3, 4], -1.0, 1.0),
                ]
            },
            |_, v| Ok(v[0].sub(&v[1])?.mul(&v[0])?.sum()),
        ),
        (
            "mul",
            1e-8,
            |s| {
                vec![
                    random_tensor(s, "mul.a", &[3, 4], -1.0, 1.0),
                    random_tensor(s, "mul.b", &[3, 4], -1.0, 1.0),
                ]
            },
            |_, v| Ok(v[0].mul(&v[1])?.sum()),
        ),
        (
            "scale",
            1e-8,
            |s| vec![random_tensor(s, "scale.x", &[5], -1.0, 1.0)],
            |_, v| Ok(v[0].scale(1.7).add_scalar(0.3).sum()),
        ),
        (
            "mul_scalar_tensor",
            1e-8,
            |s| {
                vec![
                    random_tensor(s, "ms.x", &[2, 3], -1.0, 1.0),
                    random_tensor(s, "ms.g", &[1], -1.0, 1.0),
                ]
            },
            |_, v| Ok(v[0].mul(&v[1])?.sum()),
        ),
        (
            "matmul",
            1e-6,
            |s| {
                vec![
                    random_tensor(s, "mm.a", &[4, 5], -1.0, 1.0),
                    random_tensor(s, "mm.b", &[5, 3], -1.0, 1.0),
                ]
            },
            |_, v| Ok(v[0].matmul(&v[1])?.sum()),
        ),
        (
            "conv2d",
            1e-6,
            |s| {
                vec![
                    random_tensor(s, "cv.x", &[2, 5, 5], -1.0, 1.0),
                    random_tensor(s, "cv.k", &[3, 2, 3, 3], -0.7, 0.7),
                ]
            },
            |_, v| Ok(v[0].conv2d(&v[1], 2, 1)?.sum()),
        ),
        (
            "bias_add",
            1e-8,
            |s| {
                vec![
                    random_tensor(s, "ba.x", &[3, 4, 4], -1.0, 1.0),
                    random_tensor(s, "ba.b", &[3], -0.5, 0.5),
                ]
            },
            |_, v| Ok(v[0].bias_add(&v[1])?.mul(&v[0])?.sum()),
        ),
        (
            "relu",
            1e-7,
            |s| vec![random_tensor_off_kink(s, "relu.x", &[4, 4])],
            |_, v| Ok(v[0].relu().sum()),
        ),
        (
            "sigmoid",
            1e-8,
            |s| vec![random_tensor(s, "sig.x", &[3, 3], -2.0, 2.0)],
            |_, v| Ok(v[0].sigmoid().sum()),
        ),
        (
            "exp",
            1e-8,
            |s| vec![random_tensor(s, "exp.x", &[6], -1.0, 1.0)],
            |_, v| Ok(v[0].exp().sum()),
        ),
        (
            "log",
            1e-8,
            |s| vec![random_tensor(s, "log.x", &[6], 0.5, 2.0)],
            |_, v| Ok(v[0].log().sum()),
        ),
        (
            "clamp",
            1e-7,
            |s| vec![random_tensor(s, "cl.x", &[8], 0.1, 0.9)],
            |_, v| Ok(v[0].clamp(0.05, 0.95).log().sum()),
        ),
        (
            "softmax",
            1e-6,
            |s| vec![random_tensor(s, "sm.x", &[3, 4], -1.5, 1.5)],
            |_, v| {
                let s = v[0].softmax(1)?;
                Ok(s.mul(&v[0])?.sum())
            },
        ),
        (
            "sum_mean_axes",
            1e-8,
            |s| vec![random_tensor(s, "sa.x", &[2, 3, 4], -1.0, 1.0)],
            |_, v| {
                let a = v[0].sum_axes(&[2])?;
                let b = v[0].mean_axes(&[0, 1])?;
                a.mean().mul(&b.sum())
            },
        ),
        (
            "resize_up",
            1e-7,
            |s| vec![random_tensor(s, "ru.x", &[2, 3, 3], -1.0, 1.0)],
            |_, v| {
                let up = v[0].upsample2x()?;
                Ok(up.mul(&up)?.sum())
            },
        ),
        (
            "resize_down",
            1e-7,
            |s| vec![random_tensor(s, "rd.x", &[2, 4, 4], -1.0, 1.0)],
            |_, v| {
                let d = v[0].downsample2x()?;
                Ok(d.mul(&d)?.sum())
            },
        ),
    ];

    cases
        .iter()
        .map(|(name, tol, make, f)| {
            let mut worst = 0.0f64;
            for &seed in seeds {
                let inputs = make(seed);
                let err = grad_check(f, &inputs, EPS).unwrap_or(f64::INFINITY);
                worst = worst.max(err);
            }
            OpCheck {
                op: name,
                max_rel_err: worst,
                tol: *tol,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = random_tensor(3, "lin", &[6], -1.0, 1.0);
        let err = grad_check(&|_, v: &[Var]| Ok(v[0].scale(2.5).sum()), &[x], EPS).unwrap();
        assert!(err <= 1e-10, "err = {err}");
    }

    #[test]
    fn scale_derivative_equals_constant() {
        let c = 1.37;
        let x = random_tensor(11, "sc", &[4], -1.0, 1.0);
        let g = analytic_grads(&|_, v: &[Var]| Ok(v[0].scale(c).sum()), &[x.clone()]).unwrap();
        for &gv in g[0].data() {
            assert!((gv - c).abs() < 1e-15);
        }
        let n = numeric_grads(&|_, v: &[Var]| Ok(v[0].scale(c).sum()), &[x], EPS).unwrap();
        for &nv in n[0].data() {
            assert!((nv - c).abs() < 1e-9);
        }
    }

    #[test]
    fn sigmoid_of_sum_is_tight() {
        let x = random_tensor(5, "ss", &[5], -1.0, 1.0);
        let err = grad_check(&|_, v: &[Var]| Ok(v[0].sum().sigmoid()), &[x], EPS).unwrap();
        assert!(err <= 1e-7, "err = {err}");
    }

    #[test]
    fn conv_relu_chain_within_tolerance() {
        let x = random_tensor(7, "crc.x", &[2, 5, 5], -1.0, 1.0);
        let k = random_tensor(7, "crc.k", &[3, 2, 3, 3], -0.7, 0.7);
        let err = grad_check(
            &|_, v: &[Var]| Ok(v[0].conv2d(&v[1], 2, 1)?.relu().sum()),
            &[x, k],
            EPS,
        )
        .unwrap();
        assert!(err <= 1e-5, "err = {err}");
    }

    #[test]
    fn tampered_gradient_is_caught() {
        let f = |_: &Tape, v: &[Var]| Ok(v[0].mul(&v[0])?.sum());
        let x = random_tensor(9, "mt", &[4], 0.5, 1.5);
        let numeric = numeric_grads(&f, &[x.clone()], EPS).unwrap();
        let good = analytic_grads(&f, &[x]).unwrap();
        assert!(max_relative_error(&good, &numeric) <= 1e-7);
        let tampered: Vec<Tensor> = good.iter().map(|t| t.map(|v| v * 1.1)).collect();
        assert!(max_relative_error(&tampered, &numeric) > 1e-3);
    }

    #[test]
    fn suite_passes_on_a_few_seeds() {
        for check in suite(&[1, 2, 3]) {
            assert!(
                check.passed(),
                "{} failed: {} > {}",
                check.op,
                check.max_rel_err,
                check.tol
            );
        }
    }
}
