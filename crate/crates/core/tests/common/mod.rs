#![allow(dead_code)]

use machina::codec::LIKELIHOOD_FLOOR;
use machina::tensor::{Graph, ParameterSet, Tensor, Var};
use machina::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod oracles;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Step used by the central finite-difference oracle.
pub const FD_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients of `f` against central finite
/// differences, input by input. Returns the largest norm-wise relative
/// error `|g_ad - g_fd| / max(|g_ad|, |g_fd|)` over all inputs.
pub fn gradient_check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();

    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars).unwrap();
        g.value(loss).item().unwrap()
    };

    let mut worst: f64 = 0.0;
    for (i, (input, &v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    relative_error_floored(a, b, 0.0)
}

/// [`relative_error`] with the normalising scale bounded below by `floor`.
pub fn relative_error_floored(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb).max(floor);
    // Below this both sides are rounding noise of the stencil.
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Step of the five-point stencil used for whole-network checks.
pub const FD_STEP_WIDE: f64 = 1e-4;

/// Finite-difference check over named parameters. At most `max_coords`
/// coordinates of each parameter are probed (evenly strided). Deep networks
/// produce gradients many orders of magnitude below the loss, so this uses the
/// fourth-order stencil `(-f(+2h) + 8f(+h) - 8f(-h) + f(-2h)) / 12h`, whose
/// rounding error is far smaller than the plain central difference's.
/// Returns the worst norm-wise relative error and the parameter it occurred
/// in.
pub fn param_gradient_check(
    params: &ParameterSet,
    max_coords: usize,
    f: impl Fn(&mut Graph, &ParameterSet) -> Result<Var>,
) -> (f64, String) {
    param_gradient_check_with_step(params, max_coords, FD_STEP_WIDE, f)
}

/// Loss value and analytic gradients of `f` at `params`.
fn analytic<G>(params: &ParameterSet, f: &impl Fn(&mut Graph, &ParameterSet) -> Result<(Var, G)>) -> (f64, ParameterSet) {
    let mut work = params.clone();
    let mut g = Graph::new();
    let (loss, _) = f(&mut g, &work).unwrap();
    g.backward_into(loss, &mut work).unwrap();
    (g.value(loss).item().unwrap(), work)
}

/// Five-point central estimate of the derivative along coordinate `j` of
/// `name`, given an evaluator returning the loss and anything else.
fn five_point<T>(params: &ParameterSet, name: &str, j: usize, h: f64, eval: &impl Fn(&ParameterSet) -> (f64, T)) -> (f64, [T; 5]) {
    let [a, b, c, d, e] = [2.0, 1.0, 0.0, -1.0, -2.0].map(|k| {
        let mut shifted = params.clone();
        shifted.get_mut(name).unwrap().value.data_mut()[j] += k * h;
        eval(&shifted)
    });
    let dv = (-a.0 + 8.0 * b.0 - 8.0 * d.0 + e.0) / (12.0 * h);
    (dv, [a.1, b.1, c.1, d.1, e.1])
}

/// Fourth-order one-sided estimate towards `dir` (+1 or -1), with the
/// extra values at `0, dir h, .., 4 dir h`.
fn one_sided<T>(params: &ParameterSet, name: &str, j: usize, h: f64, dir: f64, eval: &impl Fn(&ParameterSet) -> (f64, T)) -> (f64, [T; 5]) {
    let [a, b, c, d, e] = [0.0, 1.0, 2.0, 3.0, 4.0].map(|k| {
        let mut shifted = params.clone();
        shifted.get_mut(name).unwrap().value.data_mut()[j] += dir * k * h;
        eval(&shifted)
    });
    let dv = dir * (-25.0 * a.0 + 48.0 * b.0 - 36.0 * c.0 + 16.0 * d.0 - 3.0 * e.0) / (12.0 * h);
    (dv, [a.1, b.1, c.1, d.1, e.1])
}

/// [`param_gradient_check`] with an explicit initial stencil step. The step
/// shrinks for coordinates where the stencil straddles a kink of a
/// piecewise-linear activation.
pub fn param_gradient_check_with_step(
    params: &ParameterSet,
    max_coords: usize,
    step: f64,
    f: impl Fn(&mut Graph, &ParameterSet) -> Result<Var>,
) -> (f64, String) {
    let f = |g: &mut Graph, p: &ParameterSet| f(g, p).map(|v| (v, ()));
    let (_, work) = analytic(params, &f);
    let eval = |p: &ParameterSet| {
        let mut g = Graph::new();
        let (loss, _) = f(&mut g, p).unwrap();
        (g.value(loss).item().unwrap(), ())
    };
    let mut worst = (0.0, String::new());
    for (name, p) in work.iter() {
        let Some(grad) = &p.grad else { continue };
        let n = p.value.numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        let coords: Vec<usize> = (0..n).step_by(stride).collect();
        let analytic: Vec<f64> = coords.iter().map(|&j| grad.data()[j]).collect();
        let numeric: Vec<f64> = coords
            .iter()
            .map(|&j| {
                // On a smooth stretch estimates at h and h/2 agree to
                // O(h^4); a kink inside the stencil shifts one of them by a
                // finite amount.
                let mut h = step;
                let mut d = five_point(params, name, j, h, &eval).0;
                loop {
                    let half = five_point(params, name, j, h / 2.0, &eval).0;
                    if (d - half).abs() <= 1e-8 * d.abs() + 1e-10 || h < step / 1000.0 {
                        break half;
                    }
                    h /= 4.0;
                    d = five_point(params, name, j, h, &eval).0;
                }
            })
            .collect();
        let err = relative_error(&analytic, &numeric);
        if err > worst.0 {
            worst = (err, name.to_string());
        }
    }
    worst
}

/// Like [`param_gradient_check_with_step`] for networks with many
/// piecewise units, where some base coordinates sit within rounding
/// distance of a kink and have no resolvable derivative.
///
/// A stencil is trusted only when no kink lies inside it (every `abs` /
/// `leaky_relu` / Gaussian-likelihood input keeps its sign and every
/// likelihood stays on the same side of its floor at all stencil points)
/// and its estimates at h and h/2 agree to within truncation and rounding.
/// Coordinates are drawn in a seeded random order; those without a trusted
/// stencil at any of `step / 4^k`, `k < 6`, are passed over for the next
/// candidate. A parameter with fewer than half the requested coordinates
/// checkable reports an infinite error.
///
/// Gradient norms below the resolution of the smallest stencil used,
/// `10 eps |L| / (h * 1e-6)`, are compared on that scale instead of their own.
pub fn gated_gradient_check(
    params: &ParameterSet,
    max_coords: usize,
    step: f64,
    f: impl Fn(&mut Graph, &ParameterSet) -> Result<Var>,
) -> (f64, String) {
    let f = |g: &mut Graph, p: &ParameterSet| {
        let loss = f(g, p)?;
        let mut gates = Vec::new();
        for op in ["abs", "leaky_relu"] {
            for v in g.nodes_of(op) {
                gates.push((g.op_inputs(v)[0], 0.0));
            }
        }
        // The Gaussian model works on |y_hat|.
        for v in g.nodes_of("gaussian_likelihood") {
            gates.push((g.op_inputs(v)[0], 0.0));
        }
        for op in ["gaussian_likelihood", "factorized_likelihood"] {
            for v in g.nodes_of(op) {
                gates.push((v, LIKELIHOOD_FLOOR));
            }
        }
        Ok((loss, gates))
    };
    let (loss, work) = analytic(params, &f);
    // A loss reduced over thousands of terms carries up to ~10 ulp of rounding.
    let noise = |h: f64| 10.0 * loss.abs() * f64::EPSILON / h;
    let eval = |p: &ParameterSet| -> (f64, Vec<bool>) {
        let mut g = Graph::new();
        let (loss, gates) = f(&mut g, p).unwrap();
        let signs = gates
            .iter()
            .flat_map(|&(v, t)| g.value(v).data().iter().map(|x| *x > t).collect::<Vec<_>>())
            .collect();
        (g.value(loss).item().unwrap(), signs)
    };
    // Central stencil where it is kink-free, else a one-sided stencil away
    // from a kink right next to the base point. The one-sided weights
    // amplify rounding about seven times more.
    let base = eval(params).1;
    let trusted = |name: &str, j: usize| {
        let stencil = |h: f64, dir: f64| {
            if dir == 0.0 {
                five_point(params, name, j, h, &eval)
            } else {
                one_sided(params, name, j, h, dir, &eval)
            }
        };
        (0..6).map(|k| step / 4f64.powi(k)).find_map(|h| {
            [(0.0, 2.0), (1.0, 14.0), (-1.0, 14.0)].into_iter().find_map(|(dir, amp)| {
                let (d, pa) = stencil(h, dir);
                if !pa.iter().all(|s| *s == base) {
                    return None;
                }
                let (half, pb) = stencil(h / 2.0, dir);
                let clean = pb.iter().all(|s| *s == base);
                (clean && (d - half).abs() <= 1e-8 * d.abs() + amp * noise(h / 2.0)).then_some((half, h / 2.0, amp))
            })
        })
    };

    let mut worst = (0.0, String::new());
    for (name, p) in work.iter() {
        let Some(grad) = &p.grad else { continue };
        let n = p.value.numel();
        let want = max_coords.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng(n as u64));
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        let mut floor: f64 = 0.0;
        for &j in order.iter().take(3 * want) {
            if analytic.len() == want {
                break;
            }
            if let Some((d, h, amp)) = trusted(name, j) {
                floor = floor.max(amp / 2.0 * noise(h) / 1e-6);
                analytic.push(grad.data()[j]);
                numeric.push(d);
            }
        }
        let err = if 2 * analytic.len() < want {
            f64::INFINITY
        } else {
            relative_error_floored(&analytic, &numeric, floor)
        };
        if err > worst.0 {
            worst = (err, name.to_string());
        }
    }
    worst
}
