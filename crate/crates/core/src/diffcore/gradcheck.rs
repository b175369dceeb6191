//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::graph::{Conv2dSpec, Graph, Var};
use super::tensor::Tensor;

/// Step used for central differences.
pub const FD_EPS: f64 = 1e-5;
/// Maximum accepted relative error.
pub const REL_TOL: f64 = 1e-4;
/// Gradient magnitudes below this are compared absolutely; central
/// differences in f64 carry ~1e-10 absolute error at `FD_EPS`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the reverse-mode gradient of `f` with central differences for
/// every element of every input. `f` must build a scalar from the given
/// leaves.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        worst: (0, 0),
    };
    for i in 0..work.len() {
        for k in 0..work[i].numel() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + FD_EPS;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - FD_EPS;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            let e = rel_err(analytic[i][k], numeric);
            report.checked += 1;
            if e > report.max_rel_err || !e.is_finite() {
                report.max_rel_err = if e.is_finite() { e } else { f64::INFINITY };
                report.worst = (i, k);
            }
        }
    }
    Ok(report)
}

/// Random tensor with entries in `[-1, 1]`.
pub fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("numel matches")
}

/// `sum(out * R)` with a fixed random `R`, so every output element carries a
/// distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(out));
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Finite-difference check of every engine operation on random inputs.
pub fn diffcore_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let ws = seed ^ 0x5eed;

    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[3, 4]);
    out.push(check("add", &[a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1])?;
        weighted_sum(g, y, ws)
    })?);
    out.push(check("sub", &[a.clone(), b.clone()], |g, v| {
        let y = g.sub(v[0], v[1])?;
        weighted_sum(g, y, ws)
    })?);
    out.push(check("mul", &[a.clone(), b.clone()], |g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted_sum(g, y, ws)
    })?);
    out.push(check("scale", std::slice::from_ref(&a), |g, v| {
        let y = g.scale(v[0], 0.7);
        weighted_sum(g, y, ws)
    })?);
    out.push(check("scale_cols", std::slice::from_ref(&a), |g, v| {
        let y = g.scale_cols(v[0], &[0.5, -2.0, 3.0, 1.5])?;
        weighted_sum(g, y, ws)
    })?);
    let s = random(&mut rng, &[3, 1]);
    out.push(check("mul_row_scalar", &[a.clone(), s], |g, v| {
        let y = g.mul_row_scalar(v[0], v[1])?;
        weighted_sum(g, y, ws)
    })?);
    for (name, act) in [
        ("relu", super::Activation::Relu),
        ("tanh", super::Activation::Tanh),
        ("sigmoid", super::Activation::Sigmoid),
    ] {
        out.push(check(name, std::slice::from_ref(&a), |g, v| {
            let y = g.activate(v[0], act);
            weighted_sum(g, y, ws)
        })?);
    }

    let x = random(&mut rng, &[2, 3, 5]);
    let w = random(&mut rng, &[4, 5]);
    let bias = random(&mut rng, &[4]);
    out.push(check("linear", &[x, w, bias], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        weighted_sum(g, y, ws)
    })?);

    let w1 = random(&mut rng, &[6, 5]);
    let b1 = random(&mut rng, &[6]);
    let w2 = random(&mut rng, &[2, 6]);
    let b2 = random(&mut rng, &[2]);
    let xin = random(&mut rng, &[3, 5]);
    out.push(check("mlp", &[xin, w1, b1, w2, b2], |g, v| {
        let y = g.mlp(
            v[0],
            &[
                (v[1], v[2], super::Activation::Tanh),
                (v[3], v[4], super::Activation::Linear),
            ],
        )?;
        weighted_sum(g, y, ws)
    })?);

    let ba = random(&mut rng, &[2, 3, 4]);
    let bb = random(&mut rng, &[2, 4, 2]);
    out.push(check("bmm", &[ba, bb], |g, v| {
        let y = g.bmm(v[0], v[1])?;
        weighted_sum(g, y, ws)
    })?);

    let img = random(&mut rng, &[2, 2, 6, 7]);
    let k = random(&mut rng, &[3, 2, 3, 3]);
    let kb = random(&mut rng, &[3]);
    out.push(check("conv2d_pad1", &[img.clone(), k.clone(), kb.clone()], |g, v| {
        let y = g.conv2d(
            v[0],
            v[1],
            Some(v[2]),
            Conv2dSpec {
                stride: 1,
                padding: 1,
                ..Default::default()
            },
        )?;
        weighted_sum(g, y, ws)
    })?);
    out.push(check("conv2d_stride2", &[img.clone(), k, kb], |g, v| {
        let y = g.conv2d(
            v[0],
            v[1],
            Some(v[2]),
            Conv2dSpec {
                stride: 2,
                padding: 0,
                ..Default::default()
            },
        )?;
        weighted_sum(g, y, ws)
    })?);
    out.push(check(
        "conv2d_replicate",
        &[img.clone(), random(&mut rng, &[3, 2, 3, 3])],
        |g, v| {
            let spec = Conv2dSpec {
                stride: 1,
                padding: 1,
                replicate: true,
            };
            let y = g.conv2d(v[0], v[1], None, spec)?;
            weighted_sum(g, y, ws)
        },
    )?);
    out.push(check("max_pool2", std::slice::from_ref(&img), |g, v| {
        let y = g.max_pool2(v[0])?;
        weighted_sum(g, y, ws)
    })?);
    out.push(check("spatial_softmax", std::slice::from_ref(&img), |g, v| {
        let y = g.spatial_softmax(v[0], 1.0)?;
        weighted_sum(g, y, ws)
    })?);
    out.push(check("global_max_pool", std::slice::from_ref(&img), |g, v| {
        let y = g.global_max_pool(v[0])?;
        weighted_sum(g, y, ws)
    })?);
    out.push(check("global_avg_pool", &[img], |g, v| {
        let y = g.global_avg_pool(v[0])?;
        weighted_sum(g, y, ws)
    })?);
    out.push(check("softmax", std::slice::from_ref(&a), |g, v| {
        let y = g.softmax(v[0])?;
        weighted_sum(g, y, ws)
    })?);
    out.push(check("concat", &[a.clone(), random(&mut rng, &[3, 2])], |g, v| {
        let y = g.concat(&[v[0], v[1]])?;
        weighted_sum(g, y, ws)
    })?);
    out.push(check("slice_last", std::slice::from_ref(&a), |g, v| {
        let y = g.slice_last(v[0], 1, 2)?;
        weighted_sum(g, y, ws)
    })?);
    out.push(check("reshape", std::slice::from_ref(&a), |g, v| {
        let y = g.reshape(v[0], &[2, 6])?;
        weighted_sum(g, y, ws)
    })?);
    out.push(check("gather_rows", std::slice::from_ref(&a), |g, v| {
        let y = g.gather_rows(v[0], &[2, 0, 2])?;
        weighted_sum(g, y, ws)
    })?);
    let mats: Vec<f64> = (0..3 * 3 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let offs: Vec<f64> = (0..3 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    out.push(check("affine_rows", std::slice::from_ref(&a), |g, v| {
        let y = g.affine_rows(v[0], &mats, &offs, 3)?;
        weighted_sum(g, y, ws)
    })?);
    out.push(check("sum", std::slice::from_ref(&a), |g, v| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.sum(y))
    })?);
    out.push(check("mean", std::slice::from_ref(&a), |g, v| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.mean(y))
    })?);
    out.push(check("sum_last", std::slice::from_ref(&a), |g, v| {
        let y = g.sum_last(v[0])?;
        weighted_sum(g, y, ws)
    })?);
    let target = random(&mut rng, &[3, 4]).into_data();
    out.push(check("angle_to", &[a], |g, v| {
        let y = g.angle_to(v[0], &target, 1e-7)?;
        weighted_sum(g, y, ws)
    })?);
    Ok(out)
}
