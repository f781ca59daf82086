//! Central finite-difference checks of recorded gradients.

use crate::autodiff::{Graph, Mode, Var, BN_EPS, LEAKY_SLOPE};
use crate::error::Result;
use crate::networks::{build_dn, build_srn, dn_forward_var, srn_forward_var, Bound, Ctx, DnConfig, ModelParams, SrnConfig};
use crate::psi::ConvStack;
use crate::random::{stream, uniform};
use crate::tensor::Tensor;

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks every coordinate of `x` for a scalar function built by `f`.
/// Returns the maximum relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let errs = finite_diff_check_many(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        h,
        None,
    )?;
    Ok(errs[0])
}

/// Checks a function of several inputs. With `max_coords = Some(k)`, at most
/// `k` evenly spaced coordinates of each input are probed. Returns the maximum
/// relative error per input.
pub fn finite_diff_check_many<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    max_coords: Option<usize>,
) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").data().to_vec();
        let n = analytic.len();
        let step = match max_coords {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        let mut max_err: f64 = 0.0;
        for i in (0..n).step_by(step) {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_err = max_err.max(relative_error(analytic[i], numeric));
        }
        worst.push(max_err);
    }
    Ok(worst)
}

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

pub const SMOOTH_TOL: f64 = 1e-6;
pub const KINKED_TOL: f64 = 1e-3;

fn projection(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, -1.0, 1.0, &mut stream(seed, 99))
}

/// Scalar probe `<y, p>` with a fixed random `p`.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let p = projection(g.value(y).shape(), seed);
    g.dot_const(y, p)
}

fn row<F>(name: &str, tol: f64, h: f64, coords: Option<usize>, inputs: &[Tensor], f: F) -> Result<CheckRow>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let errs = finite_diff_check_many(f, inputs, h, coords)?;
    Ok(CheckRow {
        name: name.to_string(),
        max_rel_err: errs.into_iter().fold(0.0, f64::max),
        tolerance: tol,
    })
}

/// Values in `[-1, -0.1] U [0.1, 1]`, clear of the origin kink.
fn off_origin(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Finite-difference checks of every differentiable op, the losses and both
/// networks at small shapes. Piecewise ops are probed away from their kinks
/// with a small step.
pub fn standard_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = stream(seed, 1);
    let mut rows = Vec::new();
    let x = uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut rng);
    let w = uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
    let b = uniform(&[3], -0.5, 0.5, &mut rng);
    rows.push(row("conv2d", SMOOTH_TOL, 1e-4, None, &[x.clone(), w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        project(g, y, 1)
    })?);
    let wt = uniform(&[2, 3, 4, 4], -0.5, 0.5, &mut rng);
    let bt = uniform(&[3], -0.5, 0.5, &mut rng);
    rows.push(row("conv_transpose2d", SMOOTH_TOL, 1e-4, None, &[x.clone(), wt, bt], |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
        project(g, y, 2)
    })?);
    let gamma = uniform(&[2], 0.5, 1.5, &mut rng);
    let beta = uniform(&[2], -0.5, 0.5, &mut rng);
    rows.push(row("batch_norm2d.train", SMOOTH_TOL, 1e-4, None, &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let (y, _) = g.batch_norm2d(v[0], v[1], v[2], BN_EPS, Mode::Train, None)?;
        let y = g.sigmoid(y)?;
        project(g, y, 3)
    })?);
    let (rm, rv) = ([0.1, -0.2], [0.8, 1.3]);
    rows.push(row("batch_norm2d.eval", SMOOTH_TOL, 1e-4, None, &[x.clone(), gamma, beta], |g, v| {
        let (y, _) = g.batch_norm2d(v[0], v[1], v[2], BN_EPS, Mode::Eval, Some((&rm[..], &rv[..])))?;
        project(g, y, 4)
    })?);
    let xl = uniform(&[3, 6], -1.0, 1.0, &mut rng);
    let wl = uniform(&[4, 6], -0.5, 0.5, &mut rng);
    let bl = uniform(&[4], -0.5, 0.5, &mut rng);
    rows.push(row("linear", SMOOTH_TOL, 1e-4, None, &[xl.clone(), wl, bl], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        project(g, y, 5)
    })?);
    rows.push(row("sigmoid", SMOOTH_TOL, 1e-4, None, std::slice::from_ref(&xl), |g, v| {
        let y = g.sigmoid(v[0])?;
        project(g, y, 6)
    })?);
    rows.push(row("leaky_relu", KINKED_TOL, 1e-6, None, &[off_origin(&[3, 6], &mut rng)], |g, v| {
        let y = g.leaky_relu(v[0], LEAKY_SLOPE)?;
        project(g, y, 7)
    })?);
    // distinct values keep the window maxima unique
    let pooled = Tensor::from_fn(&[1, 2, 6, 6], |i| ((i * 37) % 72) as f64 / 72.0 + 0.001 * i as f64);
    rows.push(row("max_pool2d", KINKED_TOL, 1e-6, None, &[pooled], |g, v| {
        let y = g.max_pool2d(v[0], 2, 2)?;
        project(g, y, 8)
    })?);
    let a = uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let c = uniform(&[2, 3], -1.0, 1.0, &mut rng);
    rows.push(row("add.sub.scale", SMOOTH_TOL, 1e-4, None, &[a.clone(), c.clone()], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let d = g.scale(d, 1.7)?;
        let q = g.sum_squares(d)?;
        let m = g.mean(v[1])?;
        g.add(q, m)
    })?);
    rows.push(row("reshape.flatten", SMOOTH_TOL, 1e-4, None, std::slice::from_ref(&x), |g, v| {
        let f = g.flatten(v[0])?;
        let r = g.reshape(f, &[5, 20])?;
        let r = g.sigmoid(r)?;
        project(g, r, 9)
    })?);
    let tail = uniform(&[1, 3], -1.0, 1.0, &mut rng);
    rows.push(row("concat.slice", SMOOTH_TOL, 1e-4, None, &[a.clone(), tail], |g, v| {
        let j = g.concat_batch(&[v[0], v[1]])?;
        let s = g.slice_batch(j, 1, 2)?;
        let s = g.sigmoid(s)?;
        project(g, s, 10)
    })?);
    rows.push(row("mse", SMOOTH_TOL, 1e-4, None, &[a, c], |g, v| g.mse(v[0], v[1]))?);
    let probs = uniform(&[5], 0.1, 0.9, &mut rng);
    rows.push(row("neg_log_mean", SMOOTH_TOL, 1e-5, None, std::slice::from_ref(&probs), |g, v| {
        g.neg_log_mean(v[0])
    })?);
    rows.push(row("neg_log1m_mean", SMOOTH_TOL, 1e-5, None, std::slice::from_ref(&probs), |g, v| {
        g.neg_log1m_mean(v[0])
    })?);
    let fake = uniform(&[5], 0.1, 0.9, &mut rng);
    rows.push(row("d_loss", SMOOTH_TOL, 1e-5, None, &[probs, fake.clone()], |g, v| {
        crate::losses::d_loss_var(g, v[0], v[1])
    })?);
    rows.push(row("g_adv_loss", SMOOTH_TOL, 1e-5, None, &[fake], |g, v| {
        crate::losses::g_adv_loss_var(g, v[0])
    })?);

    let feats = uniform(&[2, 2, 5, 6], -1.0, 1.0, &mut rng);
    let grid = uniform(&[2, 4, 3, 2], -1.1, 1.1, &mut rng);
    let sample = |g: &mut Graph, v: &[Var]| {
        let s = g.bilinear_sample(v[0], v[1])?;
        project(g, s, 11)
    };
    let errs = finite_diff_check_many(sample, &[feats.clone(), grid.clone()], 1e-4, None)?;
    rows.push(CheckRow {
        name: "bilinear_sample.features".into(),
        max_rel_err: errs[0],
        tolerance: SMOOTH_TOL,
    });
    let errs = finite_diff_check_many(sample, &[feats, grid], 1e-6, None)?;
    rows.push(CheckRow {
        name: "bilinear_sample.grid".into(),
        max_rel_err: errs[1],
        tolerance: KINKED_TOL,
    });
    let theta = Tensor::new(&[2, 4], vec![0.953, 0.117, 0.031, -0.043, 1.021, -0.213, 0.097, 0.011])?;
    rows.push(row("affine_grid", SMOOTH_TOL, 1e-4, None, std::slice::from_ref(&theta), |g, v| {
        let grid = g.affine_grid(v[0], 4, 5)?;
        project(g, grid, 12)
    })?);
    let img = uniform(&[2, 2, 8, 8], 0.0, 1.0, &mut rng);
    rows.push(row("affine_grid+sample", KINKED_TOL, 1e-6, None, &[img, theta], |g, v| {
        let grid = g.affine_grid(v[1], 8, 8)?;
        let s = g.bilinear_sample(v[0], grid)?;
        project(g, s, 13)
    })?);

    let psi = ConvStack::tiny_fixed(seed);
    let out = uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
    let target = uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
    rows.push(row("identity_loss", KINKED_TOL, 1e-7, Some(64), &[out, target], |g, v| {
        crate::losses::identity_loss_var(g, v[0], v[1], &psi)
    })?);

    rows.push(srn_row(seed)?);
    rows.push(dn_row(seed)?);
    Ok(rows)
}

fn network_row<F>(name: &str, params: &ModelParams, input: Tensor, h: f64, coords: usize, f: F) -> Result<CheckRow>
where
    F: Fn(&mut Ctx<'_>, Var) -> Result<Var>,
{
    let names: Vec<String> = params.params().keys().cloned().collect();
    let mut inputs = vec![input];
    inputs.extend(names.iter().map(|n| params.param(n).cloned()).collect::<Result<Vec<_>>>()?);
    row(name, KINKED_TOL, h, Some(coords), &inputs, |g, vars| {
        let bound = Bound::from_pairs(names.iter().cloned().zip(vars[1..].iter().copied()));
        let mut ctx = Ctx::new(g, &bound, params, Mode::Train);
        f(&mut ctx, vars[0])
    })
}

fn srn_row(seed: u64) -> Result<CheckRow> {
    let cfg = SrnConfig {
        resolution: 32,
        channels: [4, 6, 8, 8],
        use_stn: true,
    };
    let mut params = build_srn(&cfg, seed)?;
    // move the transformers off the identity so their localization nets get gradient
    let mut rng = stream(seed, 7);
    for i in 1..=4 {
        let w = params.param_mut(&format!("stn{i}.fc2.weight"))?;
        *w = uniform(w.shape(), -0.05, 0.05, &mut rng);
        *params.param_mut(&format!("stn{i}.fc2.bias"))? = Tensor::new(&[4], vec![0.97, 0.031, 0.013, -0.021])?;
    }
    let x = uniform(&[2, 3, 32, 32], 0.2, 0.8, &mut rng);
    network_row("srn", &params, x, 1e-7, 3, |ctx, x| {
        let y = srn_forward_var(ctx, &cfg, x)?;
        project(ctx.g, y, 14)
    })
}

fn dn_row(seed: u64) -> Result<CheckRow> {
    let cfg = DnConfig {
        resolution: 16,
        channels: [4, 6, 6, 8],
    };
    let params = build_dn(&cfg, seed)?;
    let x = uniform(&[3, 3, 16, 16], 0.0, 1.0, &mut stream(seed, 8));
    network_row("dn", &params, x, 1e-6, 6, |ctx, x| {
        let p = dn_forward_var(ctx, &cfg, x)?;
        ctx.g.neg_log_mean(p)
    })
}
