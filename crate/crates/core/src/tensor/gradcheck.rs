//! Central finite-difference verification of backward rules.
//!
//! Runs in f64 so truncation and rounding both stay far below the pass
//! tolerances. The relative error denominator is floored at 1e-5: when
//! the true derivative is zero (a bias absorbed by batch norm, say) the
//! numeric side is pure rounding noise of roughly eps * |loss| / (2h),
//! and the floor keeps that noise from registering as disagreement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ConvSpec, Mode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Worst element-level disagreement for one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub index: usize,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    /// The parameter holding the worst disagreement.
    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).expect("finite errors"))
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Indices to probe in a tensor of `len` elements: all of them when the
/// budget allows, otherwise an evenly strided subset including both ends.
fn probe_indices(len: usize, per_param: usize) -> Vec<usize> {
    if len <= per_param {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> =
        (0..per_param).map(|i| i * (len - 1) / (per_param - 1)).collect();
    idx.dedup();
    idx
}

/// Compare analytic gradients of every trainable parameter in `store`
/// against central finite differences of the scalar loss built by `build`.
///
/// `build` must be a pure function of the store contents: any randomness
/// inside (dropout masks, input draws) has to be replayed from fixed seeds.
/// Each parameter probes at most `per_param` elements (0 = all).
pub fn finite_diff_check<F>(
    store: &mut ParamStore<f64>,
    mut build: F,
    h: f64,
    per_param: usize,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore<f64>) -> Result<(Tape<f64>, Var)>,
{
    store.zero_grads();
    let (mut tape, loss) = build(store)?;
    let base = tape.value(loss).data()[0];
    if !base.is_finite() {
        return Err(Error::numeric(format!("loss is not finite: {base}")));
    }
    tape.backward(loss, store)?;

    let keys: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.kind() == ParamKind::Trainable)
        .map(|(k, p)| (k, p.name().to_string(), p.tensor.numel()))
        .collect();

    let mut params = Vec::with_capacity(keys.len());
    let mut max_rel_err = 0.0f64;
    let mut total_checked = 0usize;

    for (key, name, numel) in keys {
        let analytic: Vec<f64> = store
            .tensor(key)
            .grad()
            .ok_or_else(|| {
                Error::numeric(format!("parameter `{name}` received no gradient"))
            })?
            .to_vec();
        let probes =
            if per_param == 0 { (0..numel).collect() } else { probe_indices(numel, per_param) };

        let mut report = ParamReport {
            name: name.clone(),
            max_rel_err: 0.0,
            analytic: 0.0,
            numeric: 0.0,
            index: 0,
            checked: probes.len(),
        };
        for i in probes {
            let orig = store.tensor(key).data()[i];
            store.tensor_mut(key).data_mut()[i] = orig + h;
            let (tape_p, loss_p) = build(store)?;
            let f_plus = tape_p.value(loss_p).data()[0];
            store.tensor_mut(key).data_mut()[i] = orig - h;
            let (tape_m, loss_m) = build(store)?;
            let f_minus = tape_m.value(loss_m).data()[0];
            store.tensor_mut(key).data_mut()[i] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::numeric(format!(
                    "perturbed loss not finite at `{name}`[{i}]"
                )));
            }
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let e = rel_err(analytic[i], numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.analytic = analytic[i];
                report.numeric = numeric;
                report.index = i;
            }
            total_checked += 1;
        }
        max_rel_err = max_rel_err.max(report.max_rel_err);
        params.push(report);
    }

    Ok(GradCheckReport { params, max_rel_err, checked: total_checked })
}

/// Draw values uniform in [-1, 1] but re-draw anything within `margin` of
/// zero, keeping kinked ops (relu, max pool) away from their non-smooth
/// points at finite-difference step sizes.
fn kink_safe(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() > margin {
                break v;
            }
        })
        .collect()
}

/// One primitive-layer check: the layer under test wrapped into a scalar
/// loss, with both its inputs and weights registered as probed parameters.
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Finite-difference every layer primitive at one seed. Inputs are
/// registered in a throwaway store so the checker probes them exactly like
/// weights. Returns per-primitive worst errors.
pub fn check_primitives(seed: u64) -> Result<Vec<PrimitiveCheck>> {
    // Step small enough that a 1e-2 kink margin cannot be crossed.
    let h = 1e-5;
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // conv2d: 2 samples, 2->3 channels, 5x5 input, k3 s1 p1.
    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let spec = ConvSpec::new(2, 3, 3, 1, 1);
        let x = Tensor::new(vec![2, 2, 5, 5], kink_safe(&mut rng, 100, 0.0))?;
        let xk = store.add_trainable("input", x)?;
        let (wk, bk) = store.add_conv("conv", &spec, &mut rng)?;
        let labels = [1usize, 2];
        let report = finite_diff_check(
            &mut store,
            |store| {
                let mut tape = Tape::new(Mode::Train);
                let x = tape.param(store, xk);
                let w = tape.param(store, wk);
                let b = tape.param(store, bk);
                let y = tape.conv2d(x, w, b, &spec)?;
                let gap = tape.global_avg_pool(y)?;
                let loss = tape.cross_entropy(gap, &labels)?;
                Ok((tape, loss))
            },
            h,
            0,
        )?;
        out.push(PrimitiveCheck { name: "conv2d", max_rel_err: report.max_rel_err });
    }

    // dense.
    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let x = Tensor::new(vec![3, 6], kink_safe(&mut rng, 18, 0.0))?;
        let xk = store.add_trainable("input", x)?;
        let (wk, bk) = store.add_dense("fc", 6, 4, &mut rng)?;
        let labels = [0usize, 3, 1];
        let report = finite_diff_check(
            &mut store,
            |store| {
                let mut tape = Tape::new(Mode::Train);
                let x = tape.param(store, xk);
                let w = tape.param(store, wk);
                let b = tape.param(store, bk);
                let y = tape.dense(x, w, b)?;
                let loss = tape.cross_entropy(y, &labels)?;
                Ok((tape, loss))
            },
            h,
            0,
        )?;
        out.push(PrimitiveCheck { name: "dense", max_rel_err: report.max_rel_err });
    }

    // batch_norm in both modes, on a 4-D input.
    for (mode, name) in [(Mode::Train, "batch_norm(train)"), (Mode::Eval, "batch_norm(eval)")] {
        let mut store: ParamStore<f64> = ParamStore::new();
        let x = Tensor::new(vec![3, 2, 3, 3], kink_safe(&mut rng, 54, 0.0))?;
        let xk = store.add_trainable("input", x)?;
        let keys = store.add_batchnorm("bn", 2)?;
        // Non-trivial gamma/beta and running stats so eval mode is exercised.
        for v in store.tensor_mut(keys.gamma).data_mut() {
            *v = 1.3;
        }
        for v in store.tensor_mut(keys.beta).data_mut() {
            *v = -0.2;
        }
        store.tensor_mut(keys.running_mean).data_mut().copy_from_slice(&[0.1, -0.3]);
        store.tensor_mut(keys.running_var).data_mut().copy_from_slice(&[0.8, 1.4]);
        let labels = [0usize, 1, 0];
        let report = finite_diff_check(
            &mut store,
            |store| {
                let mut tape = Tape::new(mode);
                let x = tape.param(store, xk);
                let y = tape.batch_norm(store, x, &keys, 1e-5, 0.1)?;
                let gap = tape.global_avg_pool(y)?;
                let loss = tape.cross_entropy(gap, &labels)?;
                Ok((tape, loss))
            },
            h,
            0,
        )?;
        out.push(PrimitiveCheck { name, max_rel_err: report.max_rel_err });
    }

    // relu with a kink margin.
    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let x = Tensor::new(vec![2, 2, 4, 4], kink_safe(&mut rng, 64, 1e-2))?;
        let xk = store.add_trainable("input", x)?;
        let labels = [0usize, 1];
        let report = finite_diff_check(
            &mut store,
            |store| {
                let mut tape = Tape::new(Mode::Train);
                let x = tape.param(store, xk);
                let y = tape.relu(x);
                let gap = tape.global_avg_pool(y)?;
                let loss = tape.cross_entropy(gap, &labels)?;
                Ok((tape, loss))
            },
            h,
            0,
        )?;
        out.push(PrimitiveCheck { name: "relu", max_rel_err: report.max_rel_err });
    }

    // avg pool, max pool (max pool needs well-separated values).
    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let x = Tensor::new(vec![2, 2, 6, 6], kink_safe(&mut rng, 144, 0.0))?;
        let xk = store.add_trainable("input", x)?;
        let labels = [1usize, 0];
        let report = finite_diff_check(
            &mut store,
            |store| {
                let mut tape = Tape::new(Mode::Train);
                let x = tape.param(store, xk);
                let y = tape.avg_pool2d(x, 2, 2)?;
                let gap = tape.global_avg_pool(y)?;
                let loss = tape.cross_entropy(gap, &labels)?;
                Ok((tape, loss))
            },
            h,
            0,
        )?;
        out.push(PrimitiveCheck { name: "avg_pool2d", max_rel_err: report.max_rel_err });
    }
    {
        let mut store: ParamStore<f64> = ParamStore::new();
        // Distinct spaced values keep window maxima unambiguous under +-h.
        let n = 72;
        let mut vals = kink_safe(&mut rng, n, 0.0);
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let spread: Vec<f64> = order.iter().map(|&r| vals[r] + r as f64 * 0.05).collect();
        let x = Tensor::new(vec![2, 1, 6, 6], spread)?;
        let xk = store.add_trainable("input", x)?;
        let report = finite_diff_check(
            &mut store,
            |store| {
                let mut tape = Tape::new(Mode::Train);
                let x = tape.param(store, xk);
                let y = tape.max_pool2d(x, 3, 1, 1)?;
                let scaled = tape.scale(y, 0.25);
                let loss = tape.sum_all(scaled);
                Ok((tape, loss))
            },
            h,
            0,
        )?;
        out.push(PrimitiveCheck { name: "max_pool2d", max_rel_err: report.max_rel_err });
    }

    // softmax + explicit nll composition via scale/add path.
    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let x = Tensor::new(vec![3, 5], kink_safe(&mut rng, 15, 0.0))?;
        let xk = store.add_trainable("input", x)?;
        let labels = [4usize, 0, 2];
        let report = finite_diff_check(
            &mut store,
            |store| {
                let mut tape = Tape::new(Mode::Train);
                let x = tape.param(store, xk);
                let s = tape.softmax(x)?;
                let loss = tape.cross_entropy(s, &labels)?;
                Ok((tape, loss))
            },
            h,
            0,
        )?;
        out.push(PrimitiveCheck { name: "softmax", max_rel_err: report.max_rel_err });
    }

    // dropout with a replayed mask.
    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let x = Tensor::new(vec![2, 10], kink_safe(&mut rng, 20, 0.0))?;
        let xk = store.add_trainable("input", x)?;
        let labels = [3usize, 7];
        let mask_seed = seed ^ 0xd509;
        let report = finite_diff_check(
            &mut store,
            |store| {
                let mut tape = Tape::new(Mode::Train);
                let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                let x = tape.param(store, xk);
                let y = tape.dropout(x, 0.4, &mut mask_rng)?;
                let loss = tape.cross_entropy(y, &labels)?;
                Ok((tape, loss))
            },
            h,
            0,
        )?;
        out.push(PrimitiveCheck { name: "dropout", max_rel_err: report.max_rel_err });
    }

    // global_avg_pool, concat, add, scale, channel_scale in one graph.
    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.add_trainable("a", Tensor::new(vec![2, 2, 3, 3], kink_safe(&mut rng, 36, 0.0))?)?;
        let b = store.add_trainable("b", Tensor::new(vec![2, 1, 3, 3], kink_safe(&mut rng, 18, 0.0))?)?;
        let gk = store.add_trainable("gate", Tensor::new(vec![2, 3], kink_safe(&mut rng, 6, 0.0))?)?;
        let labels = [2usize, 1];
        let report = finite_diff_check(
            &mut store,
            |store| {
                let mut tape = Tape::new(Mode::Train);
                let av = tape.param(store, a);
                let bv = tape.param(store, b);
                let gate = tape.param(store, gk);
                let cat = tape.concat_channels(&[av, bv])?;
                let doubled = tape.add(cat, cat)?;
                let scaled = tape.scale(doubled, 0.7);
                let gated = tape.channel_scale(scaled, gate)?;
                let gap = tape.global_avg_pool(gated)?;
                let loss = tape.cross_entropy(gap, &labels)?;
                Ok((tape, loss))
            },
            h,
            0,
        )?;
        out.push(PrimitiveCheck { name: "concat/add/scale/channel_scale", max_rel_err: report.max_rel_err });
    }

    Ok(out)
}
