//! Sparse coding of latent features.
//!
//! The LASSO problem solved at every latent position is
//! `min_s ||h - W^T s||^2 + lambda * ||s||_1` with `W` the `[atoms, channels]`
//! dictionary. [`ista`] and [`lasso_oracle`] are plain solvers used for
//! validation; [`sparsity_net_forward`] is the differentiable, gated, unrolled
//! variant that regularizes the generator's latent.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{
    from_channel_major, nchw, to_channel_major, Element, Graph, ParamStore, Tensor, Var,
};

/// Name prefix of every sparsity-net parameter.
pub const PREFIX: &str = "sparsity/";
pub const DICTIONARY: &str = "sparsity/dictionary";
pub const FORGET_WEIGHT: &str = "sparsity/forget.weight";
pub const FORGET_BIAS: &str = "sparsity/forget.bias";
pub const INPUT_WEIGHT: &str = "sparsity/input.weight";
pub const INPUT_BIAS: &str = "sparsity/input.bias";
pub const LOG_THETA: &str = "sparsity/log_theta";
pub const LOG_ETA: &str = "sparsity/log_eta";

/// Largest oracle problem, in atoms.
pub const ORACLE_MAX_ATOMS: usize = 8;

/// `sign(x) * max(|x| - theta, 0)`, elementwise.
pub fn soft_threshold<T: Element>(x: &Tensor<T>, theta: f64) -> Result<Tensor<T>> {
    if !(theta > 0.0) {
        return Err(Error::arg(format!("soft_threshold needs theta > 0, got {theta}")));
    }
    let t = T::from_f64_lossy(theta);
    let data = x.data().iter().map(|&v| crate::tensor::shrink(v, t)).collect();
    Tensor::new(x.shape(), data)
}

fn dictionary_dims<T: Element>(w: &Tensor<T>) -> Result<(usize, usize)> {
    match *w.shape() {
        [a, c] => Ok((a, c)),
        ref s => Err(Error::shape(format!("dictionary must be [atoms, channels], got {s:?}"))),
    }
}

fn to_matrix<T: Element>(w: &Tensor<T>) -> Result<DMatrix<f64>> {
    let (a, c) = dictionary_dims(w)?;
    Ok(DMatrix::from_iterator(
        c,
        a,
        w.data().iter().map(|v| v.as_f64()),
    )
    .transpose())
}

/// Latent `[n, c, h, w]` as a `c x (n*h*w)` matrix.
fn latent_matrix<T: Element>(h: &Tensor<T>) -> Result<(DMatrix<f64>, [usize; 4])> {
    let dims = nchw(h.shape(), "latent")?;
    let [n, c, hh, ww] = dims;
    let p = hh * ww;
    let flat = to_channel_major(h.data(), n, c, p);
    let m = DMatrix::from_iterator(n * p, c, flat.iter().map(|v| v.as_f64())).transpose();
    Ok((m, dims))
}

fn code_tensor<T: Element>(s: &DMatrix<f64>, n: usize, hh: usize, ww: usize) -> Result<Tensor<T>> {
    let a = s.nrows();
    let row_major: Vec<T> = s
        .transpose()
        .as_slice()
        .iter()
        .map(|&v| T::from_f64_lossy(v))
        .collect();
    Tensor::new(&[n, a, hh, ww], from_channel_major(&row_major, n, a, hh * ww))
}

/// Largest eigenvalue of `W W^T`, by power iteration.
pub fn lipschitz<T: Element>(w: &Tensor<T>) -> Result<f64> {
    let m = to_matrix(w)?;
    Ok(power_iteration(&(&m * m.transpose())))
}

fn power_iteration(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    // Fixed, non-symmetric start so no eigenvector is missed by construction.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618_033_988_7).fract());
    v.normalize_mut();
    let mut estimate = 0.0;
    for _ in 0..10_000 {
        let next = g * &v;
        let rayleigh = v.dot(&next);
        let norm = next.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = next / norm;
        if (rayleigh - estimate).abs() <= 1e-14 * rayleigh.abs() {
            return rayleigh;
        }
        estimate = rayleigh;
    }
    estimate
}

fn objective_of(h: &DMatrix<f64>, w: &DMatrix<f64>, s: &DMatrix<f64>, lambda: f64) -> f64 {
    let r = h - w.transpose() * s;
    r.norm_squared() + lambda * s.iter().map(|v| v.abs()).sum::<f64>()
}

/// `||H - W^T s||_F^2 + lambda * ||s||_1`, summed over the batch.
pub fn sparse_objective<T: Element>(
    h: &Tensor<T>,
    w: &Tensor<T>,
    code: &Tensor<T>,
    lambda: f64,
) -> Result<f64> {
    let (hm, [n, c, hh, ww]) = latent_matrix(h)?;
    let wm = to_matrix(w)?;
    let (a, wc) = dictionary_dims(w)?;
    if wc != c || code.shape() != [n, a, hh, ww] {
        return Err(Error::shape(format!(
            "objective: latent {:?}, dictionary {:?}, code {:?}",
            h.shape(),
            w.shape(),
            code.shape()
        )));
    }
    let (sm, _) = latent_matrix(code)?;
    Ok(objective_of(&hm, &wm, &sm, lambda))
}

#[derive(Clone, Debug)]
pub struct IstaResult<T: Element> {
    /// `[n, atoms, h, w]`.
    pub code: Tensor<T>,
    /// Objective at the zero start and after every iteration.
    pub objectives: Vec<f64>,
    pub step: f64,
}

impl<T: Element> IstaResult<T> {
    pub fn objective(&self) -> f64 {
        *self.objectives.last().expect("start objective is always recorded")
    }
}

/// ISTA from a zero code with step `1 / L`, `L` the largest eigenvalue of `W W^T`.
pub fn ista<T: Element>(
    h: &Tensor<T>,
    w: &Tensor<T>,
    lambda: f64,
    iters: usize,
) -> Result<IstaResult<T>> {
    let l = lipschitz(w)?;
    if !(l > 0.0) {
        return Err(Error::arg("dictionary is zero"));
    }
    ista_with_step(h, w, lambda, iters, 1.0 / l)
}

/// ISTA with an explicit step. Fails as soon as the objective rises by more
/// than `1e-6`, which is what too large a step produces.
pub fn ista_with_step<T: Element>(
    h: &Tensor<T>,
    w: &Tensor<T>,
    lambda: f64,
    iters: usize,
    step: f64,
) -> Result<IstaResult<T>> {
    if iters == 0 {
        return Err(Error::arg("ista needs at least one iteration"));
    }
    if !(lambda >= 0.0) || !(step > 0.0) {
        return Err(Error::arg(format!("ista: lambda {lambda}, step {step}")));
    }
    let (hm, [n, c, hh, ww]) = latent_matrix(h)?;
    let wm = to_matrix(w)?;
    if wm.ncols() != c {
        return Err(Error::shape(format!(
            "ista: dictionary {:?} vs latent {:?}",
            w.shape(),
            h.shape()
        )));
    }
    let threshold = lambda * step / 2.0;
    let mut s = DMatrix::zeros(wm.nrows(), hm.ncols());
    let mut objectives = Vec::with_capacity(iters + 1);
    objectives.push(objective_of(&hm, &wm, &s, lambda));
    for it in 1..=iters {
        let grad = &wm * (&hm - wm.transpose() * &s);
        s += grad * step;
        s.apply(|v| *v = crate::tensor::shrink(*v, threshold));
        let f = objective_of(&hm, &wm, &s, lambda);
        let before = objectives[it - 1];
        if !f.is_finite() || f > before + 1e-6 {
            return Err(Error::StepSize {
                iteration: it,
                before,
                after: f,
            });
        }
        objectives.push(f);
    }
    Ok(IstaResult {
        code: code_tensor(&s, n, hh, ww)?,
        objectives,
        step,
    })
}

/// Exact LASSO minimizer of `||h - W^T s||^2 + lambda * ||s||_1` by enumerating
/// every support and sign pattern and solving its stationarity equations.
pub fn lasso_oracle(h: &[f64], w: &Tensor<f64>, lambda: f64) -> Result<Vec<f64>> {
    let (a, c) = dictionary_dims(w)?;
    if a > ORACLE_MAX_ATOMS {
        return Err(Error::arg(format!(
            "lasso oracle supports at most {ORACLE_MAX_ATOMS} atoms, got {a}"
        )));
    }
    if h.len() != c {
        return Err(Error::shape(format!(
            "lasso oracle: h has {} entries, dictionary {:?}",
            h.len(),
            w.shape()
        )));
    }
    let wm = to_matrix(w)?;
    let hv = DMatrix::from_column_slice(c, 1, h);
    let wh = &wm * &hv;

    let mut best = DMatrix::zeros(a, 1);
    let mut best_f = objective_of(&hv, &wm, &best, lambda);
    for support in 1u32..(1 << a) {
        let idx: Vec<usize> = (0..a).filter(|&i| support & (1 << i) != 0).collect();
        let k = idx.len();
        let ws = wm.select_rows(&idx);
        let gram = &ws * ws.transpose();
        let lu = gram.lu();
        for signs in 0u32..(1 << k) {
            let sigma = |j: usize| if signs & (1 << j) != 0 { -1.0 } else { 1.0 };
            let rhs = DVector::from_fn(k, |j, _| wh[idx[j]] - lambda / 2.0 * sigma(j));
            let Some(sol) = lu.solve(&rhs) else { continue };
            if (0..k).any(|j| sol[j] * sigma(j) <= 0.0) {
                continue;
            }
            let mut s = DMatrix::zeros(a, 1);
            for (j, &i) in idx.iter().enumerate() {
                s[i] = sol[j];
            }
            let f = objective_of(&hv, &wm, &s, lambda);
            if f < best_f {
                best_f = f;
                best = s;
            }
        }
    }
    Ok(best.as_slice().to_vec())
}

/// Rescales each atom (row) to unit norm; zero rows are redrawn first.
pub fn project_dictionary<T: Element, R: Rng + ?Sized>(w: &mut Tensor<T>, rng: &mut R) -> Result<()> {
    let (_, c) = dictionary_dims(w)?;
    for row in w.data_mut().chunks_mut(c) {
        let mut norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if !(norm > 1e-12) || !norm.is_finite() {
            for v in row.iter_mut() {
                *v = T::from_f64_lossy(rng.sample(StandardNormal));
            }
            norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        }
        for v in row.iter_mut() {
            *v = T::from_f64_lossy(v.as_f64() / norm);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsityConfig {
    /// Unrolled steps K.
    pub steps: usize,
    pub atoms: usize,
    pub theta_init: f64,
    /// Weight of the l1 term in the regularizer.
    pub lambda: f64,
}

impl SparsityConfig {
    pub fn for_latent(channels: usize) -> Self {
        SparsityConfig {
            steps: 3,
            atoms: 2 * channels,
            theta_init: 0.1,
            lambda: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.atoms == 0 {
            return Err(Error::arg("sparsity net needs steps >= 1 and atoms >= 1"));
        }
        if !(self.theta_init > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::arg(format!(
                "sparsity net: theta_init {} must be > 0 and lambda {} >= 0",
                self.theta_init, self.lambda
            )));
        }
        Ok(())
    }
}

/// Fresh sparsity-net parameters for a latent with `channels` channels.
pub fn init_params<R: Rng + ?Sized>(
    cfg: &SparsityConfig,
    channels: usize,
    rng: &mut R,
) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let a = cfg.atoms;
    let mut dict = Tensor::randn(&[a, channels], 1.0, rng);
    project_dictionary(&mut dict, rng)?;
    let eta = 1.0 / lipschitz(&dict)?;

    let mut store = ParamStore::new();
    store.push(DICTIONARY, dict)?;
    store.push(FORGET_WEIGHT, Tensor::randn(&[a, a], 0.01, rng))?;
    store.push(FORGET_BIAS, Tensor::full(&[a], -3.0))?;
    store.push(INPUT_WEIGHT, Tensor::randn(&[a, a], 0.01, rng))?;
    store.push(INPUT_BIAS, Tensor::full(&[a], 3.0))?;
    store.push(LOG_THETA, Tensor::from_f64(&[1], &[cfg.theta_init.ln()])?)?;
    store.push(LOG_ETA, Tensor::from_f64(&[1], &[eta.ln()])?)?;
    Ok(store)
}

/// Graph handles of the sparsity-net parameters.
#[derive(Clone, Copy, Debug)]
pub struct SparsityVars {
    pub dictionary: Var,
    pub forget_weight: Var,
    pub forget_bias: Var,
    pub input_weight: Var,
    pub input_bias: Var,
    pub log_theta: Var,
    pub log_eta: Var,
}

impl SparsityVars {
    /// Picks the sparsity entries out of `store`, whose leaves are `bound`.
    pub fn lookup<T: Element>(store: &ParamStore<T>, bound: &[Var]) -> Result<Self> {
        let find = |name: &str| {
            store
                .index_of(name)
                .and_then(|i| bound.get(i).copied())
                .ok_or_else(|| Error::arg(format!("missing parameter {name}")))
        };
        Ok(SparsityVars {
            dictionary: find(DICTIONARY)?,
            forget_weight: find(FORGET_WEIGHT)?,
            forget_bias: find(FORGET_BIAS)?,
            input_weight: find(INPUT_WEIGHT)?,
            input_bias: find(INPUT_BIAS)?,
            log_theta: find(LOG_THETA)?,
            log_eta: find(LOG_ETA)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gates {
    Learned,
    /// Forget gate 0, input gate 1: every step is a plain ISTA step.
    Open,
}

#[derive(Clone, Copy, Debug)]
pub struct SparseOutput {
    /// `[n, atoms, h, w]`.
    pub code: Var,
    /// Batch mean of `||H - W^T s||_F^2 + lambda * ||s||_1`.
    pub loss: Var,
}

/// Runs `steps` gated shrinkage steps from a zero code:
///
/// ```text
/// cand = code + eta * W (H - W^T code)
/// cell = f * cell + i * cand,   f = sig(F code + b_f),  i = sig(I code + b_i)
/// code = soft(cell, theta)
/// ```
pub fn sparsity_net_forward<T: Element>(
    g: &mut Graph<T>,
    h: Var,
    p: &SparsityVars,
    steps: usize,
    gates: Gates,
    lambda: f64,
) -> Result<SparseOutput> {
    if steps == 0 {
        return Err(Error::arg("sparsity net needs at least one step"));
    }
    let [n, c, hh, ww] = nchw(g.shape(h), "sparsity net latent")?;
    let a = match *g.shape(p.dictionary) {
        [a, dc] if dc == c => a,
        ref s => {
            return Err(Error::shape(format!(
                "sparsity net: dictionary {s:?} vs latent {:?}",
                g.shape(h)
            )))
        }
    };
    let theta = g.exp(p.log_theta);
    let eta = g.exp(p.log_eta);

    let mut code = g.input(Tensor::zeros(&[n, a, hh, ww]));
    let mut cell = code;
    for k in 0..steps {
        let recon = g.channel_mix(code, p.dictionary, true)?;
        let resid = g.sub(h, recon)?;
        let corr = g.channel_mix(resid, p.dictionary, false)?;
        let corr = g.mul_scalar(corr, eta)?;
        let cand = g.add(code, corr)?;
        cell = match gates {
            Gates::Open => cand,
            Gates::Learned => {
                let f = g.channel_mix(code, p.forget_weight, false)?;
                let f = g.add_channel_bias(f, p.forget_bias)?;
                let f = g.sigmoid(f);
                let i = g.channel_mix(code, p.input_weight, false)?;
                let i = g.add_channel_bias(i, p.input_bias)?;
                let i = g.sigmoid(i);
                let kept = g.mul(f, cell)?;
                let fresh = g.mul(i, cand)?;
                g.add(kept, fresh)?
            }
        };
        code = g.soft_threshold(cell, theta)?;
        if !g.value(code).all_finite() {
            return Err(Error::Numeric(format!("sparsity net code at step {k}")));
        }
    }
    let recon = g.channel_mix(code, p.dictionary, true)?;
    let resid = g.sub(h, recon)?;
    let fit = g.frobenius_sq(resid);
    let l1 = g.l1_norm(code);
    let l1 = g.scale(l1, lambda);
    let total = g.add(fit, l1)?;
    let loss = g.scale(total, 1.0 / n as f64);
    if !g.value(loss).all_finite() {
        return Err(Error::Numeric(format!("sparsity loss after step {}", steps - 1)));
    }
    Ok(SparseOutput { code, loss })
}
