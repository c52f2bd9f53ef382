//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    /// Perturbation half-width.
    pub eps: f64,
    pub tolerance: f64,
    /// Gradient magnitude below which errors are measured absolutely.
    pub abs_floor: f64,
    /// Coordinates sampled per block; blocks at most this large are checked exhaustively.
    pub max_checks_per_block: usize,
    pub seed: u64,
}

impl GradcheckOptions {
    /// Settings for `f64` checks.
    pub fn f64_default() -> Self {
        GradcheckOptions {
            eps: 1e-6,
            tolerance: 1e-3,
            abs_floor: 1e-6,
            max_checks_per_block: 12,
            seed: 0,
        }
    }

    /// Settings for `f32` checks; wider step, coarser floor.
    pub fn f32_default() -> Self {
        GradcheckOptions {
            eps: 1e-2,
            tolerance: 1e-3,
            abs_floor: 1e-2,
            max_checks_per_block: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub label: String,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(
            f,
            "{verdict} {} (max rel err {:.3e}, tol {:.0e})",
            self.label,
            self.max_rel_err(),
            self.tolerance
        )?;
        for b in &self.blocks {
            writeln!(f, "    {:<32} n={:<3} {:.3e}", b.name, b.checked, b.max_rel_err)?;
        }
        Ok(())
    }
}

/// Relative error with an absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of `build`'s scalar output against central
/// differences, for every tensor in `blocks`.
///
/// `build` receives the graph and one bound leaf per block, in store order.
pub fn gradcheck<T, F>(
    label: &str,
    blocks: &ParamStore<T>,
    build: F,
    opts: GradcheckOptions,
) -> Result<GradcheckReport>
where
    T: Element,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item().as_f64())
    };

    let mut g = Graph::new();
    let vars = blocks.bind(&mut g);
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = blocks.clone();
    let mut reports = Vec::with_capacity(blocks.len());
    for (b, (name, tensor)) in blocks.iter().enumerate() {
        let n = tensor.numel();
        let analytic: Vec<f64> = match grads.get(vars[b]) {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; n],
        };
        let coords: Vec<usize> = if n <= opts.max_checks_per_block {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_checks_per_block).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst = 0.0f64;
        for &i in &coords {
            let orig = probe.get(b).data()[i];
            let eps = T::from_f64_lossy(opts.eps);
            probe.get_mut(b).data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(b).data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(b).data_mut()[i] = orig;
            // Use the realized perturbation, which differs from eps in f32.
            let width = ((orig + eps) - (orig - eps)).as_f64();
            let numeric = (plus - minus) / width;
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!("finite difference for {name}[{i}]")));
            }
            worst = worst.max(relative_error(analytic[i], numeric, opts.abs_floor));
        }
        reports.push(BlockReport {
            name: name.to_string(),
            checked: coords.len(),
            max_rel_err: worst,
        });
    }
    Ok(GradcheckReport {
        label: label.to_string(),
        tolerance: opts.tolerance,
        blocks: reports,
    })
}
