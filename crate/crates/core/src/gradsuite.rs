//! The gradient-check suite behind `gradcheck`: every graph op on small
//! random inputs, then the generator, discriminator and sparsity net
//! composed into the full training objective.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nets::{self, DiscriminatorConfig, GeneratorConfig, GeneratorVars};
use crate::sparsity::{self, Gates, SparsityConfig, SparsityVars};
use crate::tensor::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::training::{self, Models, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            _ => Err(Error::arg(format!("unknown scale {s:?} (desk or paper)"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        })
    }
}

impl Scale {
    pub fn generator(self) -> GeneratorConfig {
        match self {
            Scale::Desk => GeneratorConfig::desk(),
            Scale::Paper => GeneratorConfig::paper(),
        }
    }
}

/// Uniform values in `[-1, 1]` kept at least `gap` away from every kink.
fn away_from(shape: &[usize], kinks: &[f64], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.0..1.0);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

fn store(blocks: Vec<(&str, Tensor<f64>)>) -> Result<ParamStore<f64>> {
    let mut s = ParamStore::new();
    for (name, t) in blocks {
        s.push(name, t)?;
    }
    Ok(s)
}

/// `sum(y * r)` for a fixed random `r`, so no gradient is uniform.
fn probe_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.input(Tensor::randn(g.shape(y), 1.0, &mut rng));
    let p = g.mul(y, r)?;
    Ok(g.sum_all(p))
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn unary(f: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Build {
    Box::new(move |g, v| {
        let y = f(g, v[0])?;
        probe_sum(g, y, 1)
    })
}

fn binary(f: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Build {
    Box::new(move |g, v| {
        let y = f(g, v[0], v[1])?;
        probe_sum(g, y, 2)
    })
}

/// One check per differentiable op.
pub fn op_checks() -> Result<Vec<GradcheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x4 = [2, 3, 4, 4];
    let r = &mut rng;
    let cases: Vec<(&str, ParamStore<f64>, Build)> = vec![
        (
            "conv2d",
            store(vec![("x", away_from(&[2, 2, 6, 6], &[], 0.0, r)), ("w", away_from(&[3, 2, 4, 4], &[], 0.0, r))])?,
            binary(|g, x, w| g.conv2d(x, w, 2, 1)),
        ),
        (
            "conv_transpose2d",
            store(vec![("x", away_from(&[2, 3, 3, 3], &[], 0.0, r)), ("w", away_from(&[3, 2, 4, 4], &[], 0.0, r))])?,
            binary(|g, x, w| g.conv_transpose2d(x, w, 2, 1)),
        ),
        (
            "add_channel_bias",
            store(vec![("x", away_from(&x4, &[], 0.0, r)), ("b", away_from(&[3], &[], 0.0, r))])?,
            binary(|g, x, b| g.add_channel_bias(x, b)),
        ),
        (
            "mul_channel",
            store(vec![("x", away_from(&x4, &[], 0.0, r)), ("s", away_from(&[3], &[], 0.0, r))])?,
            binary(|g, x, s| g.mul_channel(x, s)),
        ),
        (
            "channel_mix",
            store(vec![("x", away_from(&x4, &[], 0.0, r)), ("w", away_from(&[5, 3], &[], 0.0, r))])?,
            binary(|g, x, w| g.channel_mix(x, w, false)),
        ),
        (
            "channel_mix_transposed",
            store(vec![("x", away_from(&x4, &[], 0.0, r)), ("w", away_from(&[3, 5], &[], 0.0, r))])?,
            binary(|g, x, w| g.channel_mix(x, w, true)),
        ),
        ("relu", store(vec![("x", away_from(&x4, &[0.0], 0.05, r))])?, unary(|g, x| Ok(g.relu(x)))),
        (
            "leaky_relu",
            store(vec![("x", away_from(&x4, &[0.0], 0.05, r))])?,
            unary(|g, x| Ok(g.leaky_relu(x, 0.2))),
        ),
        ("tanh", store(vec![("x", away_from(&x4, &[], 0.0, r))])?, unary(|g, x| Ok(g.tanh(x)))),
        ("sigmoid", store(vec![("x", away_from(&x4, &[], 0.0, r))])?, unary(|g, x| Ok(g.sigmoid(x)))),
        ("softplus", store(vec![("x", away_from(&x4, &[], 0.0, r))])?, unary(|g, x| Ok(g.softplus(x)))),
        ("exp", store(vec![("x", away_from(&x4, &[], 0.0, r))])?, unary(|g, x| Ok(g.exp(x)))),
        (
            "log_clamped",
            store(vec![("x", away_from(&x4, &[0.1], 0.05, r))])?,
            unary(|g, x| Ok(g.log_clamped(x, 0.1))),
        ),
        (
            "add",
            store(vec![("a", away_from(&x4, &[], 0.0, r)), ("b", away_from(&x4, &[], 0.0, r))])?,
            binary(|g, a, b| g.add(a, b)),
        ),
        (
            "sub",
            store(vec![("a", away_from(&x4, &[], 0.0, r)), ("b", away_from(&x4, &[], 0.0, r))])?,
            binary(|g, a, b| g.sub(a, b)),
        ),
        (
            "mul",
            store(vec![("a", away_from(&x4, &[], 0.0, r)), ("b", away_from(&x4, &[], 0.0, r))])?,
            binary(|g, a, b| g.mul(a, b)),
        ),
        ("scale", store(vec![("x", away_from(&x4, &[], 0.0, r))])?, unary(|g, x| Ok(g.scale(x, -1.7)))),
        (
            "add_scalar",
            store(vec![("x", away_from(&x4, &[], 0.0, r))])?,
            unary(|g, x| Ok(g.add_scalar(x, 0.3))),
        ),
        (
            "mul_scalar",
            store(vec![("x", away_from(&x4, &[], 0.0, r)), ("s", away_from(&[1], &[0.0], 0.1, r))])?,
            binary(|g, x, s| g.mul_scalar(x, s)),
        ),
        (
            "soft_threshold",
            store(vec![
                ("x", away_from(&x4, &[-0.3, 0.3], 0.05, r)),
                ("theta", Tensor::from_f64(&[1], &[0.3])?),
            ])?,
            binary(|g, x, t| g.soft_threshold(x, t)),
        ),
        (
            "reshape",
            store(vec![("x", away_from(&x4, &[], 0.0, r))])?,
            unary(|g, x| g.reshape(x, &[6, 16])),
        ),
        (
            "global_avg_pool",
            store(vec![("x", away_from(&x4, &[], 0.0, r))])?,
            unary(|g, x| g.global_avg_pool(x)),
        ),
        ("sum_all", store(vec![("x", away_from(&x4, &[], 0.0, r))])?, unary(|g, x| Ok(g.sum_all(x)))),
        ("mean_all", store(vec![("x", away_from(&x4, &[], 0.0, r))])?, unary(|g, x| Ok(g.mean_all(x)))),
        (
            "l1_norm",
            store(vec![("x", away_from(&x4, &[0.0], 0.05, r))])?,
            unary(|g, x| Ok(g.l1_norm(x))),
        ),
        ("l2_norm", store(vec![("x", away_from(&x4, &[], 0.0, r))])?, unary(|g, x| Ok(g.l2_norm(x)))),
        (
            "frobenius_sq",
            store(vec![("x", away_from(&x4, &[], 0.0, r))])?,
            unary(|g, x| Ok(g.frobenius_sq(x))),
        ),
    ];
    let opts = GradcheckOptions {
        max_checks_per_block: 24,
        ..GradcheckOptions::f64_default()
    };
    cases
        .into_iter()
        .map(|(name, blocks, build)| gradcheck(name, &blocks, |g, v| build(g, v), opts))
        .collect()
}

/// Generator, discriminator and sparsity net composed into the generator's
/// objective, plus the discriminator's own loss, on one random image.
pub fn composite_checks(scale: Scale, seed: u64) -> Result<Vec<GradcheckReport>> {
    let gcfg = scale.generator();
    let sc = SparsityConfig::for_latent(gcfg.latent_channels);
    let models = Models::with_sparsity(gcfg.clone(), sc, seed)?;
    let tc = TrainConfig::default();
    let dcfg = DiscriminatorConfig::for_generator(&gcfg);
    let (lre, ladv, lsp) = tc.effective_lambdas();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let side = gcfg.input_side;
    let image: Tensor<f64> = Tensor::randn(&[1, gcfg.input_channels, side, side], 0.5, &mut rng);

    let mut all = models.generator.params.cast::<f64>();
    let n_gen = all.len();
    all.extend(models.discriminator.params.cast::<f64>())?;
    let n_disc = all.len();
    all.extend(models.sparsity.cast::<f64>())?;

    let split = move |v: &[Var]| (v[..n_gen].to_vec(), v[n_gen..n_disc].to_vec(), v[n_disc..].to_vec());

    let opts = GradcheckOptions {
        max_checks_per_block: 6,
        ..GradcheckOptions::f64_default()
    };
    // The objective is near 1e3 at init; a 1e-6 step loses too many digits.
    let wide = GradcheckOptions { eps: 1e-5, ..opts };
    let (g_store, d_store, s_store) = (
        models.generator.params.cast::<f64>(),
        models.discriminator.params.cast::<f64>(),
        models.sparsity.cast::<f64>(),
    );
    let gen_cfg = gcfg.clone();
    let img = image.clone();
    let generator_objective = gradcheck(
        &format!("generator objective ({scale})"),
        &all,
        move |g, v| {
            let (gv, dv, sv) = split(v);
            let gp = GeneratorVars::lookup(&gen_cfg, &g_store, &gv)?;
            let dp = nets::DiscriminatorVars::lookup(&dcfg, &d_store, &dv)?;
            let sp = SparsityVars::lookup(&s_store, &sv)?;
            let x = g.input(img.clone());
            let h_in = nets::encode(g, &gen_cfg, &gp, x)?;
            let recon = nets::decode(g, &gen_cfg, &gp, h_in)?;
            let re = training::loss_reconstruction(g, x, recon)?;
            let fake = nets::discriminate_logits(g, &dcfg, &dp, recon)?;
            let adv = training::loss_adversarial_g_logits(g, fake)?;
            let sp_out = sparsity::sparsity_net_forward(g, h_in, &sp, sc.steps, Gates::Learned, sc.lambda)?;
            let re = g.scale(re, lre);
            let adv = g.scale(adv, ladv);
            let l = g.scale(sp_out.loss, lsp);
            let total = g.add(re, adv)?;
            g.add(total, l)
        },
        wide,
    )?;

    let dcfg = DiscriminatorConfig::for_generator(&gcfg);
    let d_store = models.discriminator.params.cast::<f64>();
    let fake: Tensor<f64> = Tensor::randn(image.shape(), 0.5, &mut rng);
    let discriminator_objective = gradcheck(
        &format!("discriminator objective ({scale})"),
        &d_store.clone(),
        move |g, v| {
            let dp = nets::DiscriminatorVars::lookup(&dcfg, &d_store, v)?;
            let real = g.input(image.clone());
            let fake = g.input(fake.clone());
            let pr = nets::discriminate_logits(g, &dcfg, &dp, real)?;
            let pf = nets::discriminate_logits(g, &dcfg, &dp, fake)?;
            training::loss_adversarial_d_logits(g, pr, pf)
        },
        opts,
    )?;
    Ok(vec![generator_objective, discriminator_objective])
}

/// Everything; `passed` on every report means the suite passed.
pub fn run(scale: Scale) -> Result<Vec<GradcheckReport>> {
    let mut reports = op_checks()?;
    reports.extend(composite_checks(scale, 7)?);
    Ok(reports)
}
