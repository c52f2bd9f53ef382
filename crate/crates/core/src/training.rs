//! Joint optimization of generator, discriminator and sparsity net, with the
//! mode switches used for ablations.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{tensor_u64, u64_tensor, Checkpoint};
use crate::error::{Error, Result};
use crate::nets::{
    decode, discriminate_logits, encode, Discriminator, DiscriminatorConfig, DiscriminatorVars, Generator,
    GeneratorConfig, GeneratorVars,
};
use crate::scoring::{self, ScoreMode};
use crate::sparsity::{self, Gates, SparsityConfig, SparsityVars};
use crate::synth::{mix, Sample};
use crate::tensor::{adam_step_own_grads, AdamState};
use crate::tensor::{Element, Graph, ParamStore, Tensor, Var};

/// Floor applied to log arguments in the adversarial losses.
pub const LOG_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Reconstruction only, scored in image space.
    Autoencoder,
    /// GAN, scored in image space.
    GanImage,
    /// GAN, scored in latent space.
    GanLatent,
    /// GAN with the sparsity regularizer, scored in latent space.
    SparseGan,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Autoencoder, Mode::GanImage, Mode::GanLatent, Mode::SparseGan];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Autoencoder => "autoencoder",
            Mode::GanImage => "gan_image",
            Mode::GanLatent => "gan_latent",
            Mode::SparseGan => "sparse_gan",
        }
    }

    pub fn uses_discriminator(self) -> bool {
        self != Mode::Autoencoder
    }

    pub fn uses_sparsity(self) -> bool {
        self == Mode::SparseGan
    }

    pub fn score_mode(self) -> ScoreMode {
        match self {
            Mode::Autoencoder | Mode::GanImage => ScoreMode::Image,
            Mode::GanLatent | Mode::SparseGan => ScoreMode::Latent,
        }
    }

    fn index(self) -> usize {
        Mode::ALL.iter().position(|&m| m == self).expect("listed")
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_re: f64,
    pub lambda_adv: f64,
    pub lambda_sp: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Adam first-moment decay, shared by all three optimizers.
    pub beta1: f64,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_re: 20.0,
            lambda_adv: 1.0,
            lambda_sp: 50.0,
            batch_size: 32,
            learning_rate: 0.001,
            beta1: 0.5,
            epochs: 30,
            seed: 7,
            mode: Mode::SparseGan,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_re", self.lambda_re),
            ("lambda_adv", self.lambda_adv),
            ("lambda_sp", self.lambda_sp),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::arg(format!("beta1 {} outside [0, 1)", self.beta1)));
        }
        Ok(())
    }

    /// `(lambda_re, lambda_adv, lambda_sp)` with the terms the mode disables set to 0.
    pub fn effective_lambdas(&self) -> (f64, f64, f64) {
        let adv = if self.mode.uses_discriminator() { self.lambda_adv } else { 0.0 };
        let sp = if self.mode.uses_sparsity() { self.lambda_sp } else { 0.0 };
        (self.lambda_re, adv, sp)
    }
}

/// Mean squared pixel error over the batch.
pub fn loss_reconstruction<T: Element>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

fn check_scores<T: Element>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    match g.value(v).data().iter().find(|s| !(0.0..=1.0).contains(&s.as_f64())) {
        Some(s) => Err(Error::Numeric(format!("{what} score {} outside [0, 1]", s.as_f64()))),
        None => Ok(()),
    }
}

/// `-(mean log D(real) + mean log(1 - D(fake)))`.
pub fn loss_adversarial_d<T: Element>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    check_scores(g, real, "real")?;
    check_scores(g, fake, "fake")?;
    let lr = g.log_clamped(real, LOG_FLOOR);
    let lr = g.mean_all(lr);
    let flipped = g.scale(fake, -1.0);
    let flipped = g.add_scalar(flipped, 1.0);
    let lf = g.log_clamped(flipped, LOG_FLOOR);
    let lf = g.mean_all(lf);
    let sum = g.add(lr, lf)?;
    Ok(g.scale(sum, -1.0))
}

/// Non-saturating generator loss `-mean log D(fake)`.
pub fn loss_adversarial_g<T: Element>(g: &mut Graph<T>, fake: Var) -> Result<Var> {
    check_scores(g, fake, "fake")?;
    let l = g.log_clamped(fake, LOG_FLOOR);
    let l = g.mean_all(l);
    Ok(g.scale(l, -1.0))
}

/// [`loss_adversarial_d`] from discriminator logits; keeps its gradient
/// when the sigmoid saturates.
pub fn loss_adversarial_d_logits<T: Element>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let nr = g.scale(real, -1.0);
    let lr = g.softplus(nr);
    let lr = g.mean_all(lr);
    let lf = g.softplus(fake);
    let lf = g.mean_all(lf);
    g.add(lr, lf)
}

/// [`loss_adversarial_g`] from discriminator logits.
pub fn loss_adversarial_g_logits<T: Element>(g: &mut Graph<T>, fake: Var) -> Result<Var> {
    let nf = g.scale(fake, -1.0);
    let l = g.softplus(nf);
    Ok(g.mean_all(l))
}

/// Every trainable tensor of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub sparsity: ParamStore<f32>,
    pub sparsity_config: SparsityConfig,
}

impl Models {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        let sc = SparsityConfig::for_latent(config.latent_channels);
        Self::with_sparsity(config, sc, seed)
    }

    pub fn with_sparsity(config: GeneratorConfig, sc: SparsityConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dc = DiscriminatorConfig::for_generator(&config);
        let latent = config.latent_channels;
        Ok(Models {
            generator: Generator::new(config, &mut rng)?,
            discriminator: Discriminator::new(dc, &mut rng)?,
            sparsity: sparsity::init_params(&sc, latent, &mut rng)?,
            sparsity_config: sc,
        })
    }

    pub fn generator_config(&self) -> &GeneratorConfig {
        &self.generator.config
    }

    fn stores(&self) -> [&ParamStore<f32>; 3] {
        [&self.generator.params, &self.discriminator.params, &self.sparsity]
    }

    fn stores_mut(&mut self) -> [&mut ParamStore<f32>; 3] {
        [&mut self.generator.params, &mut self.discriminator.params, &mut self.sparsity]
    }

    /// Writes weights and the architecture echo into `ck`.
    pub fn write_to(&self, ck: &mut Checkpoint) -> Result<()> {
        let gc = &self.generator.config;
        let arch = [
            gc.input_side,
            gc.input_channels,
            gc.latent_channels,
            gc.downsample_factor,
            gc.base_channels,
        ];
        ck.insert("config/generator", Tensor::from_f64(&[5], &arch.map(|v| v as f64))?)?;
        let sc = &self.sparsity_config;
        ck.insert(
            "config/sparsity",
            Tensor::from_f64(&[4], &[sc.steps as f64, sc.atoms as f64, sc.theta_init, sc.lambda])?,
        )?;
        for store in self.stores() {
            for (name, t) in store.iter() {
                ck.insert(name, t.clone())?;
            }
        }
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch = ck.require("config/generator")?.data();
        let sp = ck.require("config/sparsity")?.data();
        if arch.len() != 5 || sp.len() != 4 {
            return Err(Error::Data("malformed architecture echo".into()));
        }
        let gc = GeneratorConfig {
            input_side: arch[0] as usize,
            input_channels: arch[1] as usize,
            latent_channels: arch[2] as usize,
            downsample_factor: arch[3] as usize,
            base_channels: arch[4] as usize,
        };
        let sc = SparsityConfig {
            steps: sp[0] as usize,
            atoms: sp[1] as usize,
            theta_init: sp[2] as f64,
            lambda: sp[3] as f64,
        };
        let mut m = Models::with_sparsity(gc, sc, 0)?;
        for store in m.stores_mut() {
            for i in 0..store.len() {
                let name = store.names()[i].clone();
                let t = ck.require(&name)?;
                if t.shape() != store.get(i).shape() {
                    return Err(Error::shape(format!(
                        "{name}: checkpoint {:?} vs model {:?}",
                        t.shape(),
                        store.get(i).shape()
                    )));
                }
                let mut t = t.clone();
                t.set_requires_grad(store.get(i).requires_grad());
                *store.get_mut(i) = t;
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepRecord {
    /// 1-based optimizer step.
    pub step: u64,
    pub epoch: usize,
    pub l_re: f64,
    pub l_adv_d: f64,
    pub l_adv_g: f64,
    pub l_sp: f64,
    pub total: f64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.epoch, self.l_re, self.l_adv_d, self.l_adv_g, self.l_sp, self.total
        )
    }
}

pub const LOG_HEADER: &str = "step,epoch,l_re,l_adv_d,l_adv_g,l_sp,total";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.records {
            s.push_str(&r.to_string());
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Per-epoch means of every loss column.
    pub fn epoch_means(&self) -> Vec<StepRecord> {
        let mut out: Vec<(StepRecord, usize)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((acc, n)) if acc.epoch == r.epoch => {
                    acc.step = r.step;
                    acc.l_re += r.l_re;
                    acc.l_adv_d += r.l_adv_d;
                    acc.l_adv_g += r.l_adv_g;
                    acc.l_sp += r.l_sp;
                    acc.total += r.total;
                    *n += 1;
                }
                _ => out.push((*r, 1)),
            }
        }
        out.into_iter()
            .map(|(r, n)| {
                let k = n as f64;
                StepRecord {
                    l_re: r.l_re / k,
                    l_adv_d: r.l_adv_d / k,
                    l_adv_g: r.l_adv_g / k,
                    l_sp: r.l_sp / k,
                    total: r.total / k,
                    ..r
                }
            })
            .collect()
    }
}

/// Optimizer state plus models; everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub models: Models,
    opt_g: AdamState,
    opt_d: AdamState,
    opt_sp: AdamState,
    step: u64,
    pub log: TrainLog,
}

fn item<T: Element>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().as_f64()
}

impl Trainer {
    pub fn new(config: TrainConfig, models: Models) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::with_betas(config.learning_rate, config.beta1, 0.999);
        Ok(Trainer {
            config,
            models,
            opt_g: adam.clone(),
            opt_d: adam.clone(),
            opt_sp: adam,
            step: 0,
            log: TrainLog::default(),
        })
    }

    /// Optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.config.batch_size)
    }

    /// Sample order of one epoch; a pure function of seed and epoch.
    pub fn epoch_order(&self, epoch: usize, samples: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..samples).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, epoch as u64));
        order.shuffle(&mut rng);
        order
    }

    fn diverged(&self, what: &str) -> Error {
        let last = match self.log.records.last() {
            Some(r) => format!("{LOG_HEADER}: {r}"),
            None => "none".into(),
        };
        Error::Diverged {
            step: self.step + 1,
            last: format!("{last} ({what} not finite)"),
        }
    }

    fn discriminator_step(&mut self, real: &Tensor<f32>, fake: Tensor<f32>) -> Result<f64> {
        let d = &mut self.models.discriminator;
        let mut g = Graph::new();
        let bound = d.params.bind(&mut g);
        let vars = DiscriminatorVars::lookup(&d.config, &d.params, &bound)?;
        let r = g.input(real.clone());
        let f = g.input(fake);
        let sr = discriminate_logits(&mut g, &d.config, &vars, r)?;
        let sf = discriminate_logits(&mut g, &d.config, &vars, f)?;
        let loss = loss_adversarial_d_logits(&mut g, sr, sf)?;
        let value = item(&g, loss);
        if !value.is_finite() {
            return Err(self.diverged("discriminator loss"));
        }
        let grads = g.backward(loss)?;
        d.params.load_grads(&bound, &grads)?;
        adam_step_own_grads(d.params.tensors_mut(), &mut self.opt_d)?;
        Ok(value)
    }

    /// One discriminator update, if adversarial, then one joint update of
    /// generator and sparsity net followed by dictionary projection.
    pub fn train_step(&mut self, batch: &[&Sample], epoch: usize) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::Data("empty training batch".into()));
        }
        if let Some(s) = batch.iter().find(|s| s.label.is_anomalous()) {
            return Err(Error::Data(format!("anomalous sample {} in a training batch", s.id)));
        }
        let (w_re, w_adv, w_sp) = self.config.effective_lambdas();
        let x = Sample::batch(batch)?;
        let gc = self.models.generator.config.clone();

        let mut g = Graph::new();
        let gen_bound = self.models.generator.params.bind(&mut g);
        let gen = GeneratorVars::lookup(&gc, &self.models.generator.params, &gen_bound)?;
        let xv = g.input(x.clone());
        let h_in = encode(&mut g, &gc, &gen, xv)?;
        let fake = decode(&mut g, &gc, &gen, h_in)?;
        let l_re = loss_reconstruction(&mut g, xv, fake)?;
        let mut total = g.scale(l_re, w_re);
        let mut rec = StepRecord {
            step: self.step + 1,
            epoch,
            l_re: item(&g, l_re),
            ..StepRecord::default()
        };

        if w_adv > 0.0 {
            rec.l_adv_d = self.discriminator_step(&x, g.value(fake).clone())?;
            let d = &self.models.discriminator;
            let frozen: Vec<Var> = d.params.tensors().iter().map(|t| g.input(t.clone())).collect();
            let dv = DiscriminatorVars::lookup(&d.config, &d.params, &frozen)?;
            let logits = discriminate_logits(&mut g, &d.config, &dv, fake)?;
            let l_adv = loss_adversarial_g_logits(&mut g, logits)?;
            rec.l_adv_g = item(&g, l_adv);
            let term = g.scale(l_adv, w_adv);
            total = g.add(total, term)?;
        }

        let sp_bound = if w_sp > 0.0 {
            let bound = self.models.sparsity.bind(&mut g);
            let vars = SparsityVars::lookup(&self.models.sparsity, &bound)?;
            let sc = self.models.sparsity_config;
            let out = sparsity::sparsity_net_forward(&mut g, h_in, &vars, sc.steps, Gates::Learned, sc.lambda)
                .map_err(|e| match e {
                    Error::Numeric(_) => self.diverged("sparsity loss"),
                    e => e,
                })?;
            rec.l_sp = item(&g, out.loss);
            let term = g.scale(out.loss, w_sp);
            total = g.add(total, term)?;
            Some(bound)
        } else {
            None
        };

        rec.total = item(&g, total);
        if !(rec.l_re.is_finite() && rec.l_adv_g.is_finite() && rec.total.is_finite()) {
            return Err(self.diverged("generator loss"));
        }
        let grads = g.backward(total)?;
        self.models.generator.params.load_grads(&gen_bound, &grads)?;
        adam_step_own_grads(self.models.generator.params.tensors_mut(), &mut self.opt_g)?;
        if let Some(bound) = sp_bound {
            self.models.sparsity.load_grads(&bound, &grads)?;
            adam_step_own_grads(self.models.sparsity.tensors_mut(), &mut self.opt_sp)?;
            let i = self
                .models
                .sparsity
                .index_of(sparsity::DICTIONARY)
                .ok_or_else(|| Error::arg("missing dictionary"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed ^ 0x5eed, rec.step));
            sparsity::project_dictionary(self.models.sparsity.get_mut(i), &mut rng)?;
        }
        self.step += 1;
        self.log.records.push(rec);
        Ok(rec)
    }

    /// Trains until `config.epochs` full epochs over `train` are done.
    pub fn fit(&mut self, train: &[Sample]) -> Result<()> {
        let target = (self.config.epochs * self.steps_per_epoch(train.len())) as u64;
        self.fit_until(train, target)
    }

    /// Trains until `step_count() == stop`, resuming mid-epoch if needed.
    pub fn fit_until(&mut self, train: &[Sample], stop: u64) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Data("empty training corpus".into()));
        }
        let per_epoch = self.steps_per_epoch(train.len()) as u64;
        let bs = self.config.batch_size;
        let mut order = Vec::new();
        let mut order_epoch = usize::MAX;
        while self.step < stop {
            let epoch = (self.step / per_epoch) as usize;
            let k = (self.step % per_epoch) as usize;
            if order_epoch != epoch {
                order = self.epoch_order(epoch, train.len());
                order_epoch = epoch;
            }
            let end = ((k + 1) * bs).min(train.len());
            let batch: Vec<&Sample> = order[k * bs..end].iter().map(|&i| &train[i]).collect();
            self.train_step(&batch, epoch)?;
        }
        Ok(())
    }

    /// Weights, config echo and optimizer state; no threshold.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        self.models.write_to(&mut ck)?;
        let c = &self.config;
        ck.insert(
            "config/train",
            Tensor::from_f64(
                &[8],
                &[
                    c.mode.index() as f64,
                    c.lambda_re,
                    c.lambda_adv,
                    c.lambda_sp,
                    c.batch_size as f64,
                    c.learning_rate,
                    c.epochs as f64,
                    c.beta1,
                ],
            )?,
        )?;
        ck.insert("config/seed", u64_tensor(c.seed))?;
        ck.insert("train/step", u64_tensor(self.step))?;
        let groups = [
            ("generator", &self.opt_g, &self.models.generator.params),
            ("discriminator", &self.opt_d, &self.models.discriminator.params),
            ("sparsity", &self.opt_sp, &self.models.sparsity),
        ];
        for (group, opt, store) in groups {
            ck.insert(format!("adam/{group}.step"), u64_tensor(opt.step_count()))?;
            let (m, v) = opt.moments();
            if m.is_empty() {
                continue;
            }
            for ((name, t), (mi, vi)) in store.iter().zip(m.iter().zip(v)) {
                ck.insert(format!("adam/m/{name}"), Tensor::new(t.shape(), mi.clone())?)?;
                ck.insert(format!("adam/v/{name}"), Tensor::new(t.shape(), vi.clone())?)?;
            }
        }
        Ok(ck)
    }

    /// Continues a run saved by [`Trainer::checkpoint`]. `config` must match
    /// the saved mode and seed.
    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let saved = ck.require("config/train")?.data();
        let seed = tensor_u64(ck.require("config/seed")?)?;
        if saved.first().map(|&m| m as usize) != Some(config.mode.index()) || seed != config.seed {
            return Err(Error::arg("resume config does not match the checkpoint's mode and seed"));
        }
        let models = Models::from_checkpoint(ck)?;
        let mut t = Trainer::new(config, models)?;
        t.step = tensor_u64(ck.require("train/step")?)?;
        let Trainer {
            opt_g,
            opt_d,
            opt_sp,
            models,
            ..
        } = &mut t;
        let groups = [
            ("generator", opt_g, &models.generator.params),
            ("discriminator", opt_d, &models.discriminator.params),
            ("sparsity", opt_sp, &models.sparsity),
        ];
        for (group, opt, store) in groups {
            let steps = tensor_u64(ck.require(&format!("adam/{group}.step"))?)?;
            if steps == 0 {
                continue;
            }
            let mut m = Vec::new();
            let mut v = Vec::new();
            for name in store.names() {
                m.push(ck.require(&format!("adam/m/{name}"))?.data().to_vec());
                v.push(ck.require(&format!("adam/v/{name}"))?.data().to_vec());
            }
            opt.restore(steps, m, v)?;
        }
        Ok(t)
    }
}

/// The training configuration echoed into a checkpoint.
pub fn saved_config(ck: &Checkpoint) -> Result<TrainConfig> {
    let v: Vec<f64> = ck.require("config/train")?.data().iter().map(|&x| f64::from(x)).collect();
    let [mode, lambda_re, lambda_adv, lambda_sp, batch, lr, epochs, beta1] = v[..] else {
        return Err(Error::format(0, format!("config/train has {} values, expected 8", v.len())));
    };
    let mode = *Mode::ALL
        .get(mode as usize)
        .ok_or_else(|| Error::format(0, format!("unknown mode index {mode}")))?;
    Ok(TrainConfig {
        lambda_re,
        lambda_adv,
        lambda_sp,
        batch_size: batch as usize,
        learning_rate: lr,
        beta1,
        epochs: epochs as usize,
        seed: tensor_u64(ck.require("config/seed")?)?,
        mode,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub models: Models,
    pub log: TrainLog,
}

/// Trains from scratch and, when at least one epoch ran, calibrates the
/// threshold on `val`.
pub fn train(
    train: &[Sample],
    val: &[Sample],
    generator: GeneratorConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_models(train, val, Models::new(generator, config.seed)?, config)
}

/// [`train`] from already initialized models.
pub fn train_models(
    train: &[Sample],
    val: &[Sample],
    models: Models,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    let mut trainer = Trainer::new(config.clone(), models)?;
    trainer.fit(train)?;
    let mut checkpoint = trainer.checkpoint()?;
    if config.epochs > 0 {
        let scores = scoring::score_samples(&trainer.models, val, config.mode.score_mode())?;
        let labeled: Vec<(f64, bool)> =
            scores.iter().zip(val).map(|(&s, v)| (s, v.label.is_anomalous())).collect();
        checkpoint.phi = Some(scoring::calibrate_threshold(&labeled)?.phi);
    }
    Ok(TrainOutcome {
        checkpoint,
        models: trainer.models,
        log: trainer.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::Label;

    fn tiny_config() -> GeneratorConfig {
        GeneratorConfig {
            input_side: 32,
            input_channels: 1,
            latent_channels: 8,
            downsample_factor: 32,
            base_channels: 2,
        }
    }

    fn samples(n: usize, side: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                id: format!("s{i}"),
                side,
                image: (0..side * side)
                    .map(|p| ((p * 7 + i * 13) % 17) as f32 / 8.5 - 1.0)
                    .collect(),
                label: Label::Normal,
                mask: None,
                seed: i as u64,
            })
            .collect()
    }

    fn trainer(mode: Mode) -> Trainer {
        let cfg = TrainConfig {
            batch_size: 4,
            mode,
            ..TrainConfig::default()
        };
        Trainer::new(cfg, Models::new(tiny_config(), 3).unwrap()).unwrap()
    }

    #[test]
    fn reconstruction_loss_values() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::full(&[2, 1, 2, 2], 1.0));
        let b = g.input(Tensor::zeros(&[2, 1, 2, 2]));
        let l = loss_reconstruction(&mut g, a, b).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let same = loss_reconstruction(&mut g, a, a).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
    }

    #[test]
    fn adversarial_loss_values() {
        let mut g = Graph::<f64>::new();
        let half = g.input(Tensor::full(&[3, 1], 0.5));
        let d = loss_adversarial_d(&mut g, half, half).unwrap();
        assert!((g.value(d).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let gl = loss_adversarial_g(&mut g, half).unwrap();
        assert!((g.value(gl).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let one = g.input(Tensor::full(&[3, 1], 1.0));
        let zero = g.input(Tensor::zeros(&[3, 1]));
        let perfect = loss_adversarial_d(&mut g, one, zero).unwrap();
        assert!(g.value(perfect).item().abs() < 1e-6);
        let bad = g.input(Tensor::full(&[1, 1], 1.5));
        assert!(matches!(loss_adversarial_d(&mut g, bad, half), Err(Error::Numeric(_))));
        let nan = g.input(Tensor::full(&[1, 1], f64::NAN));
        assert!(matches!(loss_adversarial_g(&mut g, nan), Err(Error::Numeric(_))));
    }

    #[test]
    fn autoencoder_total_is_weighted_reconstruction() {
        let mut t = trainer(Mode::Autoencoder);
        let d_before = t.models.discriminator.clone();
        let sp_before = t.models.sparsity.clone();
        let data = samples(8, 32);
        t.fit_until(&data, 3).unwrap();
        for r in &t.log.records {
            assert_eq!((r.l_adv_d, r.l_adv_g, r.l_sp), (0.0, 0.0, 0.0));
            assert!((r.total - 20.0 * r.l_re).abs() <= 1e-6 * r.total.max(1.0));
        }
        assert_eq!(t.models.discriminator, d_before);
        assert_eq!(t.models.sparsity, sp_before);
    }

    #[test]
    fn logged_total_decomposes() {
        let mut t = trainer(Mode::SparseGan);
        t.fit_until(&samples(8, 32), 4).unwrap();
        for r in &t.log.records {
            let sum = 20.0 * r.l_re + r.l_adv_g + 50.0 * r.l_sp;
            assert!((r.total - sum).abs() <= 1e-6 * sum.abs().max(1.0), "{r}");
            assert!(r.l_sp > 0.0 && r.l_adv_d > 0.0);
        }
        let steps: Vec<u64> = t.log.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![1, 2, 3, 4]);
    }

    #[test]
    fn rejects_anomalous_batch() {
        let mut t = trainer(Mode::SparseGan);
        let mut data = samples(2, 32);
        data[1].label = Label::Anomalous;
        let batch: Vec<&Sample> = data.iter().collect();
        assert!(matches!(t.train_step(&batch, 0), Err(Error::Data(_))));
        assert_eq!(t.step_count(), 0);
    }

    #[test]
    fn same_seed_same_log_and_checkpoint() {
        let data = samples(6, 32);
        let run = || {
            let mut t = trainer(Mode::SparseGan);
            t.fit_until(&data, 3).unwrap();
            (t.log.to_csv(), t.checkpoint().unwrap().to_bytes())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = samples(10, 32);
        let mut full = trainer(Mode::SparseGan);
        full.fit_until(&data, 5).unwrap();

        let mut first = trainer(Mode::SparseGan);
        first.fit_until(&data, 2).unwrap();
        let bytes = first.checkpoint().unwrap().to_bytes();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ck, first.config.clone()).unwrap();
        resumed.fit_until(&data, 5).unwrap();
        assert_eq!(&full.log.records[2..], &resumed.log.records[..]);
        assert_eq!(full.checkpoint().unwrap().to_bytes(), resumed.checkpoint().unwrap().to_bytes());
    }

    #[test]
    fn divergence_reports_last_record() {
        let mut t = trainer(Mode::Autoencoder);
        let data = samples(4, 32);
        t.fit_until(&data, 1).unwrap();
        let mut bad = data.clone();
        bad[0].image[0] = f32::NAN;
        let batch: Vec<&Sample> = bad.iter().collect();
        match t.train_step(&batch, 0) {
            Err(Error::Diverged { step, last }) => {
                assert_eq!(step, 2);
                assert!(last.contains(&t.log.records[0].to_string()));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn log_csv_format() {
        let log = TrainLog {
            records: vec![StepRecord {
                step: 1,
                epoch: 0,
                l_re: 0.5,
                l_adv_d: 1.25,
                l_adv_g: 0.125,
                l_sp: 2.0,
                total: 110.125,
            }],
        };
        assert_eq!(
            log.to_csv(),
            "step,epoch,l_re,l_adv_d,l_adv_g,l_sp,total\n1,0,0.500000,1.250000,0.125000,2.000000,110.125000\n"
        );
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("pix2pix".parse::<Mode>().is_err());
    }
}
