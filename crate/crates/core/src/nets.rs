//! Generator (encoder + decoder), the weight-shared second encoder, and the
//! discriminator.
//!
//! Every block is a 4x4 stride-2 convolution with padding 1, so each halves
//! (or, transposed, doubles) the spatial side. Five blocks give the 32x
//! bottleneck.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{nchw, Element, Graph, ParamStore, Tensor, Var};

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;
const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub input_side: usize,
    pub input_channels: usize,
    pub latent_channels: usize,
    pub downsample_factor: usize,
    /// Width of the first block; each later block doubles it.
    pub base_channels: usize,
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        GeneratorConfig {
            input_side: 64,
            input_channels: 1,
            latent_channels: 256,
            downsample_factor: 32,
            base_channels: 8,
        }
    }

    pub fn paper() -> Self {
        GeneratorConfig {
            input_side: 224,
            input_channels: 1,
            latent_channels: 1024,
            downsample_factor: 32,
            base_channels: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if f < 2 || !f.is_power_of_two() {
            return Err(Error::arg(format!("downsample factor {f} must be a power of two >= 2")));
        }
        if self.input_side == 0 || self.input_side % f != 0 {
            return Err(Error::arg(format!(
                "input side {} is not divisible by {f}",
                self.input_side
            )));
        }
        if self.input_channels == 0 || self.latent_channels == 0 || self.base_channels == 0 {
            return Err(Error::arg("channel counts must be positive"));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    pub fn latent_side(&self) -> usize {
        self.input_side / self.downsample_factor
    }

    /// Channel counts from the image through to the latent.
    pub fn encoder_widths(&self) -> Vec<usize> {
        let b = self.blocks();
        let mut w = vec![self.input_channels];
        w.extend((0..b - 1).map(|i| self.base_channels << i));
        w.push(self.latent_channels);
        w
    }

    pub fn latent_shape(&self, n: usize) -> [usize; 4] {
        let s = self.latent_side();
        [n, self.latent_channels, s, s]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub input_side: usize,
    pub input_channels: usize,
    pub base_channels: usize,
    pub blocks: usize,
}

impl DiscriminatorConfig {
    pub fn for_generator(g: &GeneratorConfig) -> Self {
        DiscriminatorConfig {
            input_side: g.input_side,
            input_channels: g.input_channels,
            base_channels: g.base_channels,
            blocks: g.blocks(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_channels];
        w.extend((0..self.blocks).map(|i| self.base_channels << i));
        w
    }
}

fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f32> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn check_image<T: Element>(g: &Graph<T>, x: Var, side: usize, channels: usize, what: &str) -> Result<()> {
    let [_, c, h, w] = nchw(g.shape(x), what)?;
    if c != channels || h != side || w != side {
        return Err(Error::shape(format!(
            "{what}: expected [n, {channels}, {side}, {side}], got {:?}",
            g.shape(x)
        )));
    }
    Ok(())
}

fn lookup<T: Element>(store: &ParamStore<T>, bound: &[Var], name: &str) -> Result<Var> {
    store
        .index_of(name)
        .and_then(|i| bound.get(i).copied())
        .ok_or_else(|| Error::arg(format!("missing parameter {name}")))
}

fn lookup_layers<T: Element>(
    store: &ParamStore<T>,
    bound: &[Var],
    prefix: &str,
    count: usize,
) -> Result<Vec<(Var, Var)>> {
    (0..count)
        .map(|i| {
            Ok((
                lookup(store, bound, &format!("{prefix}{i}.weight"))?,
                lookup(store, bound, &format!("{prefix}{i}.bias"))?,
            ))
        })
        .collect()
}

/// Encoder and decoder weights. The second encoder reuses the encoder's.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore<f32>,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let widths = config.encoder_widths();
        let mut params = ParamStore::new();
        let last = widths.len() - 2;
        for (i, pair) in widths.windows(2).enumerate() {
            let (ci, co) = (pair[0], pair[1]);
            let fan_in = ci * KERNEL * KERNEL;
            // The latent layer is linear, so no rectifier gain.
            let w = if i == last {
                Tensor::randn(&[co, ci, KERNEL, KERNEL], (1.0 / fan_in as f64).sqrt(), rng)
            } else {
                he_normal(&[co, ci, KERNEL, KERNEL], fan_in, rng)
            };
            params.push(format!("generator/enc{i}.weight"), w)?;
            params.push(format!("generator/enc{i}.bias"), Tensor::zeros(&[co]))?;
        }
        let rev: Vec<usize> = widths.iter().rev().copied().collect();
        for (i, pair) in rev.windows(2).enumerate() {
            let (ci, co) = (pair[0], pair[1]);
            // Each output pixel of a stride-2 transpose sees a quarter of the taps.
            let fan_in = ci * KERNEL * KERNEL / (STRIDE * STRIDE);
            params.push(
                format!("generator/dec{i}.weight"),
                he_normal(&[ci, co, KERNEL, KERNEL], fan_in, rng),
            )?;
            params.push(format!("generator/dec{i}.bias"), Tensor::zeros(&[co]))?;
        }
        Ok(Generator { config, params })
    }

    /// Parameter count implied by a configuration.
    pub fn param_count(config: &GeneratorConfig) -> usize {
        let w = config.encoder_widths();
        let k = KERNEL * KERNEL;
        let enc: usize = w.windows(2).map(|p| p[0] * p[1] * k + p[1]).sum();
        let dec: usize = w.windows(2).map(|p| p[0] * p[1] * k + p[0]).sum();
        enc + dec
    }
}

/// Graph handles of the generator weights.
#[derive(Clone, Debug)]
pub struct GeneratorVars {
    enc: Vec<(Var, Var)>,
    dec: Vec<(Var, Var)>,
}

impl GeneratorVars {
    pub fn lookup<T: Element>(
        config: &GeneratorConfig,
        store: &ParamStore<T>,
        bound: &[Var],
    ) -> Result<Self> {
        let b = config.blocks();
        Ok(GeneratorVars {
            enc: lookup_layers(store, bound, "generator/enc", b)?,
            dec: lookup_layers(store, bound, "generator/dec", b)?,
        })
    }
}

/// `G_en`: images `[n, c, side, side]` to the latent `[n, C, side/32, side/32]`.
pub fn encode<T: Element>(
    g: &mut Graph<T>,
    cfg: &GeneratorConfig,
    p: &GeneratorVars,
    x: Var,
) -> Result<Var> {
    check_image(g, x, cfg.input_side, cfg.input_channels, "encode")?;
    let last = p.enc.len() - 1;
    let mut y = x;
    for (i, &(w, b)) in p.enc.iter().enumerate() {
        y = g.conv2d(y, w, STRIDE, PAD)?;
        y = g.add_channel_bias(y, b)?;
        if i < last {
            y = g.leaky_relu(y, SLOPE);
        }
    }
    Ok(y)
}

/// `E`: the second encoder. Same weights as [`encode`], so the same function.
pub fn encode_again<T: Element>(
    g: &mut Graph<T>,
    cfg: &GeneratorConfig,
    p: &GeneratorVars,
    x: Var,
) -> Result<Var> {
    encode(g, cfg, p, x)
}

/// `G_de`: latent back to an image in (-1, 1).
pub fn decode<T: Element>(
    g: &mut Graph<T>,
    cfg: &GeneratorConfig,
    p: &GeneratorVars,
    h: Var,
) -> Result<Var> {
    let [n, ..] = nchw(g.shape(h), "decode")?;
    if g.shape(h) != cfg.latent_shape(n) {
        return Err(Error::shape(format!(
            "decode: expected latent {:?}, got {:?}",
            cfg.latent_shape(n),
            g.shape(h)
        )));
    }
    let last = p.dec.len() - 1;
    let mut y = h;
    for (i, &(w, b)) in p.dec.iter().enumerate() {
        y = g.conv_transpose2d(y, w, STRIDE, PAD)?;
        y = g.add_channel_bias(y, b)?;
        y = if i < last { g.relu(y) } else { g.tanh(y) };
    }
    Ok(y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<f32>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        if config.blocks == 0 || config.input_side >> config.blocks == 0 {
            return Err(Error::arg(format!(
                "discriminator with {} blocks does not fit a {} side",
                config.blocks, config.input_side
            )));
        }
        let widths = config.widths();
        let mut params = ParamStore::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (ci, co) = (pair[0], pair[1]);
            params.push(
                format!("discriminator/conv{i}.weight"),
                he_normal(&[co, ci, KERNEL, KERNEL], ci * KERNEL * KERNEL, rng),
            )?;
            params.push(format!("discriminator/conv{i}.bias"), Tensor::zeros(&[co]))?;
        }
        let top = *widths.last().expect("at least one width");
        params.push("discriminator/head.weight", Tensor::randn(&[1, top], (1.0 / top as f64).sqrt(), rng))?;
        params.push("discriminator/head.bias", Tensor::zeros(&[1]))?;
        Ok(Discriminator { config, params })
    }

    pub fn param_count(config: &DiscriminatorConfig) -> usize {
        let w = config.widths();
        let conv: usize = w.windows(2).map(|p| p[0] * p[1] * KERNEL * KERNEL + p[1]).sum();
        conv + w.last().copied().unwrap_or(0) + 1
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorVars {
    convs: Vec<(Var, Var)>,
    head: (Var, Var),
}

impl DiscriminatorVars {
    pub fn lookup<T: Element>(
        config: &DiscriminatorConfig,
        store: &ParamStore<T>,
        bound: &[Var],
    ) -> Result<Self> {
        Ok(DiscriminatorVars {
            convs: lookup_layers(store, bound, "discriminator/conv", config.blocks)?,
            head: (
                lookup(store, bound, "discriminator/head.weight")?,
                lookup(store, bound, "discriminator/head.bias")?,
            ),
        })
    }
}

/// `D`: per-image probability of being real, shape `[n, 1]`.
pub fn discriminate<T: Element>(
    g: &mut Graph<T>,
    cfg: &DiscriminatorConfig,
    p: &DiscriminatorVars,
    x: Var,
) -> Result<Var> {
    let logit = discriminate_logits(g, cfg, p, x)?;
    Ok(g.sigmoid(logit))
}

/// The pre-sigmoid output of [`discriminate`].
pub fn discriminate_logits<T: Element>(
    g: &mut Graph<T>,
    cfg: &DiscriminatorConfig,
    p: &DiscriminatorVars,
    x: Var,
) -> Result<Var> {
    check_image(g, x, cfg.input_side, cfg.input_channels, "discriminate")?;
    let n = g.shape(x)[0];
    let mut y = x;
    for &(w, b) in &p.convs {
        y = g.conv2d(y, w, STRIDE, PAD)?;
        y = g.add_channel_bias(y, b)?;
        y = g.leaky_relu(y, SLOPE);
    }
    let pooled = g.global_avg_pool(y)?;
    let logit = g.channel_mix(pooled, p.head.0, false)?;
    let logit = g.add_channel_bias(logit, p.head.1)?;
    g.reshape(logit, &[n, 1])
}

/// Bottleneck activation `H`, `[n, C, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFeature {
    pub tensor: Tensor<f32>,
}

impl LatentFeature {
    pub fn new(config: &GeneratorConfig, tensor: Tensor<f32>) -> Result<Self> {
        let n = tensor.shape().first().copied().unwrap_or(0);
        if tensor.shape() != config.latent_shape(n) {
            return Err(Error::shape(format!(
                "latent {:?} does not match {:?}",
                tensor.shape(),
                config.latent_shape(n)
            )));
        }
        Ok(LatentFeature { tensor })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            input_side: 32,
            latent_channels: 16,
            base_channels: 2,
            ..GeneratorConfig::desk()
        }
    }

    fn run_encode(gen: &Generator, x: &Tensor<f32>, twice: bool) -> Tensor<f32> {
        let mut g = Graph::new();
        let bound = gen.params.bind(&mut g);
        let vars = GeneratorVars::lookup(&gen.config, &gen.params, &bound).unwrap();
        let xv = g.input(x.clone());
        let h = if twice {
            encode_again(&mut g, &gen.config, &vars, xv).unwrap()
        } else {
            encode(&mut g, &gen.config, &vars, xv).unwrap()
        };
        g.value(h).clone()
    }

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig::desk().validate().is_ok());
        assert!(GeneratorConfig::paper().validate().is_ok());
        let bad = GeneratorConfig {
            input_side: 65,
            ..GeneratorConfig::desk()
        };
        assert!(bad.validate().is_err());
        assert_eq!(GeneratorConfig::paper().latent_side(), 7);
        assert_eq!(GeneratorConfig::desk().encoder_widths(), vec![1, 8, 16, 32, 64, 256]);
    }

    #[test]
    fn desk_latent_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gen = Generator::new(GeneratorConfig::desk(), &mut rng).unwrap();
        let img = Tensor::randn(&[1, 1, 64, 64], 0.5, &mut rng);
        let x = Tensor::stack(&[img.clone(), img]).unwrap();
        let x = x.reshape(&[2, 1, 64, 64]).unwrap();
        let h = run_encode(&gen, &x, false);
        assert_eq!(h.shape(), &[2, 256, 2, 2]);
        let half = h.numel() / 2;
        assert_eq!(&h.data()[..half], &h.data()[half..]);
        assert!(LatentFeature::new(&gen.config, h).is_ok());
    }

    #[test]
    fn second_encoder_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gen = Generator::new(small(), &mut rng).unwrap();
        let x = Tensor::randn(&[3, 1, 32, 32], 0.5, &mut rng);
        assert_eq!(run_encode(&gen, &x, false), run_encode(&gen, &x, true));
    }

    #[test]
    fn round_trip_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gen = Generator::new(small(), &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = gen.params.bind(&mut g);
        let vars = GeneratorVars::lookup(&gen.config, &gen.params, &bound).unwrap();
        let x = g.input(Tensor::randn(&[2, 1, 32, 32], 0.5, &mut rng));
        let h = encode(&mut g, &gen.config, &vars, x).unwrap();
        let y = decode(&mut g, &gen.config, &vars, h).unwrap();
        assert_eq!(g.shape(y), g.shape(x));
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn zero_latent_decodes_to_bias_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gen = Generator::new(small(), &mut rng).unwrap();
        let last = gen.params.index_of("generator/dec4.bias").unwrap();
        gen.params.get_mut(last).data_mut()[0] = 0.3;
        let mut g = Graph::new();
        let bound = gen.params.bind(&mut g);
        let vars = GeneratorVars::lookup(&gen.config, &gen.params, &bound).unwrap();
        let h = g.input(Tensor::zeros(&gen.config.latent_shape(1)));
        let y = decode(&mut g, &gen.config, &vars, h).unwrap();
        // Zero biases elsewhere keep every hidden activation at zero.
        let expect = 0.3f32.tanh();
        let got = g.value(y).data();
        assert!(got.iter().all(|&v| (v - expect).abs() < 1e-6), "{:?} vs {expect}", &got[..4]);
        assert!(got.iter().all(|&v| v == got[0]));
    }

    #[test]
    fn wrong_side_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gen = Generator::new(small(), &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = gen.params.bind(&mut g);
        let vars = GeneratorVars::lookup(&gen.config, &gen.params, &bound).unwrap();
        let x = g.input(Tensor::zeros(&[1, 1, 64, 64]));
        assert!(matches!(encode(&mut g, &gen.config, &vars, x), Err(Error::Shape(_))));
        let h = g.input(Tensor::zeros(&[1, 8, 1, 1]));
        assert!(matches!(decode(&mut g, &gen.config, &vars, h), Err(Error::Shape(_))));
    }

    #[test]
    fn param_counts_are_golden() {
        // Hand-expanded sums of k*k*in*out + bias per layer.
        let desk = 16 * (8 + 8 * 16 + 16 * 32 + 32 * 64 + 64 * 256);
        assert_eq!(Generator::param_count(&GeneratorConfig::desk()), 2 * desk + (8 + 16 + 32 + 64 + 256) + (1 + 8 + 16 + 32 + 64));
        assert_eq!(Generator::param_count(&GeneratorConfig::desk()), 611_057);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gen = Generator::new(GeneratorConfig::desk(), &mut rng).unwrap();
        assert_eq!(gen.params.numel(), 611_057);
        let dcfg = DiscriminatorConfig::for_generator(&GeneratorConfig::desk());
        let d = Discriminator::new(dcfg.clone(), &mut rng).unwrap();
        assert_eq!(d.params.numel(), Discriminator::param_count(&dcfg));
        assert_eq!(d.params.numel(), 16 * (8 + 8 * 16 + 16 * 32 + 32 * 64 + 64 * 128) + (8 + 16 + 32 + 64 + 128) + 128 + 1);
    }

    #[test]
    fn discriminator_outputs_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = DiscriminatorConfig::for_generator(&small());
        let mut d = Discriminator::new(cfg.clone(), &mut rng).unwrap();
        let run = |d: &Discriminator, x: &Tensor<f32>| {
            let mut g = Graph::new();
            let bound = d.params.bind(&mut g);
            let vars = DiscriminatorVars::lookup(&d.config, &d.params, &bound).unwrap();
            let xv = g.input(x.clone());
            let s = discriminate(&mut g, &d.config, &vars, xv).unwrap();
            g.value(s).clone()
        };
        let x = Tensor::randn(&[4, 1, 32, 32], 1.0, &mut rng);
        let s = run(&d, &x);
        assert_eq!(s.shape(), &[4, 1]);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let w = d.params.index_of("discriminator/head.weight").unwrap();
        d.params.get_mut(w).data_mut().fill(0.0);
        assert!(run(&d, &x).data().iter().all(|&v| v == 0.5));
    }
}
