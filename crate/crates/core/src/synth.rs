//! Synthetic layered images with speckle, lesion injection with exact masks,
//! and the on-disk corpus layout.
//!
//! Intensities are generated on a `[0, 1]` scale and stored as `[-1, 1]`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pnm::{self, Gray};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Label::Normal),
            "anomalous" => Ok(Label::Anomalous),
            _ => Err(Error::Data(format!("unknown label {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub side: usize,
    /// Row-major, values in `[-1, 1]`.
    pub image: Vec<f32>,
    pub label: Label,
    /// Row-major lesion mask, present iff anomalous.
    pub mask: Option<Vec<bool>>,
    pub seed: u64,
}

impl Sample {
    /// `[1, 1, side, side]`.
    pub fn tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, 1, self.side, self.side], self.image.clone()).expect("square image")
    }

    pub fn to_gray(&self) -> Gray {
        Gray {
            width: self.side,
            height: self.side,
            pixels: self.image.iter().map(|&v| pnm::quantize_signed(v)).collect(),
        }
    }

    /// Images as one `[n, 1, side, side]` batch.
    pub fn batch(samples: &[&Sample]) -> Result<Tensor<f32>> {
        let side = samples.first().map(|s| s.side).ok_or_else(|| Error::Data("empty batch".into()))?;
        let mut data = Vec::with_capacity(samples.len() * side * side);
        for s in samples {
            if s.side != side {
                return Err(Error::shape(format!("batch mixes sides {side} and {}", s.side)));
            }
            data.extend_from_slice(&s.image);
        }
        Tensor::new(&[samples.len(), 1, side, side], data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub train_normal: usize,
    pub val_normal: usize,
    pub val_anomalous: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub side: usize,
    pub layers_min: usize,
    pub layers_max: usize,
    /// Standard deviation of the multiplicative speckle.
    pub speckle_sigma: f64,
    pub lesion_radius_min: f64,
    pub lesion_radius_max: f64,
    /// Lesion contrast on the `[0, 1]` intensity scale.
    pub intensity_delta: f64,
    pub master_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            train_normal: 500,
            val_normal: 50,
            val_anomalous: 50,
            test_normal: 100,
            test_anomalous: 100,
            side: 64,
            layers_min: 4,
            layers_max: 7,
            speckle_sigma: 0.15,
            lesion_radius_min: 6.0,
            lesion_radius_max: 12.0,
            intensity_delta: 0.6,
            master_seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(m));
        if self.side < 16 {
            return bad(format!("side {} too small", self.side));
        }
        if self.layers_min < 2 || self.layers_min > self.layers_max {
            return bad(format!("layer range {}..={}", self.layers_min, self.layers_max));
        }
        if !(self.speckle_sigma >= 0.0) {
            return bad(format!("speckle sigma {}", self.speckle_sigma));
        }
        if !(self.lesion_radius_min >= 1.0) || self.lesion_radius_min > self.lesion_radius_max {
            return bad(format!(
                "lesion radius range {}..={} must start at 1 or more",
                self.lesion_radius_min, self.lesion_radius_max
            ));
        }
        if 2.0 * self.lesion_radius_max + 2.0 >= self.side as f64 {
            return bad(format!(
                "lesion radius {} does not fit a {} side",
                self.lesion_radius_max, self.side
            ));
        }
        if !(self.intensity_delta > 0.0) {
            return bad(format!("intensity delta {}", self.intensity_delta));
        }
        Ok(())
    }

    /// Smallest and largest admissible lesion mask, in pixels.
    pub fn mask_area_bounds(&self) -> (usize, usize) {
        let lo = (self.lesion_radius_min.powi(2) / 2.0).ceil() as usize;
        let hi = (4.0 * self.lesion_radius_max.powi(2)).floor() as usize;
        (lo.max(1), hi)
    }

    pub fn counts(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (self.train_normal, 0),
            Split::Val => (self.val_normal, self.val_anomalous),
            Split::Test => (self.test_normal, self.test_anomalous),
        }
    }
}

/// SplitMix64 finalizer, used to derive independent per-sample seeds.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` of `split`.
pub fn sample_seed(master: u64, split: Split, index: usize) -> u64 {
    mix(mix(master, split.code()), index as u64)
}

struct Boundary {
    base: f64,
    amp: f64,
    freq: f64,
    phase: f64,
}

const TEMPLATE: [f64; 6] = [0.7, 0.35, 0.55, 0.3, 0.5, 0.4];

/// Noise-free layered image, evaluable at any point.
struct Layers {
    side: f64,
    curve_amp: f64,
    curve_freq: f64,
    curve_phase: f64,
    boundaries: Vec<Boundary>,
    /// One more than `boundaries`: the band above the first, then below each.
    intensity: Vec<f64>,
    retina: (f64, f64),
}

impl Layers {
    fn sample<R: Rng>(spec: &CorpusSpec, rng: &mut R) -> Self {
        let side = spec.side as f64;
        let layers = rng.random_range(spec.layers_min..=spec.layers_max);
        let top = side * rng.random_range(0.15..0.3);
        let bottom = side * rng.random_range(0.75..0.92);
        let weights: Vec<f64> = (0..layers).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = weights.iter().sum();
        let mut boundaries = Vec::with_capacity(layers + 1);
        let mut y = top;
        for k in 0..=layers {
            boundaries.push(Boundary {
                base: y,
                amp: side * rng.random_range(0.0..0.02),
                freq: rng.random_range(1.0..3.0),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            });
            if k < layers {
                y += (bottom - top) * weights[k] / total;
            }
        }
        // Alternating bright and dark bands, brightest at the bottom of the retina.
        let mut intensity = vec![rng.random_range(0.03..0.1)];
        intensity.extend((0..layers).map(|k| {
            let base = if k + 1 == layers {
                0.8
            } else {
                TEMPLATE[k % TEMPLATE.len()]
            };
            base + rng.random_range(-0.06..0.06)
        }));
        intensity.push(rng.random_range(0.1..0.25));
        Layers {
            side,
            curve_amp: side * rng.random_range(0.0..0.06),
            curve_freq: rng.random_range(0.5..1.5),
            curve_phase: rng.random_range(0.0..std::f64::consts::TAU),
            boundaries,
            intensity,
            retina: (top, bottom),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let u = x / self.side * std::f64::consts::TAU;
        let curve = self.curve_amp * (self.curve_freq * u + self.curve_phase).sin();
        let mut v = self.intensity[0];
        for (k, b) in self.boundaries.iter().enumerate() {
            let edge = b.base + curve + b.amp * (b.freq * u + b.phase).sin();
            // Edges are about one pixel wide.
            let t = 1.0 / (1.0 + (-(y - edge) / 0.5).exp());
            v += (self.intensity[k + 1] - self.intensity[k]) * t;
        }
        v
    }
}

/// The clean image and the speckle field of a normal sample.
struct Rendered {
    layers: Layers,
    clean: Vec<f64>,
    speckle: Vec<f64>,
}

fn render(seed: u64, spec: &CorpusSpec) -> Rendered {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = Layers::sample(spec, &mut rng);
    let s = spec.side;
    let mut clean = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            clean.push(layers.at(x as f64 + 0.5, y as f64 + 0.5));
        }
    }
    let speckle = (0..s * s)
        .map(|_| 1.0 + spec.speckle_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Rendered {
        layers,
        clean,
        speckle,
    }
}

fn to_signed(unit: f64) -> f32 {
    (unit.clamp(0.0, 1.0) * 2.0 - 1.0) as f32
}

pub fn generate_normal(seed: u64, spec: &CorpusSpec) -> Sample {
    let r = render(seed, spec);
    let image = r
        .clean
        .iter()
        .zip(&r.speckle)
        .map(|(c, n)| to_signed(c * n))
        .collect();
    Sample {
        id: format!("{seed:016x}"),
        side: spec.side,
        image,
        label: Label::Normal,
        mask: None,
        seed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lesion {
    /// Bright, smooth, drusen-like bump.
    Blob,
    /// Dark cavity with the layers above it pushed up, edema-like.
    Cavity,
    /// Irregular patch of alternating bright and dark texture, CNV-like.
    Irregular,
}

/// Candidate lesion: new clean intensity inside its mask.
fn draw_lesion<R: Rng>(
    kind: Lesion,
    r: &Rendered,
    spec: &CorpusSpec,
    rng: &mut R,
) -> Option<(Vec<bool>, Vec<f64>)> {
    let s = spec.side;
    let sf = s as f64;
    let radius = rng.random_range(spec.lesion_radius_min..=spec.lesion_radius_max);
    let (top, bottom) = r.layers.retina;
    let cx = rng.random_range(0.0..sf);
    let cy = rng.random_range(top - radius / 2.0..bottom + radius / 2.0);
    if cx - radius < 0.0 || cx + radius > sf - 1.0 || cy - radius < 0.0 || cy + radius > sf - 1.0 {
        return None;
    }
    let delta = spec.intensity_delta;
    let mut mask = vec![false; s * s];
    let mut clean = r.clean.clone();
    match kind {
        Lesion::Blob => {
            let (rx, ry) = (radius, radius * rng.random_range(0.5..1.0));
            for y in 0..s {
                for x in 0..s {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let d2 = dx * dx + dy * dy;
                    if d2 <= 1.0 {
                        mask[y * s + x] = true;
                        clean[y * s + x] += delta * (1.0 - 0.5 * d2);
                    }
                }
            }
        }
        Lesion::Cavity => {
            let rx = radius * rng.random_range(0.8..1.2);
            let ry = radius * rng.random_range(0.5..0.8);
            for y in 0..s {
                for x in 0..s {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let dx = (px - cx) / rx;
                    let dy = (py - cy) / ry;
                    let d2 = dx * dx + dy * dy;
                    if d2 <= 1.0 {
                        mask[y * s + x] = true;
                        let lift = 0.5 * ry * (1.0 - d2);
                        let displaced = r.layers.at(px, py + lift);
                        clean[y * s + x] = (displaced - delta * (1.0 - 0.5 * d2)).max(0.02);
                    }
                }
            }
        }
        Lesion::Irregular => {
            let lobes = rng.random_range(3..=5);
            let centers: Vec<(f64, f64, f64)> = (0..lobes)
                .map(|_| {
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    let off = radius * rng.random_range(0.0..0.5);
                    let lr = radius * rng.random_range(0.35..0.6);
                    (cx + off * a.cos(), cy + off * a.sin(), lr)
                })
                .collect();
            let (fa, fb) = (rng.random_range(0.8..1.6), rng.random_range(0.8..1.6));
            let (pa, pb) = (
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            );
            for y in 0..s {
                for x in 0..s {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let inside = centers
                        .iter()
                        .any(|&(lx, ly, lr)| (px - lx).powi(2) + (py - ly).powi(2) <= lr * lr);
                    if inside {
                        mask[y * s + x] = true;
                        let sign = ((px * fa + pa).sin() * (py * fb + pb).sin()).signum();
                        clean[y * s + x] = 0.5 + 1.2 * delta * if sign == 0.0 { 1.0 } else { sign };
                    }
                }
            }
        }
    }
    Some((mask, clean))
}

/// Adds one lesion to a normal sample, re-rendering it from its seed.
///
/// Positions that leave the image, masks outside the area bounds, and lesions
/// whose mean contrast is below half the configured delta are redrawn from
/// the same seeded sequence.
pub fn inject_lesion(sample: &Sample, seed: u64, spec: &CorpusSpec) -> Result<Sample> {
    spec.validate()?;
    if sample.label != Label::Normal {
        return Err(Error::Data(format!("sample {} already has a lesion", sample.id)));
    }
    if sample.side != spec.side {
        return Err(Error::shape(format!(
            "sample side {} vs spec side {}",
            sample.side, spec.side
        )));
    }
    let r = render(sample.seed, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = [Lesion::Blob, Lesion::Cavity, Lesion::Irregular][rng.random_range(0..3)];
    let (lo, hi) = spec.mask_area_bounds();
    for _ in 0..10_000 {
        let Some((mask, clean)) = draw_lesion(kind, &r, spec, &mut rng) else {
            continue;
        };
        let area = mask.iter().filter(|&&m| m).count();
        if area < lo || area > hi {
            continue;
        }
        let mut image = sample.image.clone();
        let mut contrast = 0.0;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            image[i] = to_signed(clean[i] * r.speckle[i]);
            contrast += f64::from((image[i] - sample.image[i]).abs()) / 2.0;
        }
        if contrast / (area as f64) < spec.intensity_delta / 2.0 {
            continue;
        }
        return Ok(Sample {
            id: sample.id.clone(),
            side: sample.side,
            image,
            label: Label::Anomalous,
            mask: Some(mask),
            seed: sample.seed,
        });
    }
    Err(Error::Data(format!(
        "no admissible {kind:?} lesion for sample {}",
        sample.id
    )))
}

/// Sample `index` of `split`; anomalous indices follow the normal ones.
pub fn corpus_sample(spec: &CorpusSpec, split: Split, index: usize) -> Result<Sample> {
    let (normal, anomalous) = spec.counts(split);
    if index >= normal + anomalous {
        return Err(Error::arg(format!("{split} has no sample {index}")));
    }
    let seed = sample_seed(spec.master_seed, split, index);
    let mut s = generate_normal(seed, spec);
    if index >= normal {
        s = inject_lesion(&s, mix(seed, 0xa11), spec)?;
    }
    s.id = format!("{split}-{index:04}");
    Ok(s)
}

/// Every sample of a split, generated in parallel.
pub fn split_samples(spec: &CorpusSpec, split: Split) -> Result<Vec<Sample>> {
    spec.validate()?;
    let (n, a) = spec.counts(split);
    (0..n + a)
        .into_par_iter()
        .map(|i| corpus_sample(spec, split, i))
        .collect()
}

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
    pub label: Label,
    pub seed: u64,
    pub mask: Option<String>,
}

impl fmt::Display for ManifestEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}\t", self.path, self.split, self.label, self.seed)?;
        if let Some(m) = &self.mask {
            f.write_str(m)?;
        }
        Ok(())
    }
}

fn parse_manifest_line(line: &str, lineno: usize) -> Result<ManifestEntry> {
    let fields: Vec<&str> = line.split('\t').collect();
    let err = |m: &str| Error::Data(format!("{MANIFEST} line {lineno}: {m}"));
    if !(4..=5).contains(&fields.len()) {
        return Err(err("expected 4 or 5 tab-separated fields"));
    }
    let mask = fields.get(4).filter(|m| !m.is_empty()).map(|m| m.to_string());
    Ok(ManifestEntry {
        path: fields[0].to_string(),
        split: fields[1].parse()?,
        label: fields[2].parse()?,
        seed: fields[3].parse().map_err(|_| err("bad seed"))?,
        mask,
    })
}

fn mask_gray(mask: &[bool], side: usize) -> Gray {
    Gray {
        width: side,
        height: side,
        pixels: mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
    }
}

/// Writes every split as PGM plus masks and `manifest.tsv` under `dir`.
/// `dir` may exist only if it is empty.
pub fn build_corpus(spec: &CorpusSpec, dir: &Path) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(Error::TargetNotEmpty(dir.to_path_buf()));
    }
    let written = write_corpus(spec, dir);
    if written.is_err() {
        let _ = fs::remove_dir_all(dir);
    }
    written
}

fn write_corpus(spec: &CorpusSpec, dir: &Path) -> Result<Vec<ManifestEntry>> {
    for sub in ["train", "val", "test", "masks"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut entries = Vec::new();
    for split in Split::ALL {
        let samples = split_samples(spec, split)?;
        let split_entries: Vec<ManifestEntry> = samples
            .par_iter()
            .map(|s| -> Result<ManifestEntry> {
                let path = format!("{split}/{}.pgm", s.id);
                pnm::write_pgm(&dir.join(&path), &s.to_gray())?;
                let mask = match &s.mask {
                    Some(m) => {
                        let mp = format!("masks/{}.pgm", s.id);
                        pnm::write_pgm(&dir.join(&mp), &mask_gray(m, s.side))?;
                        Some(mp)
                    }
                    None => None,
                };
                Ok(ManifestEntry {
                    path,
                    split,
                    label: s.label,
                    seed: s.seed,
                    mask,
                })
            })
            .collect::<Result<_>>()?;
        entries.extend(split_entries);
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let mut text = String::new();
    for e in &entries {
        text.push_str(&e.to_string());
        text.push('\n');
    }
    fs::write(dir.join(MANIFEST), text)?;
    Ok(entries)
}

/// Reads a P5 image as a normal-labelled sample with values in `[-1, 1]`.
pub fn load_image(path: &Path, side: usize) -> Result<Sample> {
    let g = pnm::read_pgm(path)?;
    if g.width != side || g.height != side {
        return Err(Error::shape(format!(
            "{}: {}x{} image, expected {side}x{side}",
            path.display(),
            g.width,
            g.height
        )));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sample {
        id,
        side,
        image: g.pixels.iter().map(|&p| pnm::dequantize_signed(p)).collect(),
        label: Label::Normal,
        mask: None,
        seed: 0,
    })
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub root: PathBuf,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Loads a corpus written by [`build_corpus`]. Refuses anomalous training samples.
pub fn load_corpus(dir: &Path, side: usize) -> Result<Corpus> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut corpus = Corpus {
        root: dir.to_path_buf(),
        ..Corpus::default()
    };
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let e = parse_manifest_line(line, i + 1)?;
        if e.split == Split::Train && e.label.is_anomalous() {
            return Err(Error::Data(format!("anomalous sample {} in the training split", e.path)));
        }
        let mut s = load_image(&dir.join(&e.path), side)?;
        s.label = e.label;
        s.seed = e.seed;
        if let Some(mp) = &e.mask {
            let m = pnm::read_pgm(&dir.join(mp))?;
            if m.width != side || m.height != side {
                return Err(Error::shape(format!("mask {mp} has the wrong size")));
            }
            s.mask = Some(m.pixels.iter().map(|&p| p > 127).collect());
        }
        if s.mask.is_some() != s.label.is_anomalous() {
            return Err(Error::Data(format!("{}: mask present iff anomalous", e.path)));
        }
        match e.split {
            Split::Train => corpus.train.push(s),
            Split::Val => corpus.val.push(s),
            Split::Test => corpus.test.push(s),
        }
    }
    Ok(corpus)
}
