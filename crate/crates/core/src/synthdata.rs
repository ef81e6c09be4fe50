//! Parametric style-shift dataset.
//!
//! Every image is a binary spatial pattern (the content class) rendered through
//! a per-channel recipe: base offset, contrast gain, a smooth color field and
//! additive noise. Classes have a characteristic recipe of their own, which a
//! texture-biased classifier can latch onto; domains perturb that recipe.
//! Geometry never depends on the recipe.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numcore::{Tensor, TensorError};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
const PLANE: usize = IMAGE_SIZE * IMAGE_SIZE;
const IMAGE_LEN: usize = CHANNELS * PLANE;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("unknown domain {0}")]
    UnknownDomain(usize),
    #[error("empty domain set")]
    NoDomains,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("container: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Characteristic rendering of one content class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub offset: [f64; CHANNELS],
    pub gain: [f64; CHANNELS],
    pub noise: [f64; CHANNELS],
}

/// How a domain perturbs the class renderings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub offset_shift: [f64; CHANNELS],
    /// Multiplies the class gain per channel.
    pub gain_scale: [f64; CHANNELS],
    /// Multiplies the class noise amplitude.
    pub noise_scale: f64,
    pub field_amp: [f64; CHANNELS],
    /// Spatial frequency of the color field, cycles per image along (row, col).
    pub field_freq: [f64; 2],
}

impl DomainStyle {
    /// The unperturbed rendering used for cue-conflict stimuli.
    pub fn neutral() -> Self {
        Self {
            offset_shift: [0.0; CHANNELS],
            gain_scale: [1.0; CHANNELS],
            noise_scale: 1.0,
            field_amp: [0.0; CHANNELS],
            field_freq: [0.0, 0.0],
        }
    }
}

/// Fully resolved per-channel rendering parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Recipe {
    pub offset: [f64; CHANNELS],
    pub gain: [f64; CHANNELS],
    pub noise: [f64; CHANNELS],
    pub field_amp: [f64; CHANNELS],
    pub field_freq: [f64; 2],
}

impl Recipe {
    pub fn compose(class: &ClassStyle, domain: &DomainStyle) -> Self {
        let mut r = Recipe {
            offset: [0.0; CHANNELS],
            gain: [0.0; CHANNELS],
            noise: [0.0; CHANNELS],
            field_amp: domain.field_amp,
            field_freq: domain.field_freq,
        };
        for c in 0..CHANNELS {
            r.offset[c] = class.offset[c] + domain.offset_shift[c];
            r.gain[c] = class.gain[c] * domain.gain_scale[c];
            r.noise[c] = class.noise[c] * domain.noise_scale;
        }
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleShiftSpec {
    pub num_content_classes: usize,
    pub num_style_domains: usize,
    pub samples_per_class_per_domain: usize,
    pub seed: u64,
    /// Maximum per-sample translation of the pattern, in pixels.
    pub max_shift: usize,
    /// Train and validation fractions; the remainder is test.
    pub split: [f64; 2],
    pub class_styles: Vec<ClassStyle>,
    pub domain_styles: Vec<DomainStyle>,
}

impl Default for StyleShiftSpec {
    fn default() -> Self {
        Self::new(7, 4, 100, 0)
    }
}

impl StyleShiftSpec {
    pub fn new(num_classes: usize, num_domains: usize, samples_per_class_per_domain: usize, seed: u64) -> Self {
        Self {
            num_content_classes: num_classes,
            num_style_domains: num_domains,
            samples_per_class_per_domain,
            seed,
            max_shift: 2,
            split: [0.7, 0.15],
            class_styles: default_class_styles(num_classes),
            domain_styles: default_domain_styles(num_domains),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_content_classes;
        if !(2..=PATTERN_COUNT).contains(&k) {
            return Err(DataError::Spec(format!("num_content_classes must be in 2..={PATTERN_COUNT}, got {k}")));
        }
        if self.num_style_domains == 0 {
            return Err(DataError::Spec("num_style_domains must be positive".into()));
        }
        if self.class_styles.len() != k {
            return Err(DataError::Spec(format!("{} class styles for {k} classes", self.class_styles.len())));
        }
        if self.domain_styles.len() != self.num_style_domains {
            return Err(DataError::Spec(format!(
                "{} domain styles for {} domains",
                self.domain_styles.len(),
                self.num_style_domains
            )));
        }
        if self.max_shift > 3 {
            return Err(DataError::Spec("max_shift above 3 clips patterns".into()));
        }
        let [tr, va] = self.split;
        if !(tr > 0.0 && va >= 0.0 && tr + va <= 1.0) {
            return Err(DataError::Spec(format!("bad split {:?}", self.split)));
        }
        Ok(())
    }

    pub fn recipe(&self, class: usize, domain: usize) -> Recipe {
        Recipe::compose(&self.class_styles[class], &self.domain_styles[domain])
    }
}

fn cosine_wheel(base: f64, amp: f64, angle: f64) -> [f64; CHANNELS] {
    std::array::from_fn(|c| base + amp * (angle + 2.0 * PI * c as f64 / CHANNELS as f64).cos())
}

/// Classes sit on a hue wheel: offsets, gains and noise each rotate with the
/// class index, so per-channel statistics alone identify the class.
pub fn default_class_styles(k: usize) -> Vec<ClassStyle> {
    (0..k)
        .map(|j| {
            let theta = 2.0 * PI * j as f64 / k as f64;
            ClassStyle {
                offset: cosine_wheel(0.5, 0.3, theta),
                gain: cosine_wheel(0.07, 0.02, theta + PI / 4.0),
                noise: cosine_wheel(0.015, 0.004, 2.0 * theta),
            }
        })
        .collect()
}

pub fn default_domain_styles(d: usize) -> Vec<DomainStyle> {
    (0..d)
        .map(|i| {
            let psi = 2.0 * PI * i as f64 / d as f64 + 0.3;
            DomainStyle {
                offset_shift: cosine_wheel(0.0, 0.2, psi),
                gain_scale: cosine_wheel(0.0, 0.2, psi + 1.0).map(f64::exp),
                noise_scale: 0.6 + 0.3 * i as f64,
                field_amp: cosine_wheel(0.04, 0.02, psi + 2.0),
                field_freq: [0.5 + 0.25 * i as f64, 1.0 - 0.2 * i as f64],
            }
        })
        .collect()
}

// ---------------------------------------------------------------- patterns

pub const PATTERN_COUNT: usize = 8;
pub const PATTERN_NAMES: [&str; PATTERN_COUNT] =
    ["hbars", "vbars", "plus", "ring", "checker", "xdiag", "triangle", "frame"];

/// Binary pattern `class` translated by `(dy, dx)`; 1.0 marks foreground.
pub fn pattern(class: usize, dy: i32, dx: i32) -> Vec<f32> {
    let c = (IMAGE_SIZE as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f32; PLANE];
    for h in 0..IMAGE_SIZE {
        for w in 0..IMAGE_SIZE {
            let y = h as i32 - dy;
            let x = w as i32 - dx;
            let (yf, xf) = (y as f64, x as f64);
            let in_box = (xf - c).abs() < 12.0 && (yf - c).abs() < 12.0;
            let r = (xf - c).hypot(yf - c);
            let on = match class {
                0 => in_box && ((y - 4).div_euclid(4)) % 2 == 0,
                1 => in_box && ((x - 4).div_euclid(4)) % 2 == 0,
                2 => in_box && ((xf - c).abs() < 3.5 || (yf - c).abs() < 3.5),
                3 => (6.0..11.5).contains(&r),
                4 => in_box && ((x - 4).div_euclid(6) + (y - 4).div_euclid(6)) % 2 == 0,
                5 => in_box && ((xf - yf).abs() < 3.0 || (xf + yf - 2.0 * c).abs() < 3.0),
                6 => in_box && yf - 4.0 >= 2.0 * (xf - c).abs(),
                7 => in_box && !((xf - c).abs() < 7.0 && (yf - c).abs() < 7.0),
                _ => panic!("pattern index {class} out of range"),
            };
            if on {
                out[h * IMAGE_SIZE + w] = 1.0;
            }
        }
    }
    out
}

/// Renders `mask` through `recipe` into a `[3, 32, 32]` buffer clamped to [0, 1].
pub fn render<R: Rng + ?Sized>(mask: &[f32], recipe: &Recipe, rng: &mut R, out: &mut [f32]) {
    let phase = rng.gen::<f64>() * 2.0 * PI;
    let [fy, fx] = recipe.field_freq;
    let n = IMAGE_SIZE as f64;
    for c in 0..CHANNELS {
        let cphase = phase + 2.0 * PI * c as f64 / CHANNELS as f64;
        for h in 0..IMAGE_SIZE {
            for w in 0..IMAGE_SIZE {
                let i = h * IMAGE_SIZE + w;
                let field = recipe.field_amp[c] * (2.0 * PI * (fy * h as f64 + fx * w as f64) / n + cphase).sin();
                let noise: f64 = rng.sample(StandardNormal);
                let v = recipe.offset[c]
                    + recipe.gain[c] * (mask[i] as f64 - 0.5)
                    + field
                    + recipe.noise[c] * noise;
                out[c * PLANE + i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
}

/// Foreground estimate: channels weighted by their spread, box-smoothed over
/// 3x3 neighbourhoods, thresholded between the two intensity modes.
pub fn binarize(image: &[f32]) -> Vec<bool> {
    let weights: Vec<f32> = (0..CHANNELS)
        .map(|c| {
            let ch = &image[c * PLANE..(c + 1) * PLANE];
            let m = ch.iter().sum::<f32>() / PLANE as f32;
            (ch.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / PLANE as f32).sqrt()
        })
        .collect();
    let lum: Vec<f32> = (0..PLANE)
        .map(|i| (0..CHANNELS).map(|c| weights[c] * image[c * PLANE + i]).sum())
        .collect();
    let n = IMAGE_SIZE as i32;
    let smooth: Vec<f32> = (0..PLANE)
        .map(|i| {
            let (h, w) = ((i / IMAGE_SIZE) as i32, (i % IMAGE_SIZE) as i32);
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for y in (h - 1).max(0)..=(h + 1).min(n - 1) {
                for x in (w - 1).max(0)..=(w + 1).min(n - 1) {
                    acc += lum[(y * n + x) as usize];
                    cnt += 1.0;
                }
            }
            acc / cnt
        })
        .collect();
    // Isodata threshold: midpoint of the two class means, iterated.
    let mut t = smooth.iter().sum::<f32>() / PLANE as f32;
    for _ in 0..20 {
        let (mut hi, mut nh, mut lo, mut nl) = (0.0, 0.0, 0.0, 0.0);
        for &v in &smooth {
            if v > t {
                hi += v;
                nh += 1.0;
            } else {
                lo += v;
                nl += 1.0;
            }
        }
        if nh == 0.0 || nl == 0.0 {
            break;
        }
        t = 0.5 * (hi / nh + lo / nl);
    }
    smooth.iter().map(|&v| v > t).collect()
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

// ---------------------------------------------------------------- sets

/// Images with labels. For ordinary data `style == content`; for cue-conflict
/// stimuli they differ. `domain` is absent when domain identity was dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor<f32>,
    pub content: Vec<usize>,
    pub style: Vec<usize>,
    pub domain: Option<Vec<usize>>,
    /// Ground-truth foreground mask per image (`[N, 32*32]`, 0/1).
    pub masks: Vec<f32>,
}

pub type StimulusSet = LabeledSet;

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.content.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images.data()[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    pub fn mask(&self, i: usize) -> &[f32] {
        &self.masks[i * PLANE..(i + 1) * PLANE]
    }

    /// Images of `idx` as `[idx.len(), 3, 32, 32]`.
    pub fn images_of(&self, idx: &[usize]) -> Tensor<f32> {
        self.images.select_rows(idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images_of(idx),
            content: idx.iter().map(|&i| self.content[i]).collect(),
            style: idx.iter().map(|&i| self.style[i]).collect(),
            domain: self.domain.as_ref().map(|d| idx.iter().map(|&i| d[i]).collect()),
            masks: idx.iter().flat_map(|&i| self.mask(i).iter().copied()).collect(),
        }
    }

    pub fn concat(parts: &[&LabeledSet]) -> Result<Self> {
        let n: usize = parts.iter().map(|p| p.len()).sum();
        let mut data = Vec::with_capacity(n * IMAGE_LEN);
        let mut out = Self {
            images: Tensor::zeros(&[0, CHANNELS, IMAGE_SIZE, IMAGE_SIZE]),
            content: Vec::with_capacity(n),
            style: Vec::with_capacity(n),
            domain: Some(Vec::with_capacity(n)),
            masks: Vec::with_capacity(n * PLANE),
        };
        for p in parts {
            data.extend_from_slice(p.images.data());
            out.content.extend_from_slice(&p.content);
            out.style.extend_from_slice(&p.style);
            out.masks.extend_from_slice(&p.masks);
            match (&mut out.domain, &p.domain) {
                (Some(d), Some(pd)) => d.extend_from_slice(pd),
                (d, _) => *d = None,
            }
        }
        out.images = Tensor::new(&[n, CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)?;
        Ok(out)
    }

    pub fn without_domains(mut self) -> Self {
        self.domain = None;
        self
    }

    /// Row-major one-hot matrix `[len, k]` of the content labels of `idx`.
    pub fn one_hot(&self, idx: &[usize], k: usize) -> Tensor<f32> {
        one_hot(&idx.iter().map(|&i| self.content[i]).collect::<Vec<_>>(), k)
    }
}

pub fn one_hot<T: crate::numcore::Scalar>(labels: &[usize], k: usize) -> Tensor<T> {
    Tensor::from_fn(&[labels.len(), k], |i| if labels[i / k] == i % k { T::one() } else { T::zero() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
}

const KIND_DATA: u64 = 1;
const KIND_STIMULUS: u64 = 2;

/// Independent RNG for one sample, keyed by its coordinates.
fn sample_rng(seed: u64, kind: u64, a: usize, b: usize, c: usize, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 60) | ((a as u64) << 48) | ((b as u64) << 40) | ((c as u64) << 32) | i as u64);
    rng
}

fn draw_shift<R: Rng>(rng: &mut R, max: usize) -> (i32, i32) {
    let m = max as i32;
    (rng.gen_range(-m..=m), rng.gen_range(-m..=m))
}

struct Builder {
    data: Vec<f32>,
    content: Vec<usize>,
    style: Vec<usize>,
    domain: Vec<usize>,
    masks: Vec<f32>,
}

impl Builder {
    fn new(cap: usize) -> Self {
        Self {
            data: Vec::with_capacity(cap * IMAGE_LEN),
            content: Vec::with_capacity(cap),
            style: Vec::with_capacity(cap),
            domain: Vec::with_capacity(cap),
            masks: Vec::with_capacity(cap * PLANE),
        }
    }

    fn push(&mut self, mut rng: ChaCha8Rng, max_shift: usize, content: usize, style: usize, domain: usize, recipe: &Recipe) {
        let (dy, dx) = draw_shift(&mut rng, max_shift);
        let mask = pattern(content, dy, dx);
        let start = self.data.len();
        self.data.resize(start + IMAGE_LEN, 0.0);
        render(&mask, recipe, &mut rng, &mut self.data[start..]);
        self.masks.extend_from_slice(&mask);
        self.content.push(content);
        self.style.push(style);
        self.domain.push(domain);
    }

    fn finish(self) -> Result<LabeledSet> {
        let n = self.content.len();
        Ok(LabeledSet {
            images: Tensor::new(&[n, CHANNELS, IMAGE_SIZE, IMAGE_SIZE], self.data)?,
            content: self.content,
            style: self.style,
            domain: Some(self.domain),
            masks: self.masks,
        })
    }
}

/// Renders every class in each requested domain and splits each
/// (domain, class) group by index into train/val/test.
pub fn generate_dataset(spec: &StyleShiftSpec, domains: &[usize]) -> Result<Splits> {
    spec.validate()?;
    if domains.is_empty() {
        return Err(DataError::NoDomains);
    }
    if let Some(&d) = domains.iter().find(|&&d| d >= spec.num_style_domains) {
        return Err(DataError::UnknownDomain(d));
    }
    let n = spec.samples_per_class_per_domain;
    let n_train = (n as f64 * spec.split[0]).round() as usize;
    let n_val = ((n as f64 * spec.split[1]).round() as usize).min(n - n_train);
    let groups = domains.len() * spec.num_content_classes;
    let mut parts = [
        Builder::new(groups * n_train),
        Builder::new(groups * n_val),
        Builder::new(groups * (n - n_train - n_val)),
    ];
    for &d in domains {
        for k in 0..spec.num_content_classes {
            let recipe = spec.recipe(k, d);
            for i in 0..n {
                let part = if i < n_train {
                    0
                } else if i < n_train + n_val {
                    1
                } else {
                    2
                };
                let rng = sample_rng(spec.seed, KIND_DATA, d, k, k, i);
                parts[part].push(rng, spec.max_shift, k, k, d, &recipe);
            }
        }
    }
    let [train, val, test] = parts;
    Ok(Splits {
        train: train.finish()?,
        val: val.finish()?,
        test: test.finish()?,
    })
}

/// `K * (K - 1) * n_per_pair` stimuli: geometry of class `i`, rendered with the
/// undisturbed recipe of class `j != i`.
pub fn generate_cue_conflict(spec: &StyleShiftSpec, n_per_pair: usize) -> Result<StimulusSet> {
    spec.validate()?;
    if n_per_pair == 0 {
        return Err(DataError::Spec("n_per_pair must be at least 1".into()));
    }
    let k = spec.num_content_classes;
    let neutral = DomainStyle::neutral();
    let mut b = Builder::new(k * (k - 1) * n_per_pair);
    for i in 0..k {
        for j in (0..k).filter(|&j| j != i) {
            let recipe = Recipe::compose(&spec.class_styles[j], &neutral);
            for s in 0..n_per_pair {
                let rng = sample_rng(spec.seed, KIND_STIMULUS, 0, i, j, s);
                b.push(rng, spec.max_shift, i, j, usize::MAX, &recipe);
            }
        }
    }
    let mut set = b.finish()?;
    set.domain = None;
    Ok(set)
}

/// Source and target data for leave-one-domain-out training.
#[derive(Clone, Debug)]
pub struct Holdout {
    /// Training splits of the source domains, domain identity dropped.
    pub source: Splits,
    pub target: Splits,
    pub source_domains: Vec<usize>,
    pub target_domain: usize,
}

/// Multi-source split: every domain except `target` is a source.
pub fn holdout_domain(spec: &StyleShiftSpec, target: usize) -> Result<Holdout> {
    let sources: Vec<usize> = (0..spec.num_style_domains).filter(|&d| d != target).collect();
    holdout_with_sources(spec, target, &sources)
}

/// Single-source split: train on `source` only, evaluate on `target`.
pub fn single_source(spec: &StyleShiftSpec, source: usize, target: usize) -> Result<Holdout> {
    if source == target {
        return Err(DataError::Spec("source and target domain coincide".into()));
    }
    holdout_with_sources(spec, target, &[source])
}

fn holdout_with_sources(spec: &StyleShiftSpec, target: usize, sources: &[usize]) -> Result<Holdout> {
    if target >= spec.num_style_domains {
        return Err(DataError::UnknownDomain(target));
    }
    let src = generate_dataset(spec, sources)?;
    let tgt = generate_dataset(spec, &[target])?;
    Ok(Holdout {
        source: Splits {
            train: src.train.without_domains(),
            val: src.val.without_domains(),
            test: src.test.without_domains(),
        },
        target: tgt,
        source_domains: sources.to_vec(),
        target_domain: target,
    })
}

// ---------------------------------------------------------------- container

/// Dataset container.
///
/// ```text
/// offset  size    field
/// 0       8       magic b"SAGNETDS"
/// 8       4       format version, u32 LE (1)
/// 12      4       N, u32 LE
/// 16      4       C, u32 LE
/// 20      4       H, u32 LE
/// 24      4       W, u32 LE
/// 28      4*NCHW  images, f32 LE, row-major [N, C, H, W]
/// ```
///
/// Labels live in a CSV sidecar `<file>.labels.csv` with columns
/// `index,content,style,domain` (`domain` empty when unknown). Masks are not
/// stored; they are a generation-time artifact.
pub const DATASET_MAGIC: &[u8; 8] = b"SAGNETDS";

pub fn labels_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels.csv");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    index: usize,
    content: usize,
    style: usize,
    domain: Option<usize>,
}

pub fn save_set(set: &LabeledSet, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&1u32.to_le_bytes())?;
    for &d in set.images.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(set.images.numel() * 4);
    for v in set.images.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;

    let mut w = csv::Writer::from_path(labels_path(path)).map_err(|e| DataError::Format(e.to_string()))?;
    for i in 0..set.len() {
        w.serialize(LabelRow {
            index: i,
            content: set.content[i],
            style: set.style[i],
            domain: set.domain.as_ref().map(|d| d[i]),
        })
        .map_err(|e| DataError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_set(path: &Path) -> Result<LabeledSet> {
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut head = [0u8; 28];
    input.read_exact(&mut head)?;
    if &head[..8] != DATASET_MAGIC {
        return Err(DataError::Format("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes")) as usize;
    if word(8) != 1 {
        return Err(DataError::Format(format!("unsupported version {}", word(8))));
    }
    let shape = [word(12), word(16), word(20), word(24)];
    if shape[1..] != [CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(DataError::Format(format!("unexpected image shape {:?}", &shape[1..])));
    }
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != shape.iter().product::<usize>() * 4 {
        return Err(DataError::Format("payload size mismatch".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let images = Tensor::new(&shape, data)?;

    let mut r = csv::Reader::from_path(labels_path(path)).map_err(|e| DataError::Format(e.to_string()))?;
    let mut rows = Vec::with_capacity(shape[0]);
    for row in r.deserialize::<LabelRow>() {
        rows.push(row.map_err(|e| DataError::Format(e.to_string()))?);
    }
    if rows.len() != shape[0] || rows.iter().enumerate().any(|(i, r)| r.index != i) {
        return Err(DataError::Format("label sidecar does not match images".into()));
    }
    let domain = if rows.iter().all(|r| r.domain.is_some()) {
        Some(rows.iter().map(|r| r.domain.expect("checked")).collect())
    } else {
        None
    };
    Ok(LabeledSet {
        images,
        content: rows.iter().map(|r| r.content).collect(),
        style: rows.iter().map(|r| r.style).collect(),
        domain,
        masks: Vec::new(),
    })
}
