//! Multi-scale token hierarchies and the synthetic class-conditional corpus.
//!
//! Images are tokenized by area-average pooling to every scale followed by
//! nearest-bucket quantization of the intensity. Each scale is quantized
//! directly rather than as a residual of the coarser ones; the next-scale
//! transformer sees the same kind of coarse-to-fine token stream either way.

use std::io::{Read, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::tensor::read_u32;

const DATASET_MAGIC: &[u8; 4] = b"NSPD";
const DATASET_VERSION: u32 = 1;

/// Number of procedural shape families: disk, bar, checker, gradient.
pub const SHAPE_FAMILIES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PyramidConfig {
    pub scale_sides: Vec<usize>,
    pub vocab: usize,
    pub num_classes: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            scale_sides: vec![1, 2, 3, 4, 6, 8],
            vocab: 16,
            num_classes: 4,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        validate_sides(&self.scale_sides)?;
        if self.scale_sides[0] != 1 {
            return Err(invalid("the coarsest scale must be a single token"));
        }
        if self.vocab < 2 || self.vocab > u16::MAX as usize + 1 {
            return Err(invalid(format!("vocab {} outside [2, 65536]", self.vocab)));
        }
        if self.num_classes == 0 {
            return Err(invalid("num_classes must be at least 1"));
        }
        Ok(())
    }

    pub fn num_scales(&self) -> usize {
        self.scale_sides.len()
    }

    pub fn finest_side(&self) -> usize {
        *self.scale_sides.last().expect("validated non-empty")
    }

    /// Σ s_k², the flattened sequence length.
    pub fn total_tokens(&self) -> usize {
        self.scale_sides.iter().map(|s| s * s).sum()
    }
}

pub(crate) fn validate_sides(sides: &[usize]) -> Result<()> {
    if sides.is_empty() {
        return Err(invalid("at least one scale is required"));
    }
    if sides[0] == 0 || sides.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid(format!("scale sides {sides:?} must be positive and strictly increasing")));
    }
    Ok(())
}

/// `[start, end)` of every scale in the flattened stream.
pub fn scale_boundaries(sides: &[usize]) -> Vec<Range<usize>> {
    let mut start = 0;
    sides
        .iter()
        .map(|s| {
            let r = start..start + s * s;
            start = r.end;
            r
        })
        .collect()
}

/// Per-scale integer token grids, coarse to fine.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenHierarchy {
    maps: Vec<Vec<u16>>,
    scale_sides: Vec<usize>,
    vocab: usize,
}

impl TokenHierarchy {
    pub fn new(maps: Vec<Vec<u16>>, scale_sides: Vec<usize>, vocab: usize) -> Result<Self> {
        validate_sides(&scale_sides)?;
        if scale_sides[0] != 1 {
            return Err(invalid("the coarsest scale must be a single token"));
        }
        if maps.len() != scale_sides.len() {
            return Err(invalid(format!("{} maps for {} scales", maps.len(), scale_sides.len())));
        }
        for (k, (m, s)) in maps.iter().zip(&scale_sides).enumerate() {
            if m.len() != s * s {
                return Err(invalid(format!("map {k} has {} tokens, side {s} needs {}", m.len(), s * s)));
            }
            if let Some(t) = m.iter().find(|&&t| t as usize >= vocab) {
                return Err(invalid(format!("token {t} outside vocab {vocab}")));
            }
        }
        Ok(Self {
            maps,
            scale_sides,
            vocab,
        })
    }

    pub fn maps(&self) -> &[Vec<u16>] {
        &self.maps
    }

    pub fn map(&self, k: usize) -> &[u16] {
        &self.maps[k]
    }

    pub fn scale_sides(&self) -> &[usize] {
        &self.scale_sides
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn total_tokens(&self) -> usize {
        self.maps.iter().map(Vec::len).sum()
    }

    /// Row-major per scale, concatenated coarse to fine.
    pub fn flatten(&self) -> (Vec<u16>, Vec<Range<usize>>) {
        let seq = self.maps.iter().flatten().copied().collect();
        (seq, scale_boundaries(&self.scale_sides))
    }

    pub fn unflatten(seq: &[u16], scale_sides: &[usize], vocab: usize) -> Result<Self> {
        validate_sides(scale_sides)?;
        let bounds = scale_boundaries(scale_sides);
        let total = bounds.last().map_or(0, |r| r.end);
        if seq.len() != total {
            return Err(invalid(format!("sequence of {} tokens, geometry needs {total}", seq.len())));
        }
        let maps = bounds.into_iter().map(|r| seq[r].to_vec()).collect();
        Self::new(maps, scale_sides.to_vec(), vocab)
    }

    /// Replaces one token; used by tests and perturbation studies.
    pub fn with_token(&self, scale: usize, index: usize, token: u16) -> Result<Self> {
        let mut maps = self.maps.clone();
        *maps
            .get_mut(scale)
            .and_then(|m| m.get_mut(index))
            .ok_or_else(|| invalid(format!("no token {index} at scale {scale}")))? = token;
        Self::new(maps, self.scale_sides.clone(), self.vocab)
    }
}

/// A grayscale image with intensities in `[0, 1]` and its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub side: usize,
    pub pixels: Vec<f64>,
    pub class_id: usize,
}

/// A tokenized training example.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    pub class_id: usize,
    pub hierarchy: TokenHierarchy,
}

pub fn quantize(value: f64, vocab: usize) -> Result<u16> {
    if !(0.0..=1.0).contains(&value) {
        return Err(invalid(format!("intensity {value} outside [0, 1]")));
    }
    let t = ((value * vocab as f64).floor() as usize).min(vocab - 1);
    Ok(t as u16)
}

/// Bucket centre of a token.
pub fn dequantize(token: u16, vocab: usize) -> f64 {
    (token as f64 + 0.5) / vocab as f64
}

/// Length of the overlap between `[a0, a1)` and `[b0, b1)`.
fn overlap(a0: usize, a1: usize, b0: usize, b1: usize) -> usize {
    a1.min(b1).saturating_sub(a0.max(b0))
}

/// Area-average downsampling of a `side × side` grid to `target × target`.
///
/// Coordinates are scaled by `target` so that every cell boundary is an
/// integer, which keeps the weights exact.
pub fn area_downsample(pixels: &[f64], side: usize, target: usize) -> Vec<f64> {
    if target == side {
        return pixels.to_vec();
    }
    // Cell i spans [i·side, (i+1)·side); pixel p spans [p·target, (p+1)·target).
    let weights: Vec<Vec<(usize, f64)>> = (0..target)
        .map(|i| {
            (0..side)
                .filter_map(|p| {
                    let o = overlap(i * side, (i + 1) * side, p * target, (p + 1) * target);
                    (o > 0).then_some((p, o as f64))
                })
                .collect()
        })
        .collect();
    let area = (side * side) as f64;
    let mut out = Vec::with_capacity(target * target);
    for wy in &weights {
        for wx in &weights {
            let mut acc = 0.0;
            for &(py, oy) in wy {
                for &(px, ox) in wx {
                    acc += oy * ox * pixels[py * side + px];
                }
            }
            out.push(acc / area);
        }
    }
    out
}

pub fn build_pyramid(image: &SyntheticImage, config: &PyramidConfig) -> Result<TokenHierarchy> {
    config.validate()?;
    let side = config.finest_side();
    if image.side != side || image.pixels.len() != side * side {
        return Err(invalid(format!("image side {} does not match finest scale {side}", image.side)));
    }
    let maps = config
        .scale_sides
        .iter()
        .map(|&s| {
            area_downsample(&image.pixels, side, s)
                .into_iter()
                // pooled values can leave [0, 1] by an ulp
                .map(|v| quantize(v.clamp(0.0, 1.0), config.vocab))
                .collect::<Result<Vec<u16>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    TokenHierarchy::new(maps, config.scale_sides.clone(), config.vocab)
}

/// Bucket-centre intensities of the finest map.
pub fn decode_to_image(hierarchy: &TokenHierarchy) -> Vec<f64> {
    let last = hierarchy.maps.last().expect("hierarchy has at least one scale");
    last.iter().map(|&t| dequantize(t, hierarchy.vocab)).collect()
}

fn smooth_step(edge_distance: f64) -> f64 {
    (edge_distance + 0.5).clamp(0.0, 1.0)
}

fn render(family: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = side as f64;
    let fg: f64 = rng.random_range(0.6..1.0);
    let bg: f64 = rng.random_range(0.0..0.3);
    let mut px = vec![0.0; side * side];
    match family {
        0 => {
            let cx = rng.random_range(0.3 * s..0.7 * s);
            let cy = rng.random_range(0.3 * s..0.7 * s);
            let r = rng.random_range(0.2 * s..0.4 * s);
            for y in 0..side {
                for x in 0..side {
                    let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                    px[y * side + x] = bg + (fg - bg) * smooth_step(r - d);
                }
            }
        }
        1 => {
            let vertical = rng.random_bool(0.5);
            let centre = rng.random_range(0.25 * s..0.75 * s);
            let half = rng.random_range(0.1 * s..0.25 * s);
            for y in 0..side {
                for x in 0..side {
                    let c = if vertical { x } else { y } as f64 + 0.5;
                    px[y * side + x] = bg + (fg - bg) * smooth_step(half - (c - centre).abs());
                }
            }
        }
        2 => {
            let cell = rng.random_range(1..=(side / 2).max(1));
            let (ox, oy) = (rng.random_range(0..cell.max(1)), rng.random_range(0..cell.max(1)));
            for y in 0..side {
                for x in 0..side {
                    let on = ((x + ox) / cell + (y + oy) / cell) % 2 == 0;
                    px[y * side + x] = if on { fg } else { bg };
                }
            }
        }
        _ => {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let span = (s - 1.0).max(1.0) * (dx.abs() + dy.abs());
            for y in 0..side {
                for x in 0..side {
                    let cx = x as f64 - (s - 1.0) / 2.0;
                    let cy = y as f64 - (s - 1.0) / 2.0;
                    let t = ((cx * dx + cy * dy) / span + 0.5).clamp(0.0, 1.0);
                    px[y * side + x] = bg + (fg - bg) * t;
                }
            }
        }
    }
    px
}

/// Renders image `index` of the corpus for `seed`. Every image has its own
/// random stream, so corpora can be generated in shards.
pub fn generate_image(seed: u64, index: u64, config: &PyramidConfig) -> SyntheticImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let class_id = rng.random_range(0..config.num_classes);
    let side = config.finest_side();
    let mut pixels = render(class_id % SHAPE_FAMILIES, side, &mut rng);
    // classes beyond the family count reuse a family with inverted polarity
    if (class_id / SHAPE_FAMILIES) % 2 == 1 {
        pixels.iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    SyntheticImage { side, pixels, class_id }
}

pub fn generate_dataset(seed: u64, n: usize, config: &PyramidConfig) -> Result<Vec<SyntheticImage>> {
    config.validate()?;
    if n == 0 {
        return Err(invalid("dataset size must be positive"));
    }
    Ok((0..n as u64).map(|i| generate_image(seed, i, config)).collect())
}

/// Generates and tokenizes `n` images.
pub fn synthetic_corpus(seed: u64, n: usize, config: &PyramidConfig) -> Result<Vec<Sample>> {
    generate_dataset(seed, n, config)?
        .iter()
        .map(|img| {
            Ok(Sample {
                class_id: img.class_id,
                hierarchy: build_pyramid(img, config)?,
            })
        })
        .collect()
}

pub fn write_dataset<W: Write>(w: &mut W, config: &PyramidConfig, samples: &[Sample]) -> Result<()> {
    config.validate()?;
    w.write_all(DATASET_MAGIC)?;
    for v in [DATASET_VERSION, samples.len() as u32, config.num_classes as u32, config.num_scales() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &s in &config.scale_sides {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    w.write_all(&(config.vocab as u32).to_le_bytes())?;
    for s in samples {
        if s.hierarchy.scale_sides != config.scale_sides || s.class_id >= config.num_classes {
            return Err(invalid("sample does not match the dataset geometry"));
        }
        w.write_all(&(s.class_id as u32).to_le_bytes())?;
        for t in s.hierarchy.maps.iter().flatten() {
            w.write_all(&t.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<(PyramidConfig, Vec<Sample>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n = read_u32(r)? as usize;
    let num_classes = read_u32(r)? as usize;
    let k = read_u32(r)? as usize;
    let scale_sides = (0..k).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let vocab = read_u32(r)? as usize;
    let config = PyramidConfig {
        scale_sides,
        vocab,
        num_classes,
    };
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    let total = config.total_tokens();
    let mut samples = Vec::with_capacity(n);
    let mut buf = vec![0u8; total * 2];
    for _ in 0..n {
        let class_id = read_u32(r)? as usize;
        r.read_exact(&mut buf)?;
        let seq: Vec<u16> = buf.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        let hierarchy = TokenHierarchy::unflatten(&seq, &config.scale_sides, vocab)
            .map_err(|e| Error::Format(e.to_string()))?;
        if class_id >= num_classes {
            return Err(Error::Format(format!("class {class_id} outside [0, {num_classes})")));
        }
        samples.push(Sample { class_id, hierarchy });
    }
    Ok((config, samples))
}

/// Binary PGM (P5) bytes for a square grid of 8-bit intensities.
pub fn pgm_bytes(side: usize, values: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

/// Intensities in `[0, 1]` rendered as a binary PGM.
pub fn image_pgm(side: usize, pixels: &[f64]) -> Vec<u8> {
    let bytes: Vec<u8> = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    pgm_bytes(side, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn cfg(sides: &[usize]) -> PyramidConfig {
        PyramidConfig {
            scale_sides: sides.to_vec(),
            vocab: 16,
            num_classes: 4,
        }
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.0, 16).unwrap(), 0);
        assert_eq!(quantize(1.0, 16).unwrap(), 15);
        assert_eq!(quantize(0.49, 16).unwrap(), 7);
        assert!(quantize(-0.01, 16).is_err());
        assert!(quantize(1.01, 16).is_err());
        assert!(quantize(f64::NAN, 16).is_err());
    }

    #[test]
    fn dataset_is_deterministic_and_in_range() {
        let c = PyramidConfig::default();
        let a = generate_dataset(0, 2, &c).unwrap();
        let b = generate_dataset(0, 2, &c).unwrap();
        assert_eq!(a, b);
        for img in generate_dataset(3, 200, &c).unwrap() {
            assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(img.class_id < 4);
        }
        assert!(generate_dataset(0, 0, &c).is_err());
    }

    #[test]
    fn class_histogram_is_near_uniform() {
        // 4000 draws of a fair 4-way choice: sd = sqrt(4000·0.25·0.75) ≈ 27.4,
        // so [900, 1100] is a ±3.6σ band.
        let imgs = generate_dataset(0, 4000, &PyramidConfig::default()).unwrap();
        let mut hist = [0usize; 4];
        imgs.iter().for_each(|i| hist[i.class_id] += 1);
        for h in hist {
            assert!((900..=1100).contains(&h), "{hist:?}");
        }
    }

    #[test]
    fn constant_image_gives_constant_pyramid() {
        let c = cfg(&[1, 2, 4]);
        let img = SyntheticImage {
            side: 4,
            pixels: vec![0.5; 16],
            class_id: 0,
        };
        let h = build_pyramid(&img, &c).unwrap();
        let q = quantize(0.5, 16).unwrap();
        for m in h.maps() {
            assert!(m.iter().all(|&t| t == q));
        }
        assert_eq!(h.map(0).len(), 1);
        let decoded = decode_to_image(&h);
        assert!(decoded.iter().all(|&v| v == 8.5 / 16.0));
    }

    #[test]
    fn non_dividing_scales_keep_constants_exact() {
        let c = PyramidConfig::default();
        for v in [0.5, 0.25, 0.0625, 1.0 / 3.0] {
            let img = SyntheticImage {
                side: 8,
                pixels: vec![v; 64],
                class_id: 0,
            };
            let h = build_pyramid(&img, &c).unwrap();
            let q = quantize(v, 16).unwrap();
            assert!(h.maps().iter().flatten().all(|&t| t == q), "value {v}");
        }
    }

    #[test]
    fn coarsest_token_is_quantized_mean() {
        let c = PyramidConfig::default();
        for img in generate_dataset(11, 50, &c).unwrap() {
            let mean = img.pixels.iter().sum::<f64>() / 64.0;
            let h = build_pyramid(&img, &c).unwrap();
            assert_eq!(h.map(0), &[quantize(mean, 16).unwrap()]);
        }
    }

    #[test]
    fn side_mismatch_rejected() {
        let img = SyntheticImage {
            side: 4,
            pixels: vec![0.0; 16],
            class_id: 0,
        };
        assert!(build_pyramid(&img, &PyramidConfig::default()).is_err());
    }

    #[test]
    fn flatten_examples() {
        let h = TokenHierarchy::new(vec![vec![3], vec![1, 2, 3, 4]], vec![1, 2], 16).unwrap();
        let (seq, b) = h.flatten();
        assert_eq!(seq.len(), 5);
        assert_eq!(b, vec![0..1, 1..5]);
        let (seq, _) = build_pyramid(
            &SyntheticImage {
                side: 4,
                pixels: vec![0.1; 16],
                class_id: 0,
            },
            &cfg(&[1, 2, 4]),
        )
        .unwrap()
        .flatten();
        assert_eq!(seq.len(), 21);
    }

    #[test]
    fn zero_tokens_decode_to_first_bucket_centre() {
        let h = TokenHierarchy::new(vec![vec![0], vec![0; 4]], vec![1, 2], 16).unwrap();
        assert!(decode_to_image(&h).iter().all(|&v| v == 0.5 / 16.0));
    }

    #[test]
    fn decode_error_is_bounded_by_half_a_bucket() {
        let c = PyramidConfig::default();
        for img in generate_dataset(5, 30, &c).unwrap() {
            let h = build_pyramid(&img, &c).unwrap();
            let dec = decode_to_image(&h);
            for (a, b) in dec.iter().zip(&img.pixels) {
                assert!((a - b).abs() <= 1.0 / 32.0 + 1e-12);
            }
        }
    }

    #[test]
    fn dataset_file_round_trip() {
        let c = PyramidConfig::default();
        let samples = synthetic_corpus(1, 5, &c).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &c, &samples).unwrap();
        assert_eq!(&buf[..4], b"NSPD");
        // header: magic + version, n, C, K + K sides + V
        let header = 4 + 4 * 4 + 4 * 6 + 4;
        assert_eq!(buf.len(), header + 5 * (4 + 2 * 130));
        let (c2, s2) = read_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(c2, c);
        assert_eq!(s2, samples);
        buf[0] = b'X';
        assert!(read_dataset(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn quantize_error_within_half_bucket(v in 0.0f64..=1.0, vocab in 2usize..300) {
            let t = quantize(v, vocab).unwrap();
            prop_assert!((t as usize) < vocab);
            prop_assert!((dequantize(t, vocab) - v).abs() <= 0.5 / vocab as f64 + 1e-15);
        }

        #[test]
        fn flatten_unflatten_bijection(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sides = vec![1, 2, 3, 5];
            let maps: Vec<Vec<u16>> = sides.iter().map(|s| (0..s * s).map(|_| rng.random_range(0..16)).collect()).collect();
            let h = TokenHierarchy::new(maps, sides.clone(), 16).unwrap();
            let (seq, _) = h.flatten();
            prop_assert_eq!(TokenHierarchy::unflatten(&seq, &sides, 16).unwrap(), h);
        }
    }
}
