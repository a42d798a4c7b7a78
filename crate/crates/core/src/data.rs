//! Synthetic hazy/clear pairs from the atmospheric scattering model
//! `I = J * t + A * (1 - t)`, patch sampling, and PNG dataset I/O.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Transmission is clamped into `[T_MIN, 1]`.
pub const T_MIN: f32 = 0.05;
pub const AIRLIGHT_RANGE: (f64, f64) = (0.7, 1.0);

/// A clear image and its hazy counterpart, both `[3, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub hazy: Tensor<f32>,
    pub clear: Tensor<f32>,
}

/// Haze for one image: scalar airlight and a per-pixel transmission map.
#[derive(Clone, Debug, PartialEq)]
pub struct HazeParams {
    pub airlight: f32,
    /// `[H, W]`, values in `[T_MIN, 1]`.
    pub transmission: Tensor<f32>,
}

/// Controls for random haze fields.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HazeSpec {
    /// Coarse grid resolution upsampled to the image size.
    pub grid: usize,
    /// Lowest mean transmission; `1` means no haze.
    pub t_low: f32,
    /// Highest mean transmission.
    pub t_high: f32,
    /// Amplitude of the spatial variation around the mean.
    pub variation: f32,
}

impl Default for HazeSpec {
    fn default() -> Self {
        Self { grid: 4, t_low: 0.35, t_high: 0.75, variation: 0.15 }
    }
}

impl HazeParams {
    pub fn uniform(h: usize, w: usize, t: f32, airlight: f32) -> Result<Self> {
        Ok(Self { airlight, transmission: Tensor::full(vec![h, w], t.clamp(T_MIN, 1.0))? })
    }

    /// Smooth nonuniform haze: a random coarse grid bilinearly upsampled.
    pub fn random<R: Rng + ?Sized>(h: usize, w: usize, spec: &HazeSpec, rng: &mut R) -> Result<Self> {
        let g = spec.grid.max(2);
        let airlight = rng.gen_range(AIRLIGHT_RANGE.0..=AIRLIGHT_RANGE.1) as f32;
        let mean = if spec.t_high > spec.t_low { rng.gen_range(spec.t_low..spec.t_high) } else { spec.t_low };
        let coarse: Vec<f32> = (0..g * g).map(|_| mean + spec.variation * rng.gen_range(-1.0f32..1.0)).collect();
        let mut t = Vec::with_capacity(h * w);
        for y in 0..h {
            let fy = if h > 1 { y as f32 * (g - 1) as f32 / (h - 1) as f32 } else { 0.0 };
            let (y0, wy) = (fy.floor() as usize, fy.fract());
            let y1 = (y0 + 1).min(g - 1);
            for x in 0..w {
                let fx = if w > 1 { x as f32 * (g - 1) as f32 / (w - 1) as f32 } else { 0.0 };
                let (x0, wx) = (fx.floor() as usize, fx.fract());
                let x1 = (x0 + 1).min(g - 1);
                let top = coarse[y0 * g + x0] * (1.0 - wx) + coarse[y0 * g + x1] * wx;
                let bot = coarse[y1 * g + x0] * (1.0 - wx) + coarse[y1 * g + x1] * wx;
                t.push((top * (1.0 - wy) + bot * wy).clamp(T_MIN, 1.0));
            }
        }
        Ok(Self { airlight, transmission: Tensor::new(vec![h, w], t)? })
    }
}

/// Applies the scattering model to `clear: [3, H, W]`; output clamped to `[0, 1]`.
pub fn synthesize_haze(clear: &Tensor<f32>, p: &HazeParams) -> Result<Tensor<f32>> {
    let [c, h, w] = clear.dims::<3>("synthesize_haze")?;
    if p.transmission.shape() != [h, w] {
        return Err(Error::shape(
            "synthesize_haze",
            format!("transmission {:?} does not match image {h}x{w}", p.transmission.shape()),
        ));
    }
    let t = p.transmission.data();
    let a = p.airlight;
    let data = clear
        .data()
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let tv = t[i % (h * w)];
            (j * tv + a * (1.0 - tv)).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(vec![c, h, w], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Checkerboard,
    Gradient,
    Noise,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Checkerboard, Texture::Gradient, Texture::Noise];
}

/// Band-limited value noise: random lattice, bilinear interpolation.
fn value_noise<R: Rng + ?Sized>(h: usize, w: usize, cells: usize, rng: &mut R) -> Vec<f32> {
    let g = cells + 1;
    let lattice: Vec<f32> = (0..g * g).map(|_| rng.gen()).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f32 * cells as f32 / h as f32;
        let (y0, wy) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f32 * cells as f32 / w as f32;
            let (x0, wx) = (fx.floor() as usize, fx.fract());
            let v00 = lattice[y0 * g + x0];
            let v01 = lattice[y0 * g + x0 + 1];
            let v10 = lattice[(y0 + 1) * g + x0];
            let v11 = lattice[(y0 + 1) * g + x0 + 1];
            out.push((v00 * (1.0 - wx) + v01 * wx) * (1.0 - wy) + (v10 * (1.0 - wx) + v11 * wx) * wy);
        }
    }
    out
}

/// Procedural clear image `[3, H, W]` in `[0, 1]`.
pub fn clear_texture<R: Rng + ?Sized>(kind: Texture, h: usize, w: usize, rng: &mut R) -> Result<Tensor<f32>> {
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    match kind {
        Texture::Checkerboard => {
            let cell = rng.gen_range(4..=12usize);
            let lo: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.45));
            let hi: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.55..1.0));
            for y in 0..h {
                for x in 0..w {
                    let on = (y / cell + x / cell) % 2 == 0;
                    for c in 0..3 {
                        data[c * plane + y * w + x] = if on { hi[c] } else { lo[c] };
                    }
                }
            }
        }
        Texture::Gradient => {
            for c in 0..3 {
                let (ax, ay) = (rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0));
                let base = rng.gen_range(0.2f32..0.8);
                for y in 0..h {
                    for x in 0..w {
                        let u = x as f32 / w.max(1) as f32 - 0.5;
                        let v = y as f32 / h.max(1) as f32 - 0.5;
                        data[c * plane + y * w + x] = (base + 0.5 * (ax * u + ay * v)).clamp(0.0, 1.0);
                    }
                }
            }
        }
        Texture::Noise => {
            let cells = rng.gen_range(3..=8usize);
            for c in 0..3 {
                let n = value_noise(h, w, cells, rng);
                data[c * plane..][..plane].copy_from_slice(&n);
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Seed of sample `index` of a set generated from `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` synthetic pairs of size `h x w`, cycling through the texture kinds.
pub fn synth_pairs(n: usize, h: usize, w: usize, spec: &HazeSpec, seed: u64) -> Result<Vec<Pair>> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let clear = clear_texture(Texture::ALL[i % Texture::ALL.len()], h, w, &mut rng)?;
            let haze = HazeParams::random(h, w, spec, &mut rng)?;
            let hazy = synthesize_haze(&clear, &haze)?;
            Ok(Pair { hazy, clear })
        })
        .collect()
}

/// A batch of aligned crops, each `[n, 3, patch, patch]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub hazy: Tensor<f32>,
    pub clear: Tensor<f32>,
}

/// Crop window: source pair index and top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub pair: usize,
    pub top: usize,
    pub left: usize,
}

pub fn plan_crops(pairs: &[Pair], patch: usize, n: usize, seed: u64) -> Result<Vec<Crop>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to sample from".into()));
    }
    if patch == 0 || patch % 4 != 0 {
        return Err(Error::InvalidArgument(format!("patch size {patch} must be a positive multiple of 4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let pair = rng.gen_range(0..pairs.len());
            let [_, h, w] = pairs[pair].clear.dims::<3>("sample_patches")?;
            if patch > h.min(w) {
                return Err(Error::InvalidArgument(format!("patch size {patch} exceeds image {h}x{w}")));
            }
            Ok(Crop { pair, top: rng.gen_range(0..=h - patch), left: rng.gen_range(0..=w - patch) })
        })
        .collect()
}

fn crop_into(src: &Tensor<f32>, c: &Crop, patch: usize, out: &mut Vec<f32>) {
    let [ch, _, w] = [src.dim(0), src.dim(1), src.dim(2)];
    let plane = src.dim(1) * w;
    for k in 0..ch {
        for y in 0..patch {
            let row = k * plane + (c.top + y) * w + c.left;
            out.extend_from_slice(&src.data()[row..row + patch]);
        }
    }
}

/// `n` random crops with identical windows on the hazy and clear images.
pub fn sample_patches(pairs: &[Pair], patch: usize, n: usize, seed: u64) -> Result<Batch> {
    let crops = plan_crops(pairs, patch, n, seed)?;
    let mut hazy = Vec::with_capacity(n * 3 * patch * patch);
    let mut clear = Vec::with_capacity(hazy.capacity());
    for c in &crops {
        crop_into(&pairs[c.pair].hazy, c, patch, &mut hazy);
        crop_into(&pairs[c.pair].clear, c, patch, &mut clear);
    }
    let shape = vec![n, 3, patch, patch];
    Ok(Batch { hazy: Tensor::new(shape.clone(), hazy)?, clear: Tensor::new(shape, clear)? })
}

/// Stacks `[3, H, W]` images into `[n, 3, H, W]`.
pub fn stack(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("nothing to stack".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        im.expect_same_shape(first, "stack")?;
        data.extend_from_slice(im.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

/// Reads an 8-bit PNG as `[3, H, W]` in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Quantizes `[3, H, W]` (clamped to `[0, 1]`) to an 8-bit RGB PNG.
pub fn write_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let [c, h, w] = t.dims::<3>("write_png")?;
    if c != 3 {
        return Err(Error::Dim { op: "write_png", axis: "channels", expected: 3, actual: c });
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for k in 0..3 {
            let v = t.data()[k * h * w + y as usize * w + x as usize];
            px[k] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

pub const HAZY_DIR: &str = "input";
pub const CLEAR_DIR: &str = "gt";

/// Writes pairs as `<root>/input/NNNN.png` and `<root>/gt/NNNN.png`.
pub fn write_dataset(root: &Path, pairs: &[Pair]) -> Result<()> {
    for sub in [HAZY_DIR, CLEAR_DIR] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (i, p) in pairs.iter().enumerate() {
        let name = format!("{i:04}.png");
        write_png(&root.join(HAZY_DIR).join(&name), &p.hazy)?;
        write_png(&root.join(CLEAR_DIR).join(&name), &p.clear)?;
    }
    Ok(())
}

/// Loads every `<root>/input/*.png` that has a same-named `<root>/gt/` file,
/// in filename order.
pub fn load_dataset(root: &Path) -> Result<Vec<Pair>> {
    let hazy_dir = root.join(HAZY_DIR);
    let mut names: Vec<PathBuf> = fs::read_dir(&hazy_dir)
        .map_err(|e| Error::io(&hazy_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    names.sort();
    let mut pairs = Vec::with_capacity(names.len());
    for hazy_path in names {
        let file = hazy_path.file_name().expect("read_dir entries have names");
        let clear_path = root.join(CLEAR_DIR).join(file);
        if !clear_path.exists() {
            return Err(Error::InvalidArgument(format!("{} has no ground truth at {}", hazy_path.display(), clear_path.display())));
        }
        let hazy = read_png(&hazy_path)?;
        let clear = read_png(&clear_path)?;
        if hazy.shape() != clear.shape() {
            return Err(Error::shape("load_dataset", format!("{} and its ground truth differ in size", hazy_path.display())));
        }
        pairs.push(Pair { hazy, clear });
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(format!("no PNG pairs under {}", root.display())));
    }
    Ok(pairs)
}
