//! PNG input and output, bicubic resampling, dataset manifests and patch
//! sampling, plus a seeded synthetic texture generator.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wavelet::reflect;

/// Reads an 8-bit RGB PNG as `[3,H,W]` with values `byte / 255`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let fmt = |e: png::DecodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(fmt)?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "{}: only 8-bit RGB PNG is supported, found {:?} at {:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let out = reader.next_frame(&mut buf).map_err(fmt)?;
    let (w, h) = (out.width as usize, out.height as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..h {
        let row = &buf[y * out.line_size..y * out.line_size + 3 * w];
        for x in 0..w {
            for c in 0..3 {
                data[c * plane + y * w + x] = f64::from(row[3 * x + c]) / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Quantizes to bytes, clamping to `[0, 1]` and rounding half away from zero.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `[3,H,W]` (RGB) or `[1,H,W]` (grayscale) as an 8-bit PNG.
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = match *image.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        ref s => return Err(Error::dim("save_png", format!("expected [3,H,W] or [1,H,W], got {s:?}"))),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let plane = h * w;
    let d = image.data();
    let mut bytes = Vec::with_capacity(c * plane);
    for i in 0..plane {
        for ch in 0..c {
            bytes.push(to_byte(d[ch * plane + i]));
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if c == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Eight);
    let fmt = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(&bytes).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Source indices and normalized weights for each output sample of one axis.
/// Output pixel centers map to `(i + 0.5) * in/out - 0.5`; when shrinking,
/// the kernel is stretched by the scale factor.
pub fn resize_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for j in lo..=hi {
                let wt = cubic((j as f64 - center) / stretch);
                if wt == 0.0 {
                    continue;
                }
                total += wt;
                let src = reflect(j, n_in);
                match taps.iter_mut().find(|(s, _)| *s == src) {
                    Some(t) => t.1 += wt,
                    None => taps.push((src, wt)),
                }
            }
            for t in taps.iter_mut() {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Separable bicubic resize of a `[C,H,W]` image.
pub fn bicubic_resize(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::dim("bicubic_resize", format!("expected [C,H,W], got {s:?}"))),
    };
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::contract("bicubic_resize", "sizes must be >= 1"));
    }
    let wy = resize_weights(h, out_h);
    let wx = resize_weights(w, out_w);
    let d = image.data();
    let mut rows = vec![0.0; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            let src = &d[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (x, taps) in wx.iter().enumerate() {
                rows[(ch * h + y) * out_w + x] = taps.iter().map(|&(s, wt)| wt * src[s]).sum();
            }
        }
    }
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for (y, taps) in wy.iter().enumerate() {
            for x in 0..out_w {
                out[(ch * out_h + y) * out_w + x] =
                    taps.iter().map(|&(s, wt)| wt * rows[(ch * h + s) * out_w + x]).sum();
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// One HR/LR pair of a manifest, paths relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: usize,
    pub hr: PathBuf,
    pub lr: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub scale: usize,
    pub patch_size_lr: usize,
    pub split: String,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# scale\t{}\n# patch_size_lr\t{}\n# split\t{}\n",
            self.scale, self.patch_size_lr, self.split
        );
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.id, slash(&e.hr), slash(&e.lr)));
        }
        s
    }

    pub fn parse(text: &str, root: &Path) -> Result<DatasetManifest> {
        let mut m = DatasetManifest {
            root: root.to_path_buf(),
            scale: 0,
            patch_size_lr: 16,
            split: "train".into(),
            entries: Vec::new(),
        };
        for (n, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", n + 1));
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if let Some(key) = line.strip_prefix("# ") {
                let key = key.split('\t').next().unwrap_or("");
                let value = fields.get(1).ok_or_else(|| bad("header without value"))?;
                match key {
                    "scale" => m.scale = value.parse().map_err(|_| bad("bad scale"))?,
                    "patch_size_lr" => m.patch_size_lr = value.parse().map_err(|_| bad("bad patch size"))?,
                    "split" => m.split = value.to_string(),
                    _ => return Err(bad(&format!("unknown header {key}"))),
                }
                continue;
            }
            let [id, hr, lr] = fields[..] else {
                return Err(bad("expected sample_id, hr_path, lr_path"));
            };
            let id: usize = id.parse().map_err(|_| bad("bad sample id"))?;
            if id != m.entries.len() {
                return Err(bad("sample ids must be dense from 0"));
            }
            m.entries.push(ManifestEntry {
                id,
                hr: hr.into(),
                lr: lr.into(),
            });
        }
        if m.scale == 0 {
            return Err(Error::Format("manifest has no scale header".into()));
        }
        Ok(m)
    }

    /// Reads `path` (a manifest file or a directory holding `manifest.tsv`)
    /// and checks that every referenced image exists.
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = DatasetManifest::parse(&text, &root)?;
        for e in &m.entries {
            for p in [m.root.join(&e.hr), m.root.join(&e.lr)] {
                if !p.is_file() {
                    return Err(Error::io(&p, std::io::Error::from(std::io::ErrorKind::NotFound)));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads every `(lr, hr)` image pair in id order.
    pub fn load_images(&self) -> Result<Vec<ImagePair>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(ImagePair {
                    id: e.id,
                    lr: load_png(&self.root.join(&e.lr))?,
                    hr: load_png(&self.root.join(&e.hr))?,
                })
            })
            .collect()
    }
}

fn slash(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// A low-resolution input with its high-resolution target, both `[3,·,·]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: usize,
    pub lr: Tensor,
    pub hr: Tensor,
}

/// Patches are image pairs; `id` indexes the training sample.
pub type PatchPair = ImagePair;

fn crop(image: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
    let (ih, iw) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        d[(c * ih + y0 + y) * iw + x0 + x]
    })
}

/// Uniform top-left corners for `count` patches of size `p` inside an
/// `h x w` image.
pub fn sample_patch_coords(rng: &mut ChaCha8Rng, h: usize, w: usize, p: usize, count: usize) -> Vec<(usize, usize)> {
    (0..count)
        .map(|_| (rng.random_range(0..=h - p), rng.random_range(0..=w - p)))
        .collect()
}

/// Aligned patch pairs drawn round-robin over the images of `manifest`.
/// Returns the patches and the number of images skipped for being smaller
/// than one patch.
pub fn extract_patch_pairs(
    manifest: &DatasetManifest,
    patch_size_lr: usize,
    count: usize,
    seed: u64,
) -> Result<(Vec<PatchPair>, usize)> {
    let images = manifest.load_images()?;
    patches_from_images(&images, manifest.scale, patch_size_lr, count, seed)
}

pub fn patches_from_images(
    images: &[ImagePair],
    scale: usize,
    patch_size_lr: usize,
    count: usize,
    seed: u64,
) -> Result<(Vec<PatchPair>, usize)> {
    if patch_size_lr == 0 {
        return Err(Error::contract("extract_patch_pairs", "patch size must be >= 1"));
    }
    let hp = patch_size_lr * scale;
    let usable: Vec<&ImagePair> = images
        .iter()
        .filter(|im| {
            let (lh, lw) = (im.lr.shape()[1], im.lr.shape()[2]);
            lh >= patch_size_lr && lw >= patch_size_lr && im.hr.shape()[1] >= lh * scale && im.hr.shape()[2] >= lw * scale
        })
        .collect();
    let skipped = images.len() - usable.len();
    if skipped > 0 {
        log::warn!("{skipped} image(s) smaller than one {hp}x{hp} patch were skipped");
    }
    if count == 0 {
        return Ok((Vec::new(), skipped));
    }
    if usable.is_empty() {
        return Err(Error::contract("extract_patch_pairs", "no image is large enough for one patch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for id in 0..count {
        let im = usable[id % usable.len()];
        let (lh, lw) = (im.lr.shape()[1], im.lr.shape()[2]);
        let (y, x) = sample_patch_coords(&mut rng, lh, lw, patch_size_lr, 1)[0];
        out.push(PatchPair {
            id,
            lr: crop(&im.lr, y, x, patch_size_lr, patch_size_lr),
            hr: crop(&im.hr, y * scale, x * scale, hp, hp),
        });
    }
    Ok((out, skipped))
}

/// Crops every PNG in `hr_dir` to multiples of `4 * scale` (top-left
/// anchored), writes the cropped HR and its bicubic LR under `out_dir`, and
/// writes `out_dir/manifest.tsv`.
pub fn prepare_dataset(hr_dir: &Path, out_dir: &Path, scale: usize, patch_size_lr: usize) -> Result<DatasetManifest> {
    if scale < 1 {
        return Err(Error::contract("prepare_dataset", "scale must be >= 1"));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(hr_dir)
        .map_err(|e| Error::io(hr_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::contract(
            "prepare_dataset",
            format!("no PNG files in {}", hr_dir.display()),
        ));
    }
    let unit = 4 * scale;
    let mut manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        scale,
        patch_size_lr,
        split: "train".into(),
        entries: Vec::new(),
    };
    for (id, file) in files.iter().enumerate() {
        let img = load_png(file)?;
        let (h, w) = (img.shape()[1] / unit * unit, img.shape()[2] / unit * unit);
        if h == 0 || w == 0 {
            return Err(Error::contract(
                "prepare_dataset",
                format!("{} is smaller than {unit}x{unit}", file.display()),
            ));
        }
        let hr = crop(&img, 0, 0, h, w);
        let lr = bicubic_resize(&hr, h / scale, w / scale)?;
        let entry = ManifestEntry {
            id,
            hr: PathBuf::from(format!("hr/{id:04}.png")),
            lr: PathBuf::from(format!("lr/{id:04}.png")),
        };
        save_png(&out_dir.join(&entry.hr), &hr)?;
        save_png(&out_dir.join(&entry.lr), &lr)?;
        manifest.entries.push(entry);
    }
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Deterministic texture: a few oriented sinusoids per channel plus hard
/// edges, in `[0, 1]`.
pub fn synth_texture(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Tensor::zeros(&[3, h, w]);
    let base: Vec<f64> = (0..3).map(|_| rng.random_range(0.3..0.7)).collect();
    let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let period = rng.random_range(3.0..16.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.05..0.18);
            let tint = [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];
            (theta, 2.0 * PI / period, phase, amp, tint)
        })
        .collect();
    let edges: Vec<(f64, f64, f64, [f64; 3])> = (0..2)
        .map(|_| {
            let theta = rng.random_range(0.0..2.0 * PI);
            let offset = rng.random_range(-0.3..0.3) * h.min(w) as f64;
            let step = [
                rng.random_range(-0.25..0.25),
                rng.random_range(-0.25..0.25),
                rng.random_range(-0.25..0.25),
            ];
            (theta.cos(), theta.sin(), offset, step)
        })
        .collect();
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let plane = h * w;
    let d = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 - cy, x as f64 - cx);
            for c in 0..3 {
                let mut v = base[c];
                for &(theta, k, phase, amp, tint) in &waves {
                    v += amp * tint[c] * (k * (fx * theta.cos() + fy * theta.sin()) + phase).sin();
                }
                for &(ex, ey, off, step) in &edges {
                    if fx * ex + fy * ey > off {
                        v += step[c];
                    }
                }
                d[c * plane + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Writes `count` synthetic textures as `NNNN.png` into `dir`.
pub fn write_synth_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.random()).collect();
    (0..count)
        .map(|i| {
            let path = dir.join(format!("{i:04}.png"));
            save_png(&path, &synth_texture(size, size, seeds[i]))?;
            Ok(path)
        })
        .collect()
}
