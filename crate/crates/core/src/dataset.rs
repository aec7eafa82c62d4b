//! Folder-per-class image datasets, PNG I/O and the procedural shapes set
//! used by the desk experiments.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::DEFAULT_PROMPT_TEMPLATE;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Decodes a PNG into `[3, H, W]` with values in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Quantizes `[3, H, W]` (clamped to `[0, 1]`) to 8-bit RGB.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    if image.ndim() != 3 || image.dim(0) != 3 {
        return Err(Error::Dimension(format!("image must be [3, H, W], got {:?}", image.shape())));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = image.data()[(c * h + y as usize) * w + x as usize];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub count: usize,
    /// `[height, width]`.
    pub resolution: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub prompt_template: String,
    pub classes: Vec<ClassEntry>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Image files (non-hidden regular files) of one class folder, sorted.
pub fn class_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')))
        .collect())
}

impl DatasetManifest {
    /// Scans `root/<class>/*` and decodes every file. Fails on empty class
    /// folders, undecodable files (all listed) and mixed resolutions.
    pub fn scan(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Dataset(format!("dataset root {} is not a directory", root.display())));
        }
        let mut classes = Vec::new();
        let mut bad = Vec::new();
        for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
            let name = dir.file_name().unwrap().to_string_lossy().into_owned();
            let files = class_files(&dir)?;
            if files.is_empty() {
                return Err(Error::Dataset(format!("class `{name}` has no images")));
            }
            let mut resolution = None;
            let mut count = 0;
            for f in files {
                match load_png(&f) {
                    Ok(t) => {
                        let r = [t.dim(1), t.dim(2)];
                        match resolution {
                            None => resolution = Some(r),
                            Some(prev) if prev != r => {
                                return Err(Error::Dataset(format!(
                                    "class `{name}` mixes resolutions {prev:?} and {r:?} ({})",
                                    f.display()
                                )))
                            }
                            _ => {}
                        }
                        count += 1;
                    }
                    Err(_) => bad.push(f.display().to_string()),
                }
            }
            if let Some(resolution) = resolution {
                classes.push(ClassEntry { name, count, resolution });
            }
        }
        if !bad.is_empty() {
            return Err(Error::Dataset(format!("undecodable images: {}", bad.join(", "))));
        }
        if classes.is_empty() {
            return Err(Error::Dataset(format!("no class folders under {}", root.display())));
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            classes,
        })
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Loads one class folder as `[N, 3, H, W]`.
pub fn load_class(root: &Path, class: &str) -> Result<Tensor> {
    let dir = root.join(class);
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("missing class folder {}", dir.display())));
    }
    let mut images = Vec::new();
    for f in class_files(&dir)? {
        images.push(load_png(&f).map_err(|e| Error::Dataset(format!("{}: {e}", f.display())))?);
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("class `{class}` has no images")));
    }
    Tensor::stack(&images).map_err(|_| Error::Dataset(format!("class `{class}` mixes image resolutions")))
}

/// Shapes drawn by [`synth_shape`]; the class name picks the shape.
pub const SHAPE_CLASSES: [&str; 4] = ["circle", "square", "triangle", "cross"];

/// One procedural `[3, size, size]` image: a jittered shape of a
/// class-typical hue over a dim noisy background.
pub fn synth_shape<R: Rng + ?Sized>(class: &str, size: usize, r: &mut R) -> Result<Tensor> {
    let kind = SHAPE_CLASSES
        .iter()
        .position(|&c| c == class)
        .ok_or_else(|| Error::Dataset(format!("no procedural shape named `{class}`; known: {}", SHAPE_CLASSES.join(", "))))?;
    let base = [[0.9, 0.3, 0.2], [0.2, 0.4, 0.9], [0.3, 0.8, 0.3], [0.9, 0.8, 0.2]][kind];
    let s = size as f64;
    let cx = s / 2.0 + r.random_range(-0.15..0.15) * s;
    let cy = s / 2.0 + r.random_range(-0.15..0.15) * s;
    let rad = s * r.random_range(0.22..0.34);
    let color: Vec<f64> = base.iter().map(|c| (c + r.random_range(-0.1..0.1f64)).clamp(0.0, 1.0)).collect();
    let bg = r.random_range(0.05..0.2);
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = match kind {
                0 => dx * dx + dy * dy <= rad * rad,
                1 => dx.abs() <= rad * 0.85 && dy.abs() <= rad * 0.85,
                2 => dy <= rad * 0.8 && dy >= -rad && dx.abs() <= (dy + rad) * 0.6,
                _ => (dx.abs() <= rad * 0.3 && dy.abs() <= rad) || (dy.abs() <= rad * 0.3 && dx.abs() <= rad),
            };
            for c in 0..3 {
                let noise = r.random_range(-0.03..0.03);
                let v = if inside { color[c] } else { bg };
                data[(c * size + y) * size + x] = (v + noise).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, size, size], data)
}

/// Writes `count` images per class to `root/<class>/img_XXXX.png`.
pub fn write_synthetic_dataset(root: &Path, classes: &[&str], count: usize, size: usize, seed: u64) -> Result<()> {
    for &class in classes {
        let dir = root.join(class);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut r = rng::stream(seed, &format!("shapes:{class}"), 0);
        for i in 0..count {
            let img = synth_shape(class, size, &mut r)?;
            save_png(&dir.join(format!("img_{i:04}.png")), &img)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let img = synth_shape("circle", 16, &mut rng::stream(1, "t", 0)).unwrap();
        let p = dir.path().join("a.png");
        save_png(&p, &img).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!(back.shape(), &[3, 16, 16]);
        assert!(back.sub(&img).unwrap().max_abs() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn manifest_scan() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), &["circle", "square"], 3, 8, 0).unwrap();
        let m = DatasetManifest::scan(dir.path()).unwrap();
        assert_eq!(m.class_names(), vec!["circle", "square"]);
        assert!(m.classes.iter().all(|c| c.count == 3 && c.resolution == [8, 8]));
        assert_eq!(load_class(dir.path(), "square").unwrap().shape(), &[3, 3, 8, 8]);
        std::fs::create_dir(dir.path().join("empty")).unwrap();
        let err = DatasetManifest::scan(dir.path()).unwrap_err();
        assert!(err.to_string().contains("empty"));
    }
}
