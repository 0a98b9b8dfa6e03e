use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::{resize_bilinear, ClassCatalog};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "ppm", "pnm"];

/// A decoded image with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H, W, 3]` with values in `[0, 1]` (until standardised).
    pub pixels: Tensor<f32>,
    pub label: usize,
    /// Path relative to the dataset root, `/`-separated.
    pub source_path: String,
}

#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub samples: Vec<Sample>,
    pub catalog: ClassCatalog,
    /// Files that could not be decoded.
    pub skipped: Vec<PathBuf>,
}

/// Decodes a PNG, JPEG or PPM file into `[H, W, 3]` RGB values in `[0, 1]`.
pub fn decode_image(path: &Path) -> Result<Tensor<f32>> {
    let err = |e: &dyn std::fmt::Display| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let img = image::ImageReader::open(path)
        .map_err(|e| err(&e))?
        .with_guessed_format()
        .map_err(|e| err(&e))?
        .decode()
        .map_err(|e| err(&e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| v as f32 / 255.0)
        .collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// Loads `root/<class_name>/<image files>`.
#[derive(Clone, Debug)]
pub struct DatasetLoader {
    root: PathBuf,
    resize: Option<usize>,
    workers: usize,
}

impl DatasetLoader {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            resize: None,
            workers: 0,
        }
    }

    /// Resize every image to `size × size` right after decoding.
    pub fn resize_to(mut self, size: usize) -> Self {
        self.resize = Some(size);
        self
    }

    /// Decoding threads; 0 uses the global pool. Output order never
    /// depends on this.
    pub fn workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    /// Lists `(relative path, label)` pairs in load order without decoding.
    pub fn list(&self) -> Result<(Vec<(String, usize)>, ClassCatalog)> {
        let mut class_dirs: Vec<String> = fs::read_dir(&self.root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_dir()).unwrap_or(false))
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        class_dirs.sort();
        if class_dirs.is_empty() {
            return Err(Error::Data(format!(
                "{} has no class directories",
                self.root.display()
            )));
        }
        let mut items = Vec::new();
        for (label, class) in class_dirs.iter().enumerate() {
            let mut files: Vec<String> = fs::read_dir(self.root.join(class))?
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
                .filter_map(|e| e.file_name().into_string().ok())
                .filter(|name| has_image_extension(name))
                .collect();
            if files.is_empty() {
                return Err(Error::Data(format!(
                    "class directory {class:?} contains no images"
                )));
            }
            files.sort();
            items.extend(files.into_iter().map(|f| (format!("{class}/{f}"), label)));
        }
        let mut catalog = ClassCatalog::new(class_dirs);
        let known = ClassCatalog::cooking_states();
        if catalog.names == known.names {
            catalog.expected_counts = known.expected_counts;
        }
        Ok((items, catalog))
    }

    pub fn load(&self) -> Result<LoadedDataset> {
        let (items, catalog) = self.list()?;
        self.load_items(&items, catalog)
    }

    /// Decodes a given listing (for example one split of a manifest).
    pub fn load_items(
        &self,
        items: &[(String, usize)],
        catalog: ClassCatalog,
    ) -> Result<LoadedDataset> {
        let decoded = parallel::with_workers(self.workers, || {
            parallel::map(items, |_, (rel, _)| {
                let pixels = decode_image(&self.root.join(rel))?;
                match self.resize {
                    Some(size) => resize_bilinear(&pixels, size),
                    None => Ok(pixels),
                }
            })
        });
        let mut samples = Vec::with_capacity(items.len());
        let mut skipped = Vec::new();
        let mut per_class = vec![0usize; catalog.len()];
        for ((rel, label), result) in items.iter().zip(decoded) {
            match result {
                Ok(pixels) => {
                    per_class[*label] += 1;
                    samples.push(Sample {
                        pixels,
                        label: *label,
                        source_path: rel.clone(),
                    });
                }
                Err(e) => {
                    warn!("skipping {rel}: {e}");
                    skipped.push(self.root.join(rel));
                }
            }
        }
        if let Some(class) = per_class
            .iter()
            .zip(&catalog.names)
            .find(|(n, _)| **n == 0)
            .map(|(_, name)| name)
        {
            if items.iter().any(|(_, l)| catalog.names[*l] == *class) {
                return Err(Error::Data(format!(
                    "no image in class {class:?} could be decoded"
                )));
            }
        }
        Ok(LoadedDataset {
            samples,
            catalog,
            skipped,
        })
    }
}

fn has_image_extension(name: &str) -> bool {
    Path::new(name)
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Loads every image under `root` at its native size.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<LoadedDataset> {
    DatasetLoader::new(root.as_ref()).load()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, w: u32, h: u32, value: u8) {
        let img = image::RgbImage::from_pixel(w, h, image::Rgb([value, value / 2, 255 - value]));
        img.save(path).unwrap();
    }

    #[test]
    fn two_classes_two_files() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["beta", "alpha"] {
            fs::create_dir(dir.path().join(class)).unwrap();
            for f in ["b.png", "a.png"] {
                write_png(&dir.path().join(class).join(f), 5, 4, 100);
            }
        }
        fs::write(dir.path().join("alpha/notes.txt"), "ignored").unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let labels: Vec<usize> = ds.samples.iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![0, 0, 1, 1]);
        assert_eq!(ds.samples[0].source_path, "alpha/a.png");
        assert_eq!(ds.samples[3].source_path, "beta/b.png");
        assert_eq!(ds.samples[0].pixels.shape(), &[4, 5, 3]);
        assert!((ds.samples[0].pixels.at(&[0, 0, 0]) - 100.0 / 255.0).abs() < 1e-7);
        let again = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.samples, again.samples);
    }

    #[test]
    fn corrupt_file_is_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        write_png(&dir.path().join("a/good.png"), 3, 3, 7);
        fs::write(dir.path().join("a/bad.png"), b"not an image").unwrap();
        let ds = DatasetLoader::new(dir.path()).resize_to(8).load().unwrap();
        assert_eq!(ds.samples.len(), 1);
        assert_eq!(ds.skipped.len(), 1);
        assert_eq!(ds.samples[0].pixels.shape(), &[8, 8, 3]);
    }

    #[test]
    fn empty_class_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        fs::create_dir(dir.path().join("b")).unwrap();
        write_png(&dir.path().join("a/x.png"), 2, 2, 1);
        assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn decodes_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        fs::write(&path, b"P3\n2 1\n255\n255 0 0 0 0 255\n").unwrap();
        let t = decode_image(&path).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
