use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageReader, Limits, Luma, Rgb};

use super::{ImageShape, LabeledImageSet};
use crate::error::{Error, Result};

const MAX_DECODE_BYTES: u64 = 64 << 20;

/// Decodes an encoded image into channel-major `[0, 1]` floats.
///
/// Grayscale sources keep one channel; everything else becomes RGB.
pub fn decode_image(bytes: &[u8]) -> std::result::Result<(ImageShape, Vec<f32>), image::ImageError> {
    let mut reader = ImageReader::new(Cursor::new(bytes)).with_guessed_format()?;
    let mut limits = Limits::default();
    limits.max_alloc = Some(MAX_DECODE_BYTES);
    limits.max_image_width = Some(4096);
    limits.max_image_height = Some(4096);
    reader.limits(limits);
    let img = reader.decode()?;
    Ok(to_planar(&img))
}

fn to_planar(img: &DynamicImage) -> (ImageShape, Vec<f32>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
    );
    if gray {
        let buf = img.to_luma8();
        let pixels = buf.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
        (ImageShape::new(1, h, w), pixels)
    } else {
        let buf = img.to_rgb8();
        let mut pixels = vec![0.0f32; 3 * h * w];
        for (i, p) in buf.pixels().enumerate() {
            for c in 0..3 {
                pixels[c * h * w + i] = p.0[c] as f32 / 255.0;
            }
        }
        (ImageShape::new(3, h, w), pixels)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden {
            entries.push(entry.path());
        }
    }
    entries.sort();
    Ok(entries)
}

/// Loads `<root>/<class_name>/<image files>`.
///
/// Classes are the subdirectories in lexicographic order; images within a
/// class are ordered by filename.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "dataset directory {} does not exist",
            root.display()
        )));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "{} contains no class subdirectories",
            root.display()
        )));
    }

    let mut shape: Option<(ImageShape, PathBuf)> = None;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::with_capacity(class_dirs.len());
    for (label, dir) in class_dirs.iter().enumerate() {
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "class directory {} is empty",
                dir.display()
            )));
        }
        for file in files {
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            let (s, px) = decode_image(&bytes).map_err(|source| Error::Image {
                path: file.clone(),
                source,
            })?;
            match &shape {
                None => shape = Some((s, file.clone())),
                Some((first, first_file)) if *first != s => {
                    return Err(Error::Data(format!(
                        "{} is {s} but {} is {first}",
                        file.display(),
                        first_file.display()
                    )))
                }
                Some(_) => {}
            }
            pixels.extend(px);
            labels.push(label);
        }
    }
    let (shape, _) = shape.expect("at least one image was decoded");
    LabeledImageSet::new(shape, pixels, Some(labels), class_dirs.len())?.with_class_names(names)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(pixels: &[f32], shape: ImageShape, path: &Path) -> Result<()> {
    let (h, w) = (shape.height as u32, shape.width as u32);
    let plane = shape.height * shape.width;
    let result = match shape.channels {
        1 => ImageBuffer::<Luma<u8>, _>::from_fn(w, h, |x, y| {
            Luma([quantize(pixels[y as usize * shape.width + x as usize])])
        })
        .save(path),
        3 => ImageBuffer::<Rgb<u8>, _>::from_fn(w, h, |x, y| {
            let i = y as usize * shape.width + x as usize;
            Rgb([
                quantize(pixels[i]),
                quantize(pixels[plane + i]),
                quantize(pixels[2 * plane + i]),
            ])
        })
        .save(path),
        c => {
            return Err(Error::Shape(format!(
                "PNG export supports 1 or 3 channels, got {c}"
            )))
        }
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a labeled set in the layout [`load_dataset`] reads back.
pub fn save_dataset(set: &LabeledImageSet, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    let labels = set.require_labels("saving a dataset")?;
    let names = set.class_names();
    let mut counters = vec![0usize; set.class_count()];
    for c in 0..set.class_count() {
        let dir = root.join(&names[c]);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, &label) in labels.iter().enumerate() {
        let path = root.join(&names[label]).join(format!("{:05}.png", counters[label]));
        counters[label] += 1;
        encode_png(set.image(i), set.shape(), &path)?;
    }
    Ok(())
}

/// Tiles images into one PNG, one row per class, `columns` images per row.
///
/// Rows with fewer members are padded with black tiles.
pub fn save_grid(set: &LabeledImageSet, columns: usize, path: impl AsRef<Path>) -> Result<()> {
    let shape = set.shape();
    let groups = set.indices_by_class()?;
    let rows = groups.len();
    let columns = columns.max(1);
    let grid_shape = ImageShape::new(shape.channels, rows * shape.height, columns * shape.width);
    let mut grid = vec![0.0f32; grid_shape.numel()];
    let gplane = grid_shape.height * grid_shape.width;
    for (r, members) in groups.iter().enumerate() {
        for (col, &i) in members.iter().take(columns).enumerate() {
            let img = set.image(i);
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        let gy = r * shape.height + y;
                        let gx = col * shape.width + x;
                        grid[c * gplane + gy * grid_shape.width + gx] =
                            img[c * shape.height * shape.width + y * shape.width + x];
                    }
                }
            }
        }
    }
    if let Some(parent) = path.as_ref().parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    encode_png(&grid, grid_shape, path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_set(root: &Path, classes: usize, per_class: usize, size: usize) -> LabeledImageSet {
        let shape = ImageShape::new(3, size, size);
        let n = classes * per_class;
        let pixels = (0..n * shape.numel())
            .map(|i| ((i * 37) % 256) as f32 / 255.0)
            .collect();
        let labels = (0..n).map(|i| i / per_class).collect();
        let set = LabeledImageSet::new(shape, pixels, Some(labels), classes).unwrap();
        save_dataset(&set, root).unwrap();
        set
    }

    #[test]
    fn loads_two_classes_of_three() {
        let dir = tempfile::tempdir().unwrap();
        let written = write_set(dir.path(), 2, 3, 8);
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(loaded.class_count(), 2);
        assert_eq!(loaded.shape(), ImageShape::new(3, 8, 8));
        // values were multiples of 1/255 so PNG round-trips exactly
        assert_eq!(loaded.pixels(), written.pixels());
        assert_eq!(loaded.labels(), written.labels());
    }

    #[test]
    fn loading_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_set(dir.path(), 3, 2, 4);
        assert_eq!(load_dataset(dir.path()).unwrap(), load_dataset(dir.path()).unwrap());
    }

    #[test]
    fn unreadable_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_set(dir.path(), 2, 2, 4);
        let bad = dir.path().join("class_001").join("zzz_broken.png");
        fs::write(&bad, b"not an image").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("zzz_broken.png"), "{err}");
    }

    #[test]
    fn missing_directory() {
        let err = load_dataset("/definitely/not/here").unwrap_err();
        assert!(err.to_string().contains("does not exist"));
    }

    #[test]
    fn empty_class_directory() {
        let dir = tempfile::tempdir().unwrap();
        write_set(dir.path(), 2, 2, 4);
        fs::create_dir(dir.path().join("class_zzz")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("is empty"), "{err}");
    }

    #[test]
    fn inconsistent_shapes() {
        let dir = tempfile::tempdir().unwrap();
        write_set(dir.path(), 2, 2, 4);
        let other = dir.path().join("other");
        write_set(&other, 1, 1, 6);
        fs::rename(other.join("class_000"), dir.path().join("class_002")).unwrap();
        fs::remove_dir_all(&other).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("6x6x3"), "{err}");
    }

    #[test]
    fn grid_has_one_row_per_class() {
        let dir = tempfile::tempdir().unwrap();
        let set = write_set(&dir.path().join("d"), 3, 2, 4);
        let path = dir.path().join("grid.png");
        save_grid(&set, 5, &path).unwrap();
        let (shape, _) = decode_image(&fs::read(&path).unwrap()).unwrap();
        assert_eq!((shape.height, shape.width), (12, 20));
    }
}
