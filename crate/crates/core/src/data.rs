//! Dataset types, on-disk layout and tensor conversions.
//!
//! A dataset directory holds `images/<id>.png` (RGB) and `masks/<id>.png`
//! (grayscale, binarized at 128 on load), optionally with a `manifest.txt`
//! listing one id per line; without a manifest the image directory is
//! scanned and sorted.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};
use crate::param::Real;

/// One image/mask pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// `(H, W, 3)`, 8-bit RGB.
    pub image: Array3<u8>,
    /// `(H, W)`, strictly {0, 1}.
    pub mask: Array2<u8>,
    pub id: String,
}

impl Sample {
    pub fn new(image: Array3<u8>, mask: Array2<u8>, id: impl Into<String>) -> Result<Self> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::shape(format!("expected 3 image channels, got {c}")));
        }
        if mask.dim() != (h, w) {
            return Err(Error::shape(format!(
                "image {h}x{w} but mask {:?}",
                mask.dim()
            )));
        }
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::shape("mask must be binary".to_string()));
        }
        Ok(Sample {
            image,
            mask,
            id: id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }
}

/// Load every sample under `root`, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    if !images_dir.is_dir() {
        return Err(Error::Manifest(format!(
            "missing images directory {}",
            images_dir.display()
        )));
    }
    if !masks_dir.is_dir() {
        return Err(Error::Manifest(format!(
            "missing masks directory {}",
            masks_dir.display()
        )));
    }
    let mut ids = Vec::new();
    let manifest = root.join("manifest.txt");
    if manifest.is_file() {
        for line in std::fs::read_to_string(&manifest)?.lines() {
            let id = line.trim();
            if !id.is_empty() {
                ids.push(id.to_string());
            }
        }
    } else {
        for entry in std::fs::read_dir(&images_dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
    }
    ids.sort();
    ids.dedup();

    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let img_path = images_dir.join(format!("{id}.png"));
        let mask_path = masks_dir.join(format!("{id}.png"));
        if !img_path.is_file() {
            return Err(Error::Manifest(format!("missing image for id {id}")));
        }
        if !mask_path.is_file() {
            return Err(Error::Manifest(format!("missing mask for id {id}")));
        }
        let image = read_rgb(&img_path)?;
        let mask = read_mask(&mask_path)?;
        if mask.dim() != (image.dim().0, image.dim().1) {
            return Err(Error::shape(format!(
                "id {id}: image {:?} vs mask {:?}",
                (image.dim().0, image.dim().1),
                mask.dim()
            )));
        }
        samples.push(Sample { image, mask, id });
    }
    Ok(samples)
}

/// Write a sample in the dataset layout (mask stored as {0, 255}).
pub fn save_sample(root: &Path, sample: &Sample) -> Result<()> {
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("masks"))?;
    write_rgb(
        &root.join("images").join(format!("{}.png", sample.id)),
        &sample.image,
    )?;
    let visible = sample.mask.mapv(|v| if v != 0 { 255u8 } else { 0 });
    write_gray(
        &root.join("masks").join(format!("{}.png", sample.id)),
        &visible,
    )?;
    Ok(())
}

/// Append-or-create the manifest for a set of ids (one per line, sorted).
pub fn write_manifest(root: &Path, ids: &[String]) -> Result<()> {
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    let body = sorted
        .iter()
        .map(|s| s.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(root.join("manifest.txt"), body + "\n")?;
    Ok(())
}

pub fn read_rgb(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<u8>::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px.0[c];
        }
    }
    Ok(out)
}

/// Read a grayscale mask, binarizing at pixel value >= 128.
pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = u8::from(px.0[0] >= 128);
    }
    Ok(out)
}

pub fn write_rgb(path: &Path, image: &Array3<u8>) -> Result<()> {
    let (h, w, _) = image.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([image[[y, x, 0]], image[[y, x, 1]], image[[y, x, 2]]]),
            );
        }
    }
    img.save(path)?;
    Ok(())
}

pub fn write_gray(path: &Path, values: &Array2<u8>) -> Result<()> {
    let (h, w) = values.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([values[[y, x]]]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Read a grayscale image as raw 8-bit values (no binarization).
pub fn read_gray(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = px.0[0];
    }
    Ok(out)
}

/// Stack samples into model input `(B, 3, H, W)` scaled to [0, 1] and the
/// matching mask batch `(B, H, W)`.
pub fn to_batch<F: Real>(samples: &[&Sample]) -> Result<(Array4<F>, Array3<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::domain("empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let b = samples.len();
    let mut x = Array4::<F>::zeros((b, 3, h, w));
    let mut y = Array3::<u8>::zeros((b, h, w));
    let scale = F::from_f64c(1.0 / 255.0);
    for (bi, s) in samples.iter().enumerate() {
        if s.height() != h || s.width() != w {
            return Err(Error::shape(format!(
                "sample {} is {}x{}, batch is {h}x{w}",
                s.id,
                s.height(),
                s.width()
            )));
        }
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    x[[bi, ch, r, c]] = F::from_f64c(s.image[[r, c, ch]] as f64) * scale;
                }
                y[[bi, r, c]] = s.mask[[r, c]];
            }
        }
    }
    Ok((x, y))
}

/// Convert a probability map to an 8-bit grayscale plane with
/// round-half-up quantization (`round(255 * p)`).
pub fn prob_to_gray<F: Real>(prob: &Array2<F>) -> Array2<u8> {
    prob.mapv(|p| {
        let v = (p.to_f64().unwrap_or(0.0) * 255.0 + 0.5).floor();
        v.clamp(0.0, 255.0) as u8
    })
}

/// Magic prefix of the raw probability-map sidecar files.
pub const PROB_RAW_MAGIC: &[u8; 6] = b"DPRED1";

/// Write a probability map as raw little-endian f32:
/// `"DPRED1"`, u32 height, u32 width, then row-major data.
pub fn write_prob_raw(path: &Path, prob: &Array2<f32>) -> Result<()> {
    use byteorder::{LittleEndian, WriteBytesExt};
    let (h, w) = prob.dim();
    let mut out = Vec::with_capacity(6 + 8 + 4 * h * w);
    out.extend_from_slice(PROB_RAW_MAGIC);
    out.write_u32::<LittleEndian>(h as u32)?;
    out.write_u32::<LittleEndian>(w as u32)?;
    for &v in prob.iter() {
        out.write_f32::<LittleEndian>(v)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a raw probability map written by [`write_prob_raw`].
pub fn read_prob_raw(path: &Path) -> Result<Array2<f32>> {
    use byteorder::{LittleEndian, ReadBytesExt};
    let bytes = std::fs::read(path)?;
    let mut cur = std::io::Cursor::new(&bytes);
    let mut magic = [0u8; 6];
    std::io::Read::read_exact(&mut cur, &mut magic)
        .map_err(|_| Error::Shape(format!("{}: truncated raw map", path.display())))?;
    if &magic != PROB_RAW_MAGIC {
        return Err(Error::shape(format!(
            "{}: bad raw-map magic",
            path.display()
        )));
    }
    let h = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::shape("truncated raw map header"))? as usize;
    let w = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::shape("truncated raw map header"))? as usize;
    let mut data = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        data.push(
            cur.read_f32::<LittleEndian>()
                .map_err(|_| Error::shape("truncated raw map data"))?,
        );
    }
    Array2::from_shape_vec((h, w), data).map_err(|e| Error::shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_sample(id: &str, h: usize, w: usize) -> Sample {
        let mut image = Array3::<u8>::zeros((h, w, 3));
        let mut mask = Array2::<u8>::zeros((h, w));
        image[[0, 0, 0]] = 200;
        image[[h - 1, w - 1, 2]] = 10;
        mask[[0, 0]] = 1;
        Sample::new(image, mask, id).unwrap()
    }

    #[test]
    fn dataset_round_trip_in_id_order() {
        let dir = tempdir().unwrap();
        let samples = vec![
            tiny_sample("b", 8, 8),
            tiny_sample("a", 8, 8),
            tiny_sample("c", 8, 8),
        ];
        for s in &samples {
            save_sample(dir.path(), s).unwrap();
        }
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded[0].id, "a");
        assert_eq!(loaded[1].id, "b");
        assert_eq!(loaded[2].id, "c");
        let orig = samples.iter().find(|s| s.id == "a").unwrap();
        assert_eq!(&loaded[0].image, &orig.image);
        assert_eq!(&loaded[0].mask, &orig.mask);
    }

    #[test]
    fn missing_mask_is_a_manifest_error() {
        let dir = tempdir().unwrap();
        save_sample(dir.path(), &tiny_sample("x", 8, 8)).unwrap();
        std::fs::remove_file(dir.path().join("masks/x.png")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Manifest(_))));
    }

    #[test]
    fn mismatched_mask_is_a_shape_error() {
        let dir = tempdir().unwrap();
        let s = tiny_sample("x", 8, 8);
        save_sample(dir.path(), &s).unwrap();
        // overwrite the mask with the wrong size
        let small = Array2::<u8>::zeros((4, 4));
        write_gray(&dir.path().join("masks/x.png"), &small).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Shape(_))));
    }

    #[test]
    fn masks_binarize_exactly() {
        let dir = tempdir().unwrap();
        let mut values = Array2::<u8>::zeros((4, 4));
        values[[0, 0]] = 255;
        values[[1, 1]] = 128;
        values[[2, 2]] = 127;
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        write_rgb(
            &dir.path().join("images/m.png"),
            &Array3::<u8>::zeros((4, 4, 3)),
        )
        .unwrap();
        write_gray(&dir.path().join("masks/m.png"), &values).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let mask = &loaded[0].mask;
        assert_eq!(mask[[0, 0]], 1);
        assert_eq!(mask[[1, 1]], 1);
        assert_eq!(mask[[2, 2]], 0);
        assert!(mask.iter().all(|&v| v <= 1));
    }

    #[test]
    fn quantization_is_round_half_up() {
        let prob = ndarray::array![[0.5f64, 0.0], [1.0, 0.4999]];
        let gray = prob_to_gray(&prob);
        assert_eq!(gray[[0, 0]], 128); // round(127.5) = 128
        assert_eq!(gray[[0, 1]], 0);
        assert_eq!(gray[[1, 0]], 255);
    }
}
