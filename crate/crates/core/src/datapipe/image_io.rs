use std::collections::HashMap;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, reason: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Decodes a PNG, binary PPM or JPEG file into a `[3, H, W]` tensor of
/// 8-bit values scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    if reader.format().is_none() {
        return Err(image_err(path, "unrecognized image format"));
    }
    let img = reader.decode().map_err(|e| image_err(path, e))?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    })
}

/// Quantizes a `[3, H, W]` tensor in `[0, 1]` to 8 bits per channel.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let [c, h, w] = match *t.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::shape("tensor_to_rgb", "rank", format!("expected [3, H, W], got {:?}", t.shape()))),
    };
    if c != 3 {
        return Err(Error::shape("tensor_to_rgb", "channels", format!("expected 3, got {c}")));
    }
    check_pixel_range("tensor_to_rgb", t)?;
    let d = t.data();
    let mut raw = vec![0u8; h * w * 3];
    for ch in 0..3 {
        for p in 0..h * w {
            raw[p * 3 + ch] = (d[ch * h * w + p] * 255.0).round() as u8;
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image"))
}

pub(crate) fn check_pixel_range(op: &'static str, t: &Tensor) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::arg(op, format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Writes PNG, or binary PPM when the extension is `ppm`.
pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    let img = tensor_to_rgb(t)?;
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("ppm") => {
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            PnmEncoder::new(BufWriter::new(file))
                .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
                .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
                .map_err(|e| image_err(path, e))
        }
        Some("png") => img.save(path).map_err(|e| image_err(path, e)),
        _ => Err(image_err(path, "unsupported output extension, use .png or .ppm")),
    }
}

/// Resolves image names to decoded `[3, H, W]` tensors.
pub trait ImageSource: Sync {
    fn load(&self, image_name: &str) -> Result<Tensor>;

    /// Names that cannot be resolved, for up-front reporting.
    fn missing<'a>(&self, names: &[&'a str]) -> Vec<&'a str>;
}

/// Images stored as `<root>/<image_name>.<ext>`.
#[derive(Clone, Debug)]
pub struct DirSource {
    root: PathBuf,
}

const EXTENSIONS: [&str; 5] = ["png", "ppm", "jpg", "jpeg", "JPG"];

impl DirSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirSource { root: root.into() }
    }

    pub fn path_for(&self, image_name: &str) -> Option<PathBuf> {
        let direct = self.root.join(image_name);
        if direct.extension().is_some() && direct.is_file() {
            return Some(direct);
        }
        EXTENSIONS
            .iter()
            .map(|ext| self.root.join(format!("{image_name}.{ext}")))
            .find(|p| p.is_file())
    }
}

impl ImageSource for DirSource {
    fn load(&self, image_name: &str) -> Result<Tensor> {
        let path = self
            .path_for(image_name)
            .ok_or_else(|| image_err(&self.root.join(image_name), "no such image"))?;
        load_image(&path)
    }

    fn missing<'a>(&self, names: &[&'a str]) -> Vec<&'a str> {
        names.iter().copied().filter(|n| self.path_for(n).is_none()).collect()
    }
}

/// Images held in memory, keyed by name.
#[derive(Clone, Debug, Default)]
pub struct MemorySource {
    pub images: HashMap<String, Tensor>,
}

impl ImageSource for MemorySource {
    fn load(&self, image_name: &str) -> Result<Tensor> {
        self.images
            .get(image_name)
            .cloned()
            .ok_or_else(|| Error::Data(format!("image {image_name} not in memory source")))
    }

    fn missing<'a>(&self, names: &[&'a str]) -> Vec<&'a str> {
        names.iter().copied().filter(|n| !self.images.contains_key(*n)).collect()
    }
}
