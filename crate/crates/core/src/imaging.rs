//! Conversions between image buffers and tensors, plus grid assembly for
//! report figures.

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, Rgb, Rgb32FImage, RgbImage};

use crate::error::{Error, Result};

pub fn to_float(img: &RgbImage) -> Rgb32FImage {
    Rgb32FImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        Rgb([p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
    })
}

pub fn to_u8(img: &Rgb32FImage) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(p[0]), q(p[1]), q(p[2])])
    })
}

/// Composites `img` over white wherever `mask` is zero.
pub fn composite_white(img: &Rgb32FImage, mask: &GrayImage) -> Result<Rgb32FImage> {
    if img.dimensions() != mask.dimensions() {
        return Err(Error::Shape(format!(
            "mask {:?} does not match image {:?}",
            mask.dimensions(),
            img.dimensions()
        )));
    }
    Ok(Rgb32FImage::from_fn(img.width(), img.height(), |x, y| {
        if mask.get_pixel(x, y)[0] == 0 {
            Rgb([1.0, 1.0, 1.0])
        } else {
            *img.get_pixel(x, y)
        }
    }))
}

/// Box-filter downsampling by an integer factor.
pub fn downsample(img: &Rgb32FImage, factor: u32) -> Rgb32FImage {
    if factor <= 1 {
        return img.clone();
    }
    let (w, h) = (img.width() / factor, img.height() / factor);
    let n = (factor * factor) as f32;
    Rgb32FImage::from_fn(w, h, |x, y| {
        let mut acc = [0.0f32; 3];
        for dy in 0..factor {
            for dx in 0..factor {
                let p = img.get_pixel(x * factor + dx, y * factor + dy);
                for c in 0..3 {
                    acc[c] += p[c];
                }
            }
        }
        Rgb([acc[0] / n, acc[1] / n, acc[2] / n])
    })
}

/// Channel-first `(3, H, W)` values.
pub fn to_chw(img: &Rgb32FImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let mut out = vec![0.0; (3 * w * h) as usize];
    let plane = (w * h) as usize;
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = p[c];
        }
    }
    out
}

/// Stacks images into a `(B, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[&Rgb32FImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::EmptyInput("no images".into()))?;
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(images.len() * (3 * w * h) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape("images in a batch must share a size".into()));
        }
        data.extend(to_chw(img));
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h as usize, w as usize), device)?.to_dtype(dtype)?)
}

/// Converts a `(3, H, W)` tensor to an image, clamping to `[0, 1]`.
pub fn tensor_to_image(t: &Tensor) -> Result<Rgb32FImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    Ok(Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([
            v[i].clamp(0.0, 1.0),
            v[plane + i].clamp(0.0, 1.0),
            v[2 * plane + i].clamp(0.0, 1.0),
        ])
    }))
}

/// Converts `(R, 3)` per-pixel colors (row-major pixels) to an image.
pub fn rows_to_image(t: &Tensor, width: usize, height: usize) -> Result<Rgb32FImage> {
    let (r, c) = t.dims2()?;
    if r != width * height || c != 3 {
        return Err(Error::Shape(format!("cannot view ({r}, {c}) as {width}x{height} RGB")));
    }
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(Rgb32FImage::from_fn(width as u32, height as u32, |x, y| {
        let i = (y as usize * width + x as usize) * 3;
        Rgb([v[i].clamp(0.0, 1.0), v[i + 1].clamp(0.0, 1.0), v[i + 2].clamp(0.0, 1.0)])
    }))
}

/// Tiles equally sized images into a grid with `cols` columns, white gutters.
pub fn grid(images: &[Rgb32FImage], cols: usize, gutter: u32) -> Result<Rgb32FImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::EmptyInput("no images for grid".into()))?;
    let (w, h) = first.dimensions();
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    let gw = cols as u32 * (w + gutter) + gutter;
    let gh = rows as u32 * (h + gutter) + gutter;
    let mut out = Rgb32FImage::from_pixel(gw, gh, Rgb([1.0, 1.0, 1.0]));
    for (i, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape("grid images must share a size".into()));
        }
        let ox = gutter + (i % cols) as u32 * (w + gutter);
        let oy = gutter + (i / cols) as u32 * (h + gutter);
        for (x, y, p) in img.enumerate_pixels() {
            out.put_pixel(ox + x, oy + y, *p);
        }
    }
    Ok(out)
}

pub fn save_png(img: &Rgb32FImage, path: impl AsRef<std::path::Path>) -> Result<()> {
    to_u8(img).save(path.as_ref())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let img = Rgb32FImage::from_fn(5, 3, |x, y| Rgb([x as f32 / 5.0, y as f32 / 3.0, 0.25]));
        let t = images_to_tensor(&[&img], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 3, 5]);
        let back = tensor_to_image(&t.get(0).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn composite_and_grid() {
        let img = Rgb32FImage::from_pixel(4, 4, Rgb([0.2, 0.3, 0.4]));
        let mut mask = GrayImage::new(4, 4);
        mask.put_pixel(1, 1, image::Luma([255]));
        let c = composite_white(&img, &mask).unwrap();
        assert_eq!(c.get_pixel(0, 0).0, [1.0, 1.0, 1.0]);
        assert_eq!(c.get_pixel(1, 1).0, [0.2, 0.3, 0.4]);
        let g = grid(&[img.clone(), c.clone(), img], 2, 1).unwrap();
        assert_eq!(g.dimensions(), (11, 11));
        assert_eq!(downsample(&c, 2).dimensions(), (2, 2));
    }
}
