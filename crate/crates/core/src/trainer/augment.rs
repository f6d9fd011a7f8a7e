use rand::Rng;

use crate::synthdata::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentConfig {
    pub flip: bool,
    pub jitter: bool,
}

/// Maximum relative change of brightness, contrast and saturation.
pub const JITTER: f64 = 0.2;

/// Random horizontal flip (p = 0.5, image and labels together) followed by
/// brightness/contrast/saturation jitter of the image. The same number of
/// random draws is consumed whatever the toggles.
pub fn augment<R: Rng>(
    image: &Image,
    labels: Option<&[u8]>,
    cfg: AugmentConfig,
    rng: &mut R,
) -> (Image, Option<Vec<u8>>) {
    let flip = rng.gen_bool(0.5);
    let brightness = 1.0 + rng.gen_range(-JITTER..=JITTER);
    let contrast = 1.0 + rng.gen_range(-JITTER..=JITTER);
    let saturation = 1.0 + rng.gen_range(-JITTER..=JITTER);

    let (mut img, mut lab) = (image.clone(), labels.map(<[u8]>::to_vec));
    if cfg.flip && flip {
        img = flip_image(&img);
        if let Some(l) = &mut lab {
            *l = flip_rows(l, image.height, image.width, 1);
        }
    }
    if cfg.jitter {
        jitter(&mut img, brightness, contrast, saturation);
    }
    (img, lab)
}

pub fn flip_image(image: &Image) -> Image {
    Image {
        height: image.height,
        width: image.width,
        data: flip_rows(&image.data, image.height, image.width, 3),
    }
}

fn flip_rows<T: Copy>(data: &[T], height: usize, width: usize, channels: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for y in 0..height {
        for x in (0..width).rev() {
            let o = (y * width + x) * channels;
            out.extend_from_slice(&data[o..o + channels]);
        }
    }
    out
}

fn gray(p: &[f64]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn jitter(img: &mut Image, brightness: f64, contrast: f64, saturation: f64) {
    for v in &mut img.data {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let n = (img.height * img.width) as f64;
    let mean = img.data.chunks(3).map(gray).sum::<f64>() / n;
    for v in &mut img.data {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    for px in img.data.chunks_mut(3) {
        let g = gray(px);
        for v in px.iter_mut() {
            *v = (g + (*v - g) * saturation).clamp(0.0, 1.0);
        }
    }
}
