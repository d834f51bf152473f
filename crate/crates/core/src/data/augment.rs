//! Random resized crop with bilinear resampling.

use rand::Rng;

use super::Image;

const MAX_TRIES: usize = 10;

/// Crops a random region covering a `scale`-range fraction of the area with
/// aspect ratio in [3/4, 4/3] and resizes it back to the input extents.
pub fn random_resized_crop<R: Rng + ?Sized>(image: &Image, scale: (f64, f64), rng: &mut R) -> Image {
    random_resized_crop_with_ratio(image, scale, (3.0 / 4.0, 4.0 / 3.0), rng)
}

pub fn random_resized_crop_with_ratio<R: Rng + ?Sized>(
    image: &Image,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut R,
) -> Image {
    let (h, w) = (image.height(), image.width());
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..MAX_TRIES {
        let target = area * uniform(rng, scale.0, scale.1);
        let aspect = uniform(rng, log_lo, log_hi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return resize_region(image, top, left, ch, cw, h, w);
        }
    }
    image.clone()
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Bilinear resize of the `ch`×`cw` region at (`top`, `left`) to `oh`×`ow`,
/// sampling at pixel centres.
pub fn resize_region(image: &Image, top: usize, left: usize, ch: usize, cw: usize, oh: usize, ow: usize) -> Image {
    let axis = |out: usize, src: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(oh, ch);
    let xs = axis(ow, cw);
    let mut out = Image::filled(image.channels(), oh, ow, 0.0);
    for c in 0..image.channels() {
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let p = |y: usize, x: usize| image.get(c, top + y, left + x);
                let v = (1.0 - wy) * ((1.0 - wx) * p(y0, x0) + wx * p(y0, x1))
                    + wy * ((1.0 - wx) * p(y1, x0) + wx * p(y1, x1));
                out.set(c, oy, ox, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..3 * h * w).map(|i| (i % 97) as f32 / 96.0).collect();
        Image::new(3, h, w, data).unwrap()
    }

    #[test]
    fn full_scale_unit_aspect_is_identity() {
        let img = ramp(12, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = random_resized_crop_with_ratio(&img, (1.0, 1.0), (1.0, 1.0), &mut rng);
        assert_eq!(out, img);
    }

    #[test]
    fn constant_field_is_conserved() {
        let img = Image::filled(3, 32, 32, 0.37);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let out = random_resized_crop(&img, (0.5, 1.0), &mut rng);
            assert!((out.mean() - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn impossible_scale_falls_back_to_full_image() {
        let img = ramp(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // An area of 1e-6 pixels rounds to an empty crop on every try.
        let out = random_resized_crop(&img, (1e-8, 1e-8), &mut rng);
        assert_eq!(out, img);
    }

    #[test]
    fn half_region_upsamples_by_two() {
        // Top-left 2x2 of a 4x4 image resized to 4x4 reproduces the corner
        // pixel exactly at the clamped edge.
        let img = ramp(4, 4);
        let out = resize_region(&img, 0, 0, 2, 2, 4, 4);
        assert_eq!(out.get(0, 0, 0), img.get(0, 0, 0));
        assert_eq!(out.get(1, 3, 3), img.get(1, 1, 1));
        let mid = 0.75 * img.get(0, 0, 0) + 0.25 * img.get(0, 0, 1);
        assert!((out.get(0, 0, 1) - mid).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn output_extents_and_range(seed in any::<u64>(), lo in 0.05f64..1.0, h in 4usize..20, w in 4usize..20) {
            let img = ramp(h, w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = random_resized_crop(&img, (lo, 1.0), &mut rng);
            prop_assert_eq!((out.channels(), out.height(), out.width()), (3, h, w));
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
