use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random train-time perturbation of one glyph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    /// Probability of a horizontal mirror.
    pub flip: f64,
    /// Maximum rotation in degrees, either direction.
    pub rotate_deg: f64,
    /// Smallest crop side as a fraction of the image (zoom in up to 1/x).
    pub min_crop: f64,
    /// Brightness is multiplied by a factor in `[1 - b, 1 + b]`.
    pub brightness: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            flip: 0.0,
            rotate_deg: 10.0,
            min_crop: 0.8,
            brightness: 0.2,
        }
    }
}

impl Augment {
    /// Resamples a `side×side` byte image into `[0, 1]` reals.
    pub fn apply(&self, img: &[u8], side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let flip = rng.random_bool(self.flip.clamp(0.0, 1.0));
        let theta = rng.random_range(-1.0..=1.0) * self.rotate_deg.to_radians();
        let crop = if self.min_crop < 1.0 {
            rng.random_range(self.min_crop..=1.0)
        } else {
            1.0
        };
        let gain = 1.0 + rng.random_range(-1.0..=1.0) * self.brightness;
        let (sin, cos) = theta.sin_cos();
        let c = (side as f64 - 1.0) / 2.0;
        let mut out = vec![0.0; side * side];
        for y in 0..side {
            for x in 0..side {
                let mut dx = (x as f64 - c) * crop;
                let dy = (y as f64 - c) * crop;
                if flip {
                    dx = -dx;
                }
                let sx = c + cos * dx + sin * dy;
                let sy = c - sin * dx + cos * dy;
                let v = bilinear(img, side, sx, sy) / 255.0 * gain;
                out[y * side + x] = v.clamp(0.0, 1.0);
            }
        }
        out
    }
}

fn bilinear(img: &[u8], side: usize, x: f64, y: f64) -> f64 {
    let px = |xi: isize, yi: isize| -> f64 {
        if xi < 0 || yi < 0 || xi >= side as isize || yi >= side as isize {
            0.0
        } else {
            img[yi as usize * side + xi as usize] as f64
        }
    };
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as isize, y0 as isize);
    px(xi, yi) * (1.0 - fx) * (1.0 - fy)
        + px(xi + 1, yi) * fx * (1.0 - fy)
        + px(xi, yi + 1) * (1.0 - fx) * fy
        + px(xi + 1, yi + 1) * fx * fy
}
