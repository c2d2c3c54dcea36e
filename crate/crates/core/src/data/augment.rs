//! Window-coherent augmentation: one transform is drawn per window and
//! applied to every frame.

use rand::Rng;

use crate::diffcore::Tensor;

/// Sampling ranges. Each draw is uniform over `[-x, x]` (or `[-x°, x°]`).
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    pub scale: f64,
    pub flip: bool,
    /// Translation as a fraction of the frame size.
    pub jitter: f64,
    /// Brightness, contrast, saturation and hue factor range.
    pub photometric: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 20.0,
            scale: 0.1,
            flip: true,
            jitter: 0.05,
            photometric: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub scale: f64,
    pub flip: bool,
    pub shift_x: f64,
    pub shift_y: f64,
    pub brightness: f64,
    pub contrast: f64,
    /// Only used for three-channel frames.
    pub saturation: f64,
    pub hue: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            angle_deg: 0.0,
            scale: 1.0,
            flip: false,
            shift_x: 0.0,
            shift_y: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let mut sym = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let angle_deg = sym(cfg.rotation_deg);
        let scale = 1.0 + sym(cfg.scale);
        let shift_x = sym(cfg.jitter);
        let shift_y = sym(cfg.jitter);
        let brightness = sym(cfg.photometric);
        let contrast = sym(cfg.photometric);
        let saturation = sym(cfg.photometric);
        let hue = sym(cfg.photometric);
        let flip = cfg.flip && rng.gen_bool(0.5);
        AugmentParams {
            angle_deg,
            scale,
            flip,
            shift_x,
            shift_y,
            brightness,
            contrast,
            saturation,
            hue,
        }
    }

    fn is_geometric_identity(&self) -> bool {
        self.angle_deg == 0.0 && self.scale == 1.0 && self.shift_x == 0.0 && self.shift_y == 0.0
    }

    /// Applies the transform to a `[T,C,H,W]` window; results stay in `[0,1]`.
    pub fn apply(&self, window: &Tensor<f32>) -> Tensor<f32> {
        let s = window.shape();
        assert_eq!(s.len(), 4, "augment expects [T,C,H,W]");
        let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut data = window.data().to_vec();
        if self.flip {
            for row in data.chunks_exact_mut(w) {
                row.reverse();
            }
        }
        if !self.is_geometric_identity() {
            for plane in data.chunks_exact_mut(h * w) {
                let warped = self.warp(plane, h, w);
                plane.copy_from_slice(&warped);
            }
        }
        for frame in data.chunks_exact_mut(c * h * w) {
            self.photometric(frame, c, h * w);
        }
        Tensor::new(vec![t, c, h, w], data).expect("augmented values are finite")
    }

    /// Inverse-maps each output pixel through rotation about the centre,
    /// scaling and translation; bilinear sampling with edge clamping.
    fn warp(&self, plane: &[f32], h: usize, w: usize) -> Vec<f32> {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let (ty, tx) = (self.shift_y * h as f64, self.shift_x * w as f64);
        let at = |y: usize, x: usize| plane[y * w + x] as f64;
        let mut out = vec![0.0f32; h * w];
        for oy in 0..h {
            for ox in 0..w {
                let dy = oy as f64 - cy - ty;
                let dx = ox as f64 - cx - tx;
                let sx = (cos * dx + sin * dy) / self.scale + cx;
                let sy = (-sin * dx + cos * dy) / self.scale + cy;
                let sx = sx.clamp(0.0, w as f64 - 1.0);
                let sy = sy.clamp(0.0, h as f64 - 1.0);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[oy * w + ox] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
        out
    }

    fn photometric(&self, frame: &mut [f32], channels: usize, plane: usize) {
        let clamp = |v: f64| v.clamp(0.0, 1.0) as f32;
        if self.brightness != 0.0 {
            frame.iter_mut().for_each(|v| *v = clamp(*v as f64 + self.brightness));
        }
        if self.contrast != 0.0 {
            let mean = frame.iter().map(|&v| v as f64).sum::<f64>() / frame.len() as f64;
            let k = 1.0 + self.contrast;
            frame.iter_mut().for_each(|v| *v = clamp((*v as f64 - mean) * k + mean));
        }
        if channels != 3 {
            return;
        }
        if self.saturation != 0.0 || self.hue != 0.0 {
            let k = 1.0 + self.saturation;
            // Hue rotation about the grey axis in YIQ space.
            let (sin, cos) = (self.hue * std::f64::consts::PI).sin_cos();
            for p in 0..plane {
                let (r, g, b) = (frame[p] as f64, frame[plane + p] as f64, frame[2 * plane + p] as f64);
                let y = 0.299 * r + 0.587 * g + 0.114 * b;
                let i = 0.596 * r - 0.274 * g - 0.322 * b;
                let q = 0.211 * r - 0.523 * g + 0.312 * b;
                let (i, q) = (k * (cos * i - sin * q), k * (sin * i + cos * q));
                frame[p] = clamp(y + 0.956 * i + 0.621 * q);
                frame[plane + p] = clamp(y - 0.272 * i - 0.647 * q);
                frame[2 * plane + p] = clamp(y - 1.106 * i + 1.703 * q);
            }
        }
    }
}
