//! Pyramidal Lucas-Kanade point tracking on grayscale images.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::exec::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LkConfig {
    pub levels: usize,
    /// Odd window side, pixels.
    pub window: usize,
    pub max_iterations: usize,
    pub epsilon: f64,
    /// Largest accepted forward-backward disagreement, pixels.
    pub fb_threshold: f64,
    /// Smallest accepted eigenvalue of the mean structure tensor.
    pub min_eigen: f64,
}

impl Default for LkConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            window: 21,
            max_iterations: 30,
            epsilon: 0.01,
            fb_threshold: 0.5,
            min_eigen: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
struct Image {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Image {
    fn px(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (a, b) = (x - x0, y - y0);
        let (xi, yi) = (x0 as isize, y0 as isize);
        let p = |dx, dy| self.px(xi + dx, yi + dy) as f64;
        p(0, 0) * (1.0 - a) * (1.0 - b) + p(1, 0) * a * (1.0 - b) + p(0, 1) * (1.0 - a) * b + p(1, 1) * a * b
    }

    fn inside(&self, p: &Vector2<f64>, margin: f64) -> bool {
        p.x >= margin && p.y >= margin && p.x <= self.w as f64 - 1.0 - margin && p.y <= self.h as f64 - 1.0 - margin
    }

    /// Binomial blur followed by decimation by two.
    fn down(&self) -> Image {
        const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let (w, h) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = (2 * x as isize, 2 * y as isize);
                let mut s = 0.0;
                for (j, ky) in K.iter().enumerate() {
                    for (i, kx) in K.iter().enumerate() {
                        s += kx * ky * self.px(cx + i as isize - 2, cy + j as isize - 2);
                    }
                }
                data.push(s);
            }
        }
        Image { w, h, data }
    }
}

fn pyramid(gray: &[f32], w: usize, h: usize, levels: usize) -> Vec<Image> {
    let mut out = vec![Image {
        w,
        h,
        data: gray.to_vec(),
    }];
    for _ in 1..levels.max(1) {
        let next = out.last().expect("non-empty").down();
        if next.w < 8 || next.h < 8 {
            break;
        }
        out.push(next);
    }
    out
}

fn track_one(prev: &[Image], curr: &[Image], p: &Vector2<f64>, cfg: &LkConfig) -> Option<Vector2<f64>> {
    let half = (cfg.window / 2) as isize;
    let mut g = Vector2::zeros();
    for level in (0..prev.len()).rev() {
        let (ip, ic) = (&prev[level], &curr[level]);
        let scale = (1u32 << level) as f64;
        let pl = p / scale;
        let n = ((2 * half + 1) * (2 * half + 1)) as usize;
        let mut tmpl = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n);
        let mut gm = Matrix2::zeros();
        for dy in -half..=half {
            for dx in -half..=half {
                let (x, y) = (pl.x + dx as f64, pl.y + dy as f64);
                let ix = 0.5 * (ip.sample(x + 1.0, y) - ip.sample(x - 1.0, y));
                let iy = 0.5 * (ip.sample(x, y + 1.0) - ip.sample(x, y - 1.0));
                tmpl.push(ip.sample(x, y));
                grads.push(Vector2::new(ix, iy));
                gm += Matrix2::new(ix * ix, ix * iy, ix * iy, iy * iy);
            }
        }
        let min_eig = gm.symmetric_eigenvalues().min() / n as f64;
        if !(min_eig > cfg.min_eigen) {
            return None;
        }
        let g_inv = gm.try_inverse()?;
        let mut d = Vector2::zeros();
        for _ in 0..cfg.max_iterations {
            let q = pl + g + d;
            if !ic.inside(&q, 0.0) {
                return None;
            }
            let mut b = Vector2::zeros();
            let mut k = 0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let e = tmpl[k] - ic.sample(q.x + dx as f64, q.y + dy as f64);
                    b += grads[k] * e;
                    k += 1;
                }
            }
            let inc = g_inv * b;
            d += inc;
            if inc.norm() < cfg.epsilon {
                break;
            }
        }
        g = if level > 0 { (g + d) * 2.0 } else { g + d };
    }
    let out = p + g;
    curr[0].inside(&out, 0.0).then_some(out)
}

/// Tracks `points` from `prev` to `curr` (row-major grayscale of equal
/// size). A point is lost when tracking fails, leaves the image, or the
/// backward track lands further than `fb_threshold` from the start.
pub fn track_lk(
    prev: &[f32],
    curr: &[f32],
    width: usize,
    height: usize,
    points: &[Vector2<f64>],
    config: &LkConfig,
) -> Vec<Option<Vector2<f64>>> {
    let pp = pyramid(prev, width, height, config.levels);
    let pc = pyramid(curr, width, height, config.levels);
    Exec::default().map_slice(points, |p| {
        let fwd = track_one(&pp, &pc, p, config)?;
        let back = track_one(&pc, &pp, &fwd, config)?;
        ((back - p).norm() < config.fb_threshold).then_some(fwd)
    })
}
