//! Seeded toy dataset generator: bright geometric objects on dark
//! backgrounds, with colored elliptical defects on the test split. The
//! layout matches the MVTec directory convention the loader expects.

use crate::data::{save_gray, save_rgb};
use crate::error::Result;
use crate::nn::rng_from;
use crate::tensor::Tensor;
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use std::path::Path;

#[derive(Clone, Copy, Debug)]
pub struct ToySpec {
    pub size: usize,
    pub train_normal: usize,
    pub test_normal: usize,
    pub test_defect: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            size: 64,
            train_normal: 40,
            test_normal: 10,
            test_defect: 20,
        }
    }
}

enum Shape {
    Disk { r: f64 },
    Square { hx: f64, hy: f64 },
}

struct Object {
    cy: f64,
    cx: f64,
    shape: Shape,
    color: [f64; 3],
    extent: f64,
}

fn sample_object(rng: &mut ChaCha20Rng, size: usize) -> Object {
    let half = size as f64 / 2.0;
    let cy = half + rng.random_range(-3.0..3.0);
    let cx = half + rng.random_range(-3.0..3.0);
    let color = [
        rng.random_range(0.55..0.90),
        rng.random_range(0.55..0.90),
        rng.random_range(0.55..0.90),
    ];
    let (shape, extent) = if rng.random_range(0..2) == 0 {
        let r = rng.random_range(0.28..0.38) * size as f64;
        (Shape::Disk { r }, r)
    } else {
        let hx = rng.random_range(0.25..0.34) * size as f64;
        let hy = rng.random_range(0.25..0.34) * size as f64;
        (Shape::Square { hx, hy }, hx.min(hy))
    };
    Object {
        cy,
        cx,
        shape,
        color,
        extent,
    }
}

impl Object {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        match self.shape {
            Shape::Disk { r } => dy * dy + dx * dx <= r * r,
            Shape::Square { hx, hy } => dx.abs() <= hx && dy.abs() <= hy,
        }
    }
}

fn render_normal(rng: &mut ChaCha20Rng, size: usize) -> (Tensor, Object) {
    let obj = sample_object(rng, size);
    let bg = [
        rng.random_range(0.05..0.15),
        rng.random_range(0.05..0.15),
        rng.random_range(0.05..0.15),
    ];
    let mut img = Tensor::zeros(IxDyn(&[3, size, size]));
    for y in 0..size {
        for x in 0..size {
            let (base, noise_amp, shade) = if obj.contains(y, x) {
                let dy = y as f64 + 0.5 - obj.cy;
                let dx = x as f64 + 0.5 - obj.cx;
                let d = (dy * dy + dx * dx).sqrt() / obj.extent.max(1.0);
                (obj.color, 0.03, 1.0 - 0.15 * d.min(1.0))
            } else {
                (bg, 0.02, 1.0)
            };
            for c in 0..3 {
                let v = base[c] * shade + rng.random_range(-noise_amp..noise_amp);
                img[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    (img, obj)
}

fn defect_color(rng: &mut ChaCha20Rng, object_color: &[f64; 3]) -> [f64; 3] {
    match rng.random_range(0..3) {
        // Dark pit.
        0 => {
            let v = rng.random_range(0.02..0.18);
            [v, v, v]
        }
        // One saturated channel.
        1 => {
            let hot = rng.random_range(0..3usize);
            let mut c = [0.08, 0.08, 0.08];
            c[hot] = rng.random_range(0.85..1.0);
            c
        }
        // Complement of the object color.
        _ => [
            (1.0 - object_color[0]).clamp(0.0, 1.0),
            (1.0 - object_color[1]).clamp(0.0, 1.0),
            (1.0 - object_color[2]).clamp(0.0, 1.0),
        ],
    }
}

fn render_defect(rng: &mut ChaCha20Rng, size: usize) -> (Tensor, Tensor) {
    let (mut img, obj) = render_normal(rng, size);
    let mut mask = Tensor::zeros(IxDyn(&[size, size]));
    let n_defects = rng.random_range(1..3usize);
    for _ in 0..n_defects {
        let color = defect_color(rng, &obj.color);
        let beta = rng.random_range(0.85..1.0);
        // Keep the defect center well inside the object so the whole
        // ellipse stays on the foreground.
        let off = 0.5 * obj.extent;
        let dcy = obj.cy + rng.random_range(-off..off);
        let dcx = obj.cx + rng.random_range(-off..off);
        let a = rng.random_range(4.0..9.0);
        let b = rng.random_range(4.0..9.0);
        let ang: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (sin, cos) = ang.sin_cos();
        for y in 0..size {
            for x in 0..size {
                if !obj.contains(y, x) {
                    continue;
                }
                let dy = y as f64 + 0.5 - dcy;
                let dx = x as f64 + 0.5 - dcx;
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    for c in 0..3 {
                        let noise = rng.random_range(-0.02..0.02);
                        let target = (color[c] + noise).clamp(0.0, 1.0);
                        img[[c, y, x]] = (1.0 - beta) * img[[c, y, x]] + beta * target;
                    }
                    mask[[y, x]] = 1.0;
                }
            }
        }
    }
    (img, mask)
}

/// Generate the toy dataset under `root/category` in MVTec layout.
pub fn generate_toy_dataset(root: &Path, category: &str, seed: u64, spec: &ToySpec) -> Result<()> {
    let base = root.join(category);
    let train_dir = base.join("train").join("good");
    let test_good_dir = base.join("test").join("good");
    let test_defect_dir = base.join("test").join("defect");
    let gt_dir = base.join("ground_truth").join("defect");
    for d in [&train_dir, &test_good_dir, &test_defect_dir, &gt_dir] {
        std::fs::create_dir_all(d).map_err(|e| crate::error::Error::io(d.clone(), e))?;
    }

    for i in 0..spec.train_normal {
        let mut rng = rng_from(seed, &format!("toy.train.good.{i}"));
        let (img, _) = render_normal(&mut rng, spec.size);
        save_rgb(&train_dir.join(format!("{i:03}.png")), &img)?;
    }
    for i in 0..spec.test_normal {
        let mut rng = rng_from(seed, &format!("toy.test.good.{i}"));
        let (img, _) = render_normal(&mut rng, spec.size);
        save_rgb(&test_good_dir.join(format!("{i:03}.png")), &img)?;
    }
    for i in 0..spec.test_defect {
        let mut rng = rng_from(seed, &format!("toy.test.defect.{i}"));
        let (img, mask) = render_defect(&mut rng, spec.size);
        save_rgb(&test_defect_dir.join(format!("{i:03}.png")), &img)?;
        save_gray(&gt_dir.join(format!("{i:03}_mask.png")), &mask)?;
    }
    Ok(())
}
