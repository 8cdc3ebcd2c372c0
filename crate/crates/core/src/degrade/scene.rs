use rand::Rng;

use crate::tensor::Tensor;

fn color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

/// Piecewise-smooth procedural scene `3 x h x w` in `[0, 1]`: a colour
/// gradient, a few hard-edged rectangles and discs, and an oriented
/// sinusoidal texture patch. Values are rounded through `f32`.
pub fn generate_scene(h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let mut img = vec![0.0; 3 * h * w];
    let (c0, c1) = (color(rng), color(rng));
    let ga = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (ga.cos(), ga.sin());
    let span = (w as f64 * gx.abs() + h as f64 * gy.abs()).max(1.0);
    let off = (if gx < 0.0 { -gx * w as f64 } else { 0.0 }) + (if gy < 0.0 { -gy * h as f64 } else { 0.0 });
    for y in 0..h {
        for x in 0..w {
            let s = ((x as f64 * gx + y as f64 * gy + off) / span).clamp(0.0, 1.0);
            for c in 0..3 {
                img[c * h * w + y * w + x] = c0[c] + (c1[c] - c0[c]) * s;
            }
        }
    }

    let n_rect = rng.gen_range(2..=4);
    for _ in 0..n_rect {
        let rw = rng.gen_range(w / 5..=w * 3 / 5).max(1);
        let rh = rng.gen_range(h / 5..=h * 3 / 5).max(1);
        let x0 = rng.gen_range(0..w.saturating_sub(rw).max(1));
        let y0 = rng.gen_range(0..h.saturating_sub(rh).max(1));
        let col = color(rng);
        let alpha = rng.gen_range(0.6..1.0);
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                for c in 0..3 {
                    let v = &mut img[c * h * w + y * w + x];
                    *v = (1.0 - alpha) * *v + alpha * col[c];
                }
            }
        }
    }

    let n_disc = rng.gen_range(0..=2);
    for _ in 0..n_disc {
        let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let r = rng.gen_range(0.1..0.3) * w.min(h) as f64;
        let col = color(rng);
        for y in 0..h {
            for x in 0..w {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                if d <= r {
                    for c in 0..3 {
                        img[c * h * w + y * w + x] = col[c];
                    }
                }
            }
        }
    }

    // Oriented texture inside a random window.
    let amp = rng.gen_range(0.03..0.1);
    let freq = rng.gen_range(0.08..0.3);
    let ta = rng.gen_range(0.0..std::f64::consts::PI);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let tint = color(rng);
    let (tx0, ty0) = (rng.gen_range(0..w / 2 + 1), rng.gen_range(0..h / 2 + 1));
    let (tx1, ty1) = ((tx0 + w / 2).min(w), (ty0 + h / 2).min(h));
    for y in ty0..ty1 {
        for x in tx0..tx1 {
            let s = (std::f64::consts::TAU * freq * (x as f64 * ta.cos() + y as f64 * ta.sin()) + phase).sin();
            for c in 0..3 {
                img[c * h * w + y * w + x] += amp * s * (0.5 + tint[c]);
            }
        }
    }

    for v in &mut img {
        *v = (v.clamp(0.0, 1.0) as f32) as f64;
    }
    Tensor::new(vec![3, h, w], img).expect("scene buffer matches its shape")
}
