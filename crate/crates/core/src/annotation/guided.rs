//! Edge-preserving guided filter with a multi-channel guide.
//!
//! Within each `(2r+1)^2` window the output is modelled as a linear function
//! of the guide, `q = a . I + b`, fitted to the input by ridge-regularized
//! least squares. Per-pixel coefficients are the box average of the
//! coefficients of every window covering the pixel.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Normalized box mean over a `(2r+1)^2` window clipped to the image.
pub fn box_mean(input: ArrayView2<'_, f64>, radius: usize) -> Array2<f64> {
    let (h, w) = input.dim();
    let mut integral = Array2::<f64>::zeros((h + 1, w + 1));
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += input[[y, x]];
            integral[[y + 1, x + 1]] = integral[[y, x + 1]] + row;
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let y0 = y.saturating_sub(radius);
        let x0 = x.saturating_sub(radius);
        let y1 = (y + radius + 1).min(h);
        let x1 = (x + radius + 1).min(w);
        let sum = integral[[y1, x1]] - integral[[y0, x1]] - integral[[y1, x0]] + integral[[y0, x0]];
        sum / ((y1 - y0) * (x1 - x0)) as f64
    })
}

/// Solves `m x = rhs` for a small symmetric positive-definite `m` in place
/// (Cholesky). `m` is row-major `n x n`.
fn solve_spd(m: &mut [f64], rhs: &mut [f64], n: usize) {
    for j in 0..n {
        let mut d = m[j * n + j];
        for k in 0..j {
            d -= m[j * n + k] * m[j * n + k];
        }
        let d = d.max(f64::MIN_POSITIVE).sqrt();
        m[j * n + j] = d;
        for i in j + 1..n {
            let mut v = m[i * n + j];
            for k in 0..j {
                v -= m[i * n + k] * m[j * n + k];
            }
            m[i * n + j] = v / d;
        }
    }
    for i in 0..n {
        let mut v = rhs[i];
        for k in 0..i {
            v -= m[i * n + k] * rhs[k];
        }
        rhs[i] = v / m[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = rhs[i];
        for k in i + 1..n {
            v -= m[k * n + i] * rhs[k];
        }
        rhs[i] = v / m[i * n + i];
    }
}

pub fn guided_filter(
    input: ArrayView2<'_, f32>,
    guide: &RasterImage,
    window_radius: usize,
    epsilon: f32,
) -> Result<Array2<f32>> {
    if window_radius < 1 {
        return Err(Error::InvalidArgument("guided filter radius must be >= 1".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("guided filter epsilon must be > 0".into()));
    }
    let (h, w) = input.dim();
    if guide.height() != h || guide.width() != w {
        return Err(Error::Shape(format!(
            "guide is {}x{}, input is {h}x{w}",
            guide.height(),
            guide.width()
        )));
    }
    let c = guide.channels();
    let r = window_radius;
    let p = input.mapv(f64::from);
    let guide_px = guide.pixels();
    let chans: Vec<Array2<f64>> = (0..c)
        .map(|k| guide_px.index_axis(ndarray::Axis(0), k).mapv(f64::from))
        .collect();

    let mean_p = box_mean(p.view(), r);
    let mean_i: Vec<_> = chans.iter().map(|ch| box_mean(ch.view(), r)).collect();
    let corr_ip: Vec<_> = chans.iter().map(|ch| box_mean((ch * &p).view(), r)).collect();
    let mut corr_ii = vec![Array2::<f64>::zeros((0, 0)); c * c];
    for a in 0..c {
        for b in a..c {
            let m = box_mean((&chans[a] * &chans[b]).view(), r);
            corr_ii[b * c + a] = m.clone();
            corr_ii[a * c + b] = m;
        }
    }

    let mut coef_a = vec![Array2::<f64>::zeros((h, w)); c];
    let mut coef_b = Array2::<f64>::zeros((h, w));
    let mut sigma = vec![0.0; c * c];
    let mut rhs = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            for a in 0..c {
                for b in 0..c {
                    sigma[a * c + b] = corr_ii[a * c + b][[y, x]] - mean_i[a][[y, x]] * mean_i[b][[y, x]];
                }
                sigma[a * c + a] += epsilon as f64;
                rhs[a] = corr_ip[a][[y, x]] - mean_i[a][[y, x]] * mean_p[[y, x]];
            }
            solve_spd(&mut sigma, &mut rhs, c);
            let mut b = mean_p[[y, x]];
            for a in 0..c {
                coef_a[a][[y, x]] = rhs[a];
                b -= rhs[a] * mean_i[a][[y, x]];
            }
            coef_b[[y, x]] = b;
        }
    }

    let mut out = box_mean(coef_b.view(), r);
    for (a, ch) in coef_a.iter().zip(&chans) {
        out = out + box_mean(a.view(), r) * ch;
    }
    Ok(out.mapv(|v| v as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn gray(img: Array2<f32>) -> RasterImage {
        let (h, w) = img.dim();
        RasterImage::new(img.into_shape_with_order((1, h, w)).unwrap()).unwrap()
    }

    /// Brute-force reference for a single-channel guide: explicit per-window
    /// least squares followed by explicit averaging.
    fn direct_guided(p: &Array2<f32>, guide: &Array2<f32>, r: usize, eps: f64) -> Array2<f64> {
        let (h, w) = p.dim();
        let window = |y: usize, x: usize| {
            let ys = y.saturating_sub(r)..(y + r + 1).min(h);
            let xs = x.saturating_sub(r)..(x + r + 1).min(w);
            ys.flat_map(move |yy| xs.clone().map(move |xx| (yy, xx)))
        };
        let mut a = Array2::<f64>::zeros((h, w));
        let mut b = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let pts: Vec<_> = window(y, x).collect();
                let n = pts.len() as f64;
                let mi = pts.iter().map(|&q| guide[q] as f64).sum::<f64>() / n;
                let mp = pts.iter().map(|&q| p[q] as f64).sum::<f64>() / n;
                let var = pts.iter().map(|&q| (guide[q] as f64 - mi).powi(2)).sum::<f64>() / n;
                let cov = pts.iter().map(|&q| (guide[q] as f64 - mi) * (p[q] as f64 - mp)).sum::<f64>() / n;
                a[[y, x]] = cov / (var + eps);
                b[[y, x]] = mp - a[[y, x]] * mi;
            }
        }
        Array2::from_shape_fn((h, w), |(y, x)| {
            let pts: Vec<_> = window(y, x).collect();
            let n = pts.len() as f64;
            let ma = pts.iter().map(|&q| a[q]).sum::<f64>() / n;
            let mb = pts.iter().map(|&q| b[q]).sum::<f64>() / n;
            ma * guide[[y, x]] as f64 + mb
        })
    }

    #[test]
    fn constant_guide_reduces_to_box_smoothing() {
        let p = Array2::from_shape_fn((9, 7), |(y, x)| ((y * 7 + x) % 5) as f32 / 5.0);
        let guide = gray(Array2::from_elem((9, 7), 0.4));
        let out = guided_filter(p.view(), &guide, 2, 0.01).unwrap();
        let twice = box_mean(box_mean(p.mapv(f64::from).view(), 2).view(), 2);
        for (a, b) in out.iter().zip(twice.iter()) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn input_matching_a_guide_channel_passes_through() {
        let p = Array2::from_shape_fn((10, 10), |(y, x)| ((y * 3 + x * 5) % 11) as f32 / 11.0);
        let guide = Array3::from_shape_fn((3, 10, 10), |(c, y, x)| match c {
            0 => p[[y, x]],
            1 => ((y * 7 + x) % 4) as f32 / 4.0,
            _ => ((x * x + y) % 6) as f32 / 6.0,
        });
        let guide = RasterImage::new(guide).unwrap();
        let out = guided_filter(p.view(), &guide, 1, 1e-9).unwrap();
        for (a, b) in out.iter().zip(p.iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn matches_direct_least_squares_and_sharpens_step() {
        let step = Array2::from_shape_fn((8, 8), |(_, x)| if x < 4 { 0.1f32 } else { 0.9 });
        // Input: the step blurred horizontally.
        let blurred = Array2::from_shape_fn((8, 8), |(_, x)| match x {
            0..=1 => 0.0f32,
            2 => 0.25,
            3 => 0.45,
            4 => 0.55,
            5 => 0.75,
            _ => 1.0,
        });
        let fast = guided_filter(blurred.view(), &gray(step.clone()), 1, 1e-3).unwrap();
        let slow = direct_guided(&blurred, &step, 1, 1e-3);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
        // The jump across the guide edge grows.
        let jump = |m: &dyn Fn(usize) -> f64| m(4) - m(3);
        let before = jump(&|x| blurred[[4, x]] as f64);
        let after = jump(&|x| fast[[4, x]] as f64);
        assert!(after > 2.0 * before, "edge jump {after} vs {before}");
    }
}
