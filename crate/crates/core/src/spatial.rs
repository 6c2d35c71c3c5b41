//! Connected-component labelling and Euclidean distance transforms.

use std::collections::VecDeque;

use ndarray::Array2;

/// 8-connected neighbour offsets.
const NEIGHBOURS_8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// 1-based label in the label image.
    pub label: u32,
    pub pixels: Vec<(usize, usize)>,
}

impl Component {
    pub fn size(&self) -> usize {
        self.pixels.len()
    }
}

/// Labels the 8-connected components of `mask`. Components are numbered in
/// row-major order of their first pixel; the label image holds 0 outside.
pub fn connected_components(mask: &Array2<bool>) -> (Array2<u32>, Vec<Component>) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            let label = components.len() as u32 + 1;
            let mut pixels = Vec::new();
            labels[[y, x]] = label;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                pixels.push((cy, cx));
                for (dy, dx) in NEIGHBOURS_8 {
                    let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = label;
                        queue.push_back((ny, nx));
                    }
                }
            }
            pixels.sort_unstable();
            components.push(Component { label, pixels });
        }
    }
    (labels, components)
}

/// The 8-connected component of `mask` that contains `seed`, as a mask.
/// Empty when the seed itself is not set.
pub fn component_containing(mask: &Array2<bool>, seed: (usize, usize)) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut out = Array2::from_elem((h, w), false);
    if !mask[seed] {
        return out;
    }
    let mut queue = VecDeque::from([seed]);
    out[seed] = true;
    while let Some((cy, cx)) = queue.pop_front() {
        for (dy, dx) in NEIGHBOURS_8 {
            let (ny, nx) = (cy as isize + dy, cx as isize + dx);
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            let p = (ny as usize, nx as usize);
            if mask[p] && !out[p] {
                out[p] = true;
                queue.push_back(p);
            }
        }
    }
    out
}

/// Stand-in for "no seed" that keeps the parabola arithmetic finite.
const FAR: f64 = 1e20;

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let meet = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64)
    };
    for q in 1..n {
        let mut s = meet(q, v[k]);
        // z[0] is -inf, so this never pops below the first parabola.
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel of
/// `seeds`. Infinite everywhere when there are no seeds.
pub fn squared_distance_transform(seeds: &Array2<bool>) -> Array2<f64> {
    let (h, w) = seeds.dim();
    let mut grid = seeds.mapv(|s| if s { 0.0 } else { FAR });
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[[y, x]];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[[y, x]] = out[y];
        }
    }
    for y in 0..h {
        for x in 0..w {
            f[x] = grid[[y, x]];
        }
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        for x in 0..w {
            grid[[y, x]] = out[x];
        }
    }
    grid.mapv_inplace(|d| if d >= FAR * 0.5 { f64::INFINITY } else { d });
    grid
}

/// The pixel of `region` farthest from anything outside it, treating the
/// image border as outside. Ties resolve to the first pixel in row-major
/// order. `None` for an empty region.
pub fn pole_of_inaccessibility(region: &Array2<bool>) -> Option<(usize, usize)> {
    let (h, w) = region.dim();
    let mut outside = Array2::from_elem((h + 2, w + 2), true);
    for ((y, x), &inside) in region.indexed_iter() {
        outside[[y + 1, x + 1]] = !inside;
    }
    let dist = squared_distance_transform(&outside);
    let mut best: Option<((usize, usize), f64)> = None;
    for ((y, x), &inside) in region.indexed_iter() {
        if !inside {
            continue;
        }
        let d = dist[[y + 1, x + 1]];
        if best.map_or(true, |(_, bd)| d > bd) {
            best = Some(((y, x), d));
        }
    }
    best.map(|(p, _)| p)
}
