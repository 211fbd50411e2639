/// Voxels of `mask` with at least one face neighbour in the background.
/// Positions outside the grid count as background.
pub fn surface(mask: &[bool], [d, h, w]: [usize; 3]) -> Vec<bool> {
    let at = |z: isize, y: isize, x: isize| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
            return false;
        }
        mask[(z as usize * h + y as usize) * w + x as usize]
    };
    let mut out = vec![false; mask.len()];
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !at(z, y, x) {
                    continue;
                }
                let exposed = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    .iter()
                    .any(|&(a, b, c)| !at(z + a, y + b, x + c));
                out[(z as usize * h + y as usize) * w + x as usize] = exposed;
            }
        }
    }
    out
}

/// Exact squared Euclidean distance from every voxel to the nearest `true`
/// voxel of `features`, with physical `spacing` per axis. Infinite when there
/// are no features.
pub fn edt_squared(features: &[bool], extents: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut f: Vec<f64> = features.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let [d, h, w] = extents;
    let strides = [h * w, w, 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let n = extents[axis];
        let others: Vec<usize> = (0..d * h * w).filter(|&i| (i / strides[axis]) % n == 0).collect();
        for start in others {
            line.clear();
            line.extend((0..n).map(|k| f[start + k * strides[axis]]));
            lower_envelope(&line, spacing[axis], &mut out);
            for (k, &v) in out.iter().enumerate() {
                f[start + k * strides[axis]] = v;
            }
        }
    }
    f
}

/// One-dimensional squared distance transform of a sampled function,
/// `out[p] = min_q f[q] + (s·(p − q))²`, by the lower envelope of parabolas.
fn lower_envelope(f: &[f64], s: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return;
    }
    let pos = |q: usize| q as f64 * s;
    // Intersection abscissa of the parabolas rooted at q and r (q < r).
    let meet = |q: usize, r: usize| ((f[r] + pos(r) * pos(r)) - (f[q] + pos(q) * pos(q))) / (2.0 * (pos(r) - pos(q)));
    let mut hull: Vec<usize> = Vec::with_capacity(sites.len());
    let mut bounds: Vec<f64> = Vec::with_capacity(sites.len());
    for &q in &sites {
        while let Some(&top) = hull.last() {
            let x = meet(top, q);
            if hull.len() > 1 && x <= bounds[bounds.len() - 1] {
                hull.pop();
                bounds.pop();
            } else {
                bounds.push(x);
                break;
            }
        }
        if hull.is_empty() {
            bounds.clear();
        }
        hull.push(q);
    }
    // bounds[i] separates hull[i] from hull[i + 1].
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let x = pos(p);
        while k + 1 < hull.len() && bounds[k] < x {
            k += 1;
        }
        let q = hull[k];
        *o = f[q] + (x - pos(q)).powi(2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_matches_brute_force() {
        let f = [f64::INFINITY, 0.0, f64::INFINITY, f64::INFINITY, 4.0, 0.5, f64::INFINITY, f64::INFINITY, 9.0];
        let mut out = Vec::new();
        lower_envelope(&f, 1.7, &mut out);
        for p in 0..f.len() {
            let brute = (0..f.len()).map(|q| f[q] + (1.7 * (p as f64 - q as f64)).powi(2)).fold(f64::INFINITY, f64::min);
            assert!((out[p] - brute).abs() < 1e-12, "{p}: {} vs {brute}", out[p]);
        }
    }

    #[test]
    fn single_feature_distances() {
        let mut feat = vec![false; 27];
        feat[13] = true;
        let d = edt_squared(&feat, [3, 3, 3], [2.0, 1.0, 0.5]);
        assert_eq!(d[13], 0.0);
        assert_eq!(d[0], 4.0 + 1.0 + 0.25);
        assert!(edt_squared(&[false; 8], [2, 2, 2], [1.0; 3]).iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn surface_of_solid_cube() {
        let m = vec![true; 27];
        let s = surface(&m, [3, 3, 3]);
        assert_eq!(s.iter().filter(|&&v| v).count(), 26);
        assert!(!s[13]);
    }
}
