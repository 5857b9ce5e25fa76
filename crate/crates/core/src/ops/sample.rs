use crate::tensor::FeatureMap;

/// Bilinear interpolation of all channels of one batch slice at a continuous
/// pixel location. Locations outside [0, W-1] x [0, H-1] contribute zero
/// (zero padding), so the function is total over finite inputs.
pub fn sample_point(map: &FeatureMap, b: usize, x: f64, y: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let x0 = x.floor();
    let y0 = y.floor();
    let wx = x - x0;
    let wy = y - y0;
    let corners = [
        (x0 as isize, y0 as isize, (1.0 - wx) * (1.0 - wy)),
        (x0 as isize + 1, y0 as isize, wx * (1.0 - wy)),
        (x0 as isize, y0 as isize + 1, (1.0 - wx) * wy),
        (x0 as isize + 1, y0 as isize + 1, wx * wy),
    ];
    for (cx, cy, weight) in corners {
        if weight == 0.0 || cx < 0 || cy < 0 || cx >= map.w as isize || cy >= map.h as isize {
            continue;
        }
        for c in 0..map.c {
            out[c] += weight * map.at(b, c, cy as usize, cx as usize);
        }
    }
}

/// Scatter the gradient of one sampled point back onto the map and the
/// sampling coordinates. Returns (d/dx, d/dy) accumulated over channels.
pub fn scatter_point_grad(
    map: &FeatureMap,
    grad_map: &mut FeatureMap,
    b: usize,
    x: f64,
    y: f64,
    grad_out: &[f64],
) -> (f64, f64) {
    let x0 = x.floor();
    let y0 = y.floor();
    let wx = x - x0;
    let wy = y - y0;
    // weight and its partials (dw/dx, dw/dy) per corner
    let corners = [
        (x0 as isize, y0 as isize, (1.0 - wx) * (1.0 - wy), -(1.0 - wy), -(1.0 - wx)),
        (x0 as isize + 1, y0 as isize, wx * (1.0 - wy), 1.0 - wy, -wx),
        (x0 as isize, y0 as isize + 1, (1.0 - wx) * wy, -wy, 1.0 - wx),
        (x0 as isize + 1, y0 as isize + 1, wx * wy, wy, wx),
    ];
    let mut gx = 0.0;
    let mut gy = 0.0;
    for (cx, cy, weight, dwdx, dwdy) in corners {
        if cx < 0 || cy < 0 || cx >= map.w as isize || cy >= map.h as isize {
            continue;
        }
        for c in 0..map.c {
            let g = grad_out[c];
            if g == 0.0 {
                continue;
            }
            *grad_map.at_mut(b, c, cy as usize, cx as usize) += g * weight;
            let v = map.at(b, c, cy as usize, cx as usize);
            gx += g * v * dwdx;
            gy += g * v * dwdy;
        }
    }
    (gx, gy)
}

/// Sample a batch of point lists; `points[b]` holds (x, y) pairs for batch b.
/// Returns per-batch, per-point channel vectors.
pub fn bilinear_sample(map: &FeatureMap, points: &[Vec<(f64, f64)>]) -> Vec<Vec<Vec<f64>>> {
    points
        .iter()
        .enumerate()
        .map(|(b, pts)| {
            pts.iter()
                .map(|&(x, y)| {
                    let mut out = vec![0.0; map.c];
                    sample_point(map, b, x, y, &mut out);
                    out
                })
                .collect()
        })
        .collect()
}

/// Backward for [`bilinear_sample`]: returns the map gradient and per-point
/// coordinate gradients.
pub fn bilinear_sample_backward(
    map: &FeatureMap,
    points: &[Vec<(f64, f64)>],
    grad_out: &[Vec<Vec<f64>>],
) -> (FeatureMap, Vec<Vec<(f64, f64)>>) {
    let mut grad_map = FeatureMap::zeros(map.b, map.c, map.h, map.w);
    let grad_points = points
        .iter()
        .enumerate()
        .map(|(b, pts)| {
            pts.iter()
                .enumerate()
                .map(|(p, &(x, y))| scatter_point_grad(map, &mut grad_map, b, x, y, &grad_out[b][p]))
                .collect()
        })
        .collect();
    (grad_map, grad_points)
}
