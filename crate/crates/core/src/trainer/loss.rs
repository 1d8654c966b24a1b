use crate::error::{Error, Result};
use crate::raster::Rgb;

/// Floor on the color standard deviation in the depth smoothness loss.
pub const DEPTH_LOSS_EPS: f64 = 1e-4;

/// Mean over rays of the squared L2 color error, with its gradient
/// `2 (rendered - truth) / n` per ray.
pub fn rgb_loss(rendered: &[Rgb], truth: &[Rgb]) -> Result<(f64, Vec<Rgb>)> {
    if rendered.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} rendered rays vs {} ground-truth rays",
            rendered.len(),
            truth.len()
        )));
    }
    if rendered.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = rendered.len() as f64;
    let mut loss = 0.0;
    let grads = rendered
        .iter()
        .zip(truth)
        .map(|(r, t)| {
            let d = [r[0] - t[0], r[1] - t[1], r[2] - t[2]];
            loss += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            [2.0 * d[0] / n, 2.0 * d[1] / n, 2.0 * d[2] / n]
        })
        .collect();
    Ok((loss / n, grads))
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (sum, count) = values
        .clone()
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    let mean = sum / count as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    var.sqrt()
}

/// `std(d_far / d) / max(std(c), eps)` over a 3x3 patch: inverse-depth
/// variation is penalized where the ground truth color is flat.
pub fn depth_smoothness_loss(depths: &[f64; 9], colors: &[Rgb; 9], d_far: f64) -> Result<f64> {
    Ok(depth_smoothness_with_grad(depths, colors, d_far)?.0)
}

/// Loss and its gradient with respect to the nine depths.
pub fn depth_smoothness_with_grad(
    depths: &[f64; 9],
    colors: &[Rgb; 9],
    d_far: f64,
) -> Result<(f64, [f64; 9])> {
    if let Some(d) = depths.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::Contract(format!(
            "non-positive depth {d} in smoothness patch"
        )));
    }
    let inv: [f64; 9] = std::array::from_fn(|i| d_far / depths[i]);
    let mean = inv.iter().sum::<f64>() / 9.0;
    let std_inv = population_std(inv.iter().copied());
    let std_color =
        population_std(colors.iter().flat_map(|c| c.iter().copied())).max(DEPTH_LOSS_EPS);
    let loss = std_inv / std_color;
    let mut grad = [0.0; 9];
    if std_inv > 0.0 {
        for i in 0..9 {
            let d_std = (inv[i] - mean) / (9.0 * std_inv);
            grad[i] = d_std * (-d_far / (depths[i] * depths[i])) / std_color;
        }
    }
    Ok((loss, grad))
}
