//! Waveform loss on per-column standardized signals.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

/// Added to the mean square before the square root.
pub const STANDARDIZE_EPS: f64 = 1e-12;

/// Mean over all entries of the squared difference.
pub fn mse_loss(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::dims("mse operands", gt.dim(), pred.dim()));
    }
    let n = pred.len().max(1) as f64;
    Ok(Zip::from(&pred).and(&gt).fold(0.0, |acc, a, b| acc + (a - b) * (a - b)) / n)
}

/// Zero mean, unit RMS per column. Returns the standardized columns and the
/// scale of each column.
pub fn standardize_columns(y: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let s = y.nrows() as f64;
    let mean = y.sum_axis(Axis(0)) / s;
    let centered = &y - &mean.view().insert_axis(Axis(0));
    let sigma = centered.map_axis(Axis(0), |c| {
        (c.iter().map(|v| v * v).sum::<f64>() / s + STANDARDIZE_EPS).sqrt()
    });
    let out = &centered / &sigma.view().insert_axis(Axis(0));
    (out, sigma)
}

/// Reverse pass of [`standardize_columns`].
pub fn standardize_vjp(
    standardized: ArrayView2<'_, f64>,
    sigma: &Array1<f64>,
    upstream: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let s = standardized.nrows() as f64;
    let mut out = Array2::zeros(upstream.raw_dim());
    for (k, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let y = standardized.column(k);
        let g = upstream.column(k);
        let yg = y.dot(&g) / s;
        let gc: Array1<f64> = (&g - &(&y * yg)) / sigma[k];
        let m = gc.sum() / s;
        col.assign(&(gc - m));
    }
    out
}

/// MSE between the standardized prediction and a standardized target, with
/// its gradient with respect to the raw prediction.
pub fn standardized_mse(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::dims("prediction/target", target.dim(), pred.dim()));
    }
    let (std_pred, sigma) = standardize_columns(pred);
    let mse = mse_loss(std_pred.view(), target)?;
    let scale = 2.0 / pred.len() as f64;
    let g = (&std_pred - &target) * scale;
    Ok((mse, standardize_vjp(std_pred.view(), &sigma, g.view())))
}
