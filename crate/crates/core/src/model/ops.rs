use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn c<F: Scalar>(x: f64) -> F {
    F::from(x).expect("constant representable")
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows<F: Scalar>(logits: ArrayView2<'_, F>) -> Array2<F> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(F::neg_infinity(), |m, &x| m.max(x));
        let mut sum = F::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<F: Scalar>(logits: ArrayView2<'_, F>) -> Array2<F> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(F::neg_infinity(), |m, &x| m.max(x));
        let lse = row.fold(F::zero(), |s, &x| s + (x - max).exp()).ln() + max;
        row.mapv_inplace(|x| x - lse);
    }
    out
}

pub(crate) struct NormTrace<F> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

pub(crate) fn layer_norm<F: Scalar>(
    x: &Array2<F>,
    gain: &Array2<F>,
    bias: &Array2<F>,
) -> (Array2<F>, NormTrace<F>) {
    let d = F::from(x.ncols()).unwrap();
    let eps = c::<F>(LAYER_NORM_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.fold(F::zero(), |s, &v| s + v * v) / d;
        *r = F::one() / (var + eps).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * &gain.row(0) + &bias.row(0);
    (y, NormTrace { xhat, rstd })
}

/// Returns dx and accumulates gain/bias gradients when requested.
pub(crate) fn layer_norm_backward<F: Scalar>(
    dy: &Array2<F>,
    gain: &Array2<F>,
    trace: &NormTrace<F>,
    dgain: Option<&mut Array2<F>>,
    dbias: Option<&mut Array2<F>>,
) -> Array2<F> {
    if let Some(dg) = dgain {
        let s = (dy * &trace.xhat).sum_axis(Axis(0));
        dg.row_mut(0).zip_mut_with(&s, |a, &b| *a += b);
    }
    if let Some(db) = dbias {
        let s = dy.sum_axis(Axis(0));
        db.row_mut(0).zip_mut_with(&s, |a, &b| *a += b);
    }
    let d = F::from(dy.ncols()).unwrap();
    let dxhat = dy * &gain.row(0);
    let mut dx = Array2::zeros(dy.raw_dim());
    for ((mut out, g), (xh, &rs)) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(trace.xhat.rows().into_iter().zip(trace.rstd.iter()))
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = rs * (gi - mean_g - xi * mean_gx));
    }
    dx
}

const GELU_K: f64 = 0.044_715;

fn gelu_inner<F: Scalar>(x: F) -> F {
    let s = c::<F>((2.0 / std::f64::consts::PI).sqrt());
    s * (x + c::<F>(GELU_K) * x * x * x)
}

/// tanh approximation of GELU.
pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    c::<F>(0.5) * x * (F::one() + gelu_inner(x).tanh())
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let s = c::<F>((2.0 / std::f64::consts::PI).sqrt());
    let t = gelu_inner(x).tanh();
    let half = c::<F>(0.5);
    half * (F::one() + t)
        + half * x * (F::one() - t * t) * s * (F::one() + c::<F>(3.0 * GELU_K) * x * x)
}
