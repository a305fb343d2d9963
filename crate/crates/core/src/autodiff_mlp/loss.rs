use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pn_core::{flat_size, PnOperators};
use crate::scalar::Real;

use super::network::MlpParams;

/// One training state with the spatial derivatives of its top three moment blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample<T> {
    pub u: Vec<T>,
    pub dx_prev: Vec<T>,
    pub dy_prev: Vec<T>,
    pub dx_cur: Vec<T>,
    pub dy_cur: Vec<T>,
    pub dx_next: Vec<T>,
    pub dy_next: Vec<T>,
}

impl<T: Real> TrainingSample<T> {
    pub fn zeros(order: usize) -> Self {
        Self {
            u: vec![T::zero(); flat_size(order)],
            dx_prev: vec![T::zero(); order],
            dy_prev: vec![T::zero(); order],
            dx_cur: vec![T::zero(); order + 1],
            dy_cur: vec![T::zero(); order + 1],
            dx_next: vec![T::zero(); order + 2],
            dy_next: vec![T::zero(); order + 2],
        }
    }

    fn fields(&self) -> [&Vec<T>; 7] {
        [
            &self.u,
            &self.dx_prev,
            &self.dy_prev,
            &self.dx_cur,
            &self.dy_cur,
            &self.dx_next,
            &self.dy_next,
        ]
    }

    pub fn validate(&self, order: usize) -> Result<()> {
        let expected = SampleSet::<T>::field_widths(order);
        for ((name, field), want) in FIELD_NAMES.iter().zip(self.fields()).zip(expected) {
            if field.len() != want {
                return Err(Error::DimensionMismatch(format!(
                    "sample field {name} has length {}, expected {want}",
                    field.len()
                )));
            }
            if field.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidValue(format!(
                    "non-finite entry in sample field {name}"
                )));
            }
        }
        Ok(())
    }
}

pub const FIELD_NAMES: [&str; 7] = ["u", "dx_prev", "dy_prev", "dx_cur", "dy_cur", "dx_next", "dy_next"];

/// Samples stored field by field, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet<T> {
    pub order: usize,
    pub u: Array2<T>,
    pub dx_prev: Array2<T>,
    pub dy_prev: Array2<T>,
    pub dx_cur: Array2<T>,
    pub dy_cur: Array2<T>,
    pub dx_next: Array2<T>,
    pub dy_next: Array2<T>,
}

impl<T: Real> SampleSet<T> {
    pub fn field_widths(order: usize) -> [usize; 7] {
        [
            flat_size(order),
            order,
            order,
            order + 1,
            order + 1,
            order + 2,
            order + 2,
        ]
    }

    pub fn with_len(order: usize, len: usize) -> Self {
        let [w0, w1, w2, w3, w4, w5, w6] = Self::field_widths(order);
        Self {
            order,
            u: Array2::zeros((len, w0)),
            dx_prev: Array2::zeros((len, w1)),
            dy_prev: Array2::zeros((len, w2)),
            dx_cur: Array2::zeros((len, w3)),
            dy_cur: Array2::zeros((len, w4)),
            dx_next: Array2::zeros((len, w5)),
            dy_next: Array2::zeros((len, w6)),
        }
    }

    pub fn from_samples(order: usize, samples: &[TrainingSample<T>]) -> Result<Self> {
        let mut set = Self::with_len(order, samples.len());
        for (i, sample) in samples.iter().enumerate() {
            sample.validate(order)?;
            for (field, values) in set.fields_mut().into_iter().zip(sample.fields()) {
                field
                    .row_mut(i)
                    .iter_mut()
                    .zip(values)
                    .for_each(|(d, &v)| *d = v);
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fields(&self) -> [&Array2<T>; 7] {
        [
            &self.u,
            &self.dx_prev,
            &self.dy_prev,
            &self.dx_cur,
            &self.dy_cur,
            &self.dx_next,
            &self.dy_next,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Array2<T>; 7] {
        [
            &mut self.u,
            &mut self.dx_prev,
            &mut self.dy_prev,
            &mut self.dx_cur,
            &mut self.dy_cur,
            &mut self.dx_next,
            &mut self.dy_next,
        ]
    }

    pub fn sample(&self, i: usize) -> TrainingSample<T> {
        let f = self.fields().map(|a| a.row(i).to_vec());
        let [u, dx_prev, dy_prev, dx_cur, dy_cur, dx_next, dy_next] = f;
        TrainingSample {
            u,
            dx_prev,
            dy_prev,
            dx_cur,
            dy_cur,
            dx_next,
            dy_next,
        }
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let [u, dx_prev, dy_prev, dx_cur, dy_cur, dx_next, dy_next] =
            self.fields().map(|a| a.select(Axis(0), indices));
        Self {
            order: self.order,
            u,
            dx_prev,
            dy_prev,
            dx_cur,
            dy_cur,
            dx_next,
            dy_next,
        }
    }

    /// Contiguous rows `start..end`, without copying.
    fn rows(&self, start: usize, end: usize) -> [ArrayView2<'_, T>; 7] {
        self.fields().map(|a| a.slice(s![start..end, ..]))
    }

    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let order = parts
            .first()
            .map(|p| p.order)
            .ok_or_else(|| Error::DimensionMismatch("concatenating zero sample sets".into()))?;
        if parts.iter().any(|p| p.order != order) {
            return Err(Error::DimensionMismatch("sample sets of different orders".into()));
        }
        let mut out = Self::with_len(order, 0);
        for (k, field) in out.fields_mut().into_iter().enumerate() {
            let views: Vec<_> = parts.iter().map(|p| p.fields()[k].view()).collect();
            *field = ndarray::concatenate(Axis(0), &views)
                .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        }
        Ok(out)
    }
}

/// The fixed operator blocks that enter the loss.
#[derive(Debug, Clone)]
pub struct LossOperators<T> {
    pub order: usize,
    pub epsilon: T,
    /// `A_{N−1}`, `(N+1) × N`.
    a_prev: Array2<T>,
    b_prev: Array2<T>,
    /// `A_Nᵀ`, `(N+1) × (N+2)`.
    a_next_t: Array2<T>,
    b_next_t: Array2<T>,
}

impl<T: Real> LossOperators<T> {
    pub fn new(ops: &PnOperators<T>, epsilon: T) -> Result<Self> {
        let n = ops.order();
        if !(epsilon > T::zero()) {
            return Err(Error::InvalidValue(format!(
                "epsilon must be positive, got {}",
                epsilon.as_f64()
            )));
        }
        Ok(Self {
            order: n,
            epsilon,
            a_prev: ops.a_block(n - 1).to_owned(),
            b_prev: ops.b_block(n - 1).to_owned(),
            a_next_t: ops.a_next().t().to_owned(),
            b_next_t: ops.b_next().t().to_owned(),
        })
    }
}

/// Per-sample loss terms and, optionally, the gradient with respect to the
/// three head outputs. Returns the batch-summed squared residual.
fn residual_terms<T: Real>(
    lops: &LossOperators<T>,
    outputs: &[Array2<T>; 3],
    batch: [ArrayView2<'_, T>; 7],
    scale: T,
    mut d_outputs: Option<&mut [Array2<T>; 3]>,
) -> T {
    let n = lops.order;
    let n1 = n + 1;
    let [_, dxp, dyp, dxc, dyc, dxn, dyn_] = batch;
    let half = T::lit(0.5);
    let two = T::lit(2.0);

    let mut l = vec![T::zero(); n1 * n1];
    let mut h = vec![T::zero(); n1 * n1];
    let mut mx = vec![T::zero(); n1 * n1];
    let mut my = vec![T::zero(); n1 * n1];
    let mut a = vec![T::zero(); n1];
    let mut v = vec![T::zero(); n1];
    let mut r = vec![T::zero(); n1];
    let mut g = vec![T::zero(); n1];
    let mut dv = vec![T::zero(); n1];
    let mut dh_sym = vec![T::zero(); n1 * n1];

    let mut total = T::zero();
    for s in 0..dxp.nrows() {
        let lp = outputs[0].row(s);
        let lx = outputs[1].row(s);
        let ly = outputs[2].row(s);
        let mut k = 0;
        for i in 0..n1 {
            for j in 0..n1 {
                l[i * n1 + j] = if j <= i {
                    k += 1;
                    lp[k - 1]
                } else {
                    T::zero()
                };
            }
        }
        for i in 0..n1 {
            for j in 0..=i {
                let mut acc = T::zero();
                for q in 0..=j {
                    acc += l[i * n1 + q] * l[j * n1 + q];
                }
                if i == j {
                    acc += lops.epsilon;
                }
                h[i * n1 + j] = acc;
                h[j * n1 + i] = acc;
            }
            for j in 0..n1 {
                mx[i * n1 + j] = (lx[i * n1 + j] + lx[j * n1 + i]) * half;
                my[i * n1 + j] = (ly[i * n1 + j] + ly[j * n1 + i]) * half;
            }
        }

        let (xp, yp, xc, yc, xn, yn) = (dxp.row(s), dyp.row(s), dxc.row(s), dyc.row(s), dxn.row(s), dyn_.row(s));
        for i in 0..n1 {
            let mut ai = T::zero();
            for j in 0..n {
                ai += lops.a_prev[[i, j]] * xp[j] + lops.b_prev[[i, j]] * yp[j];
            }
            a[i] = ai;
            let mut vi = ai;
            for j in 0..n1 {
                vi += mx[i * n1 + j] * xc[j] + my[i * n1 + j] * yc[j];
            }
            v[i] = vi;
        }
        let mut norm2 = T::zero();
        for i in 0..n1 {
            let mut ci = T::zero();
            for j in 0..n + 2 {
                ci += lops.a_next_t[[i, j]] * xn[j] + lops.b_next_t[[i, j]] * yn[j];
            }
            let mut hv = T::zero();
            for j in 0..n1 {
                hv += h[i * n1 + j] * v[j];
            }
            r[i] = hv - a[i] - ci;
            norm2 += r[i] * r[i];
        }
        total += norm2;

        let Some(d_out) = d_outputs.as_deref_mut() else {
            continue;
        };
        for i in 0..n1 {
            g[i] = two * scale * r[i];
        }
        // dv = H g; dMx = dv dx_curᵀ; dLx = (dMx + dMxᵀ)/2.
        for i in 0..n1 {
            let mut acc = T::zero();
            for j in 0..n1 {
                acc += h[i * n1 + j] * g[j];
            }
            dv[i] = acc;
        }
        let mut dlx = d_out[1].row_mut(s);
        for i in 0..n1 {
            for j in 0..n1 {
                dlx[i * n1 + j] = (dv[i] * xc[j] + dv[j] * xc[i]) * half;
            }
        }
        let mut dly = d_out[2].row_mut(s);
        for i in 0..n1 {
            for j in 0..n1 {
                dly[i * n1 + j] = (dv[i] * yc[j] + dv[j] * yc[i]) * half;
            }
        }
        // dH = g vᵀ; dL = (dH + dHᵀ) L, lower triangle only.
        for i in 0..n1 {
            for j in 0..n1 {
                dh_sym[i * n1 + j] = g[i] * v[j] + g[j] * v[i];
            }
        }
        let mut dl = d_out[0].row_mut(s);
        let mut k = 0;
        for i in 0..n1 {
            for j in 0..=i {
                let mut acc = T::zero();
                for q in j..n1 {
                    acc += dh_sym[i * n1 + q] * l[q * n1 + j];
                }
                dl[k] = acc;
                k += 1;
            }
        }
    }
    total
}

const CHUNK: usize = 4096;

fn check_batch<T: Real>(batch: &SampleSet<T>, params: &MlpParams<T>, lops: &LossOperators<T>) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::DimensionMismatch("empty batch".into()));
    }
    if batch.order != lops.order || params.shape.order != lops.order {
        return Err(Error::DimensionMismatch(format!(
            "orders differ: batch {}, network {}, operators {}",
            batch.order, params.shape.order, lops.order
        )));
    }
    Ok(())
}

fn finite_or_diverged<T: Real>(loss: T) -> Result<T> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged {
            epoch: 0,
            last_finite: None,
        })
    }
}

/// Mean over the batch of the squared residual norm.
pub fn residual_loss<T: Real>(
    batch: &SampleSet<T>,
    params: &MlpParams<T>,
    lops: &LossOperators<T>,
) -> Result<T> {
    check_batch(batch, params, lops)?;
    let mut total = T::zero();
    let mut start = 0;
    while start < batch.len() {
        let end = (start + CHUNK).min(batch.len());
        let views = batch.rows(start, end);
        let cache = params.forward_batch(views[0])?;
        total += residual_terms(lops, &cache.outputs, views, T::one(), None);
        start = end;
    }
    finite_or_diverged(total / T::from_usize_exact(batch.len()))
}

/// Loss and its exact gradient with respect to every network parameter.
pub fn loss_and_gradient<T: Real>(
    batch: &SampleSet<T>,
    params: &MlpParams<T>,
    lops: &LossOperators<T>,
) -> Result<(T, MlpParams<T>)> {
    check_batch(batch, params, lops)?;
    let views = batch.rows(0, batch.len());
    let cache = params.forward_batch(views[0])?;
    let scale = T::one() / T::from_usize_exact(batch.len());
    let mut d_outputs = cache.outputs.clone().map(|o| Array2::zeros(o.raw_dim()));
    let total = residual_terms(lops, &cache.outputs, views, scale, Some(&mut d_outputs));
    let loss = finite_or_diverged(total * scale)?;
    Ok((loss, params.backward(&cache, d_outputs)))
}

/// Gradient only; see [`loss_and_gradient`].
pub fn loss_gradient<T: Real>(
    batch: &SampleSet<T>,
    params: &MlpParams<T>,
    lops: &LossOperators<T>,
) -> Result<MlpParams<T>> {
    loss_and_gradient(batch, params, lops).map(|(_, g)| g)
}
