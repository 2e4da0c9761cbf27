//! Single-layer GRU. Gate columns are laid out as `[update | reset | candidate]`.
//!
//! z = s(x Wz + bz + h Uz + cz)
//! r = s(x Wr + br + h Ur + cr)
//! n = tanh(x Wn + bn + r * (h Un + cn))
//! h' = (1 - z) * n + z * h

use ndarray::{s, Array1, Array2, Axis};

#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub w_x: Array2<f64>,
    pub w_h: Array2<f64>,
    pub b_x: Array2<f64>,
    pub b_h: Array2<f64>,
}

impl GruWeights {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w_x: Array2::zeros((dim, 3 * dim)),
            w_h: Array2::zeros((dim, 3 * dim)),
            b_x: Array2::zeros((1, 3 * dim)),
            b_h: Array2::zeros((1, 3 * dim)),
        }
    }

    pub(super) fn tensors(&self) -> Vec<(&'static str, &Array2<f64>)> {
        vec![
            ("gru.w_x", &self.w_x),
            ("gru.w_h", &self.w_h),
            ("gru.b_x", &self.b_x),
            ("gru.b_h", &self.b_h),
        ]
    }

    pub(super) fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Array2<f64>)> {
        vec![
            ("gru.w_x", &mut self.w_x),
            ("gru.w_h", &mut self.w_h),
            ("gru.b_x", &mut self.b_x),
            ("gru.b_h", &mut self.b_h),
        ]
    }
}

#[derive(Debug, Clone)]
pub(super) struct GruCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    z: Array2<f64>,
    r: Array2<f64>,
    n: Array2<f64>,
    /// `h Un + cn`, needed for the reset-gate gradient.
    gh_n: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(super) fn forward(w: &GruWeights, emb: &Array2<f64>, items: &[usize]) -> (Array2<f64>, GruCache) {
    let d = emb.ncols();
    let t_len = items.len();
    let x = emb.select(Axis(0), items);
    let gx = x.dot(&w.w_x) + &w.b_x;
    let mut states = Array2::zeros((t_len, d));
    let mut h_prev = Array2::zeros((t_len, d));
    let mut z = Array2::zeros((t_len, d));
    let mut r = Array2::zeros((t_len, d));
    let mut n = Array2::zeros((t_len, d));
    let mut gh_n = Array2::zeros((t_len, d));
    let mut h = Array1::<f64>::zeros(d);
    for t in 0..t_len {
        let gh = h.dot(&w.w_h) + &w.b_h.row(0);
        let gx_t = gx.row(t);
        for j in 0..d {
            let zj = sigmoid(gx_t[j] + gh[j]);
            let rj = sigmoid(gx_t[d + j] + gh[d + j]);
            let nj = (gx_t[2 * d + j] + rj * gh[2 * d + j]).tanh();
            z[[t, j]] = zj;
            r[[t, j]] = rj;
            n[[t, j]] = nj;
            gh_n[[t, j]] = gh[2 * d + j];
            h_prev[[t, j]] = h[j];
        }
        for j in 0..d {
            h[j] = (1.0 - z[[t, j]]) * n[[t, j]] + z[[t, j]] * h[j];
        }
        states.row_mut(t).assign(&h);
    }
    (states, GruCache { x, h_prev, z, r, n, gh_n })
}

pub(super) fn backward(
    w: &GruWeights,
    c: &GruCache,
    d_states: &Array2<f64>,
    g: &mut GruWeights,
    g_emb: &mut Array2<f64>,
    items: &[usize],
) {
    let (t_len, d) = c.z.dim();
    let mut d_gx = Array2::<f64>::zeros((t_len, 3 * d));
    let mut d_gh = Array2::<f64>::zeros((t_len, 3 * d));
    let mut dh_next = Array1::<f64>::zeros(d);
    let w_h_t = w.w_h.t();
    for t in (0..t_len).rev() {
        let mut dh_prev = Array1::<f64>::zeros(d);
        for j in 0..d {
            let dh = d_states[[t, j]] + dh_next[j];
            let (z, r, n, hp) = (c.z[[t, j]], c.r[[t, j]], c.n[[t, j]], c.h_prev[[t, j]]);
            let dz = dh * (hp - n);
            let dn = dh * (1.0 - z);
            dh_prev[j] = dh * z;
            let da_n = dn * (1.0 - n * n);
            let dr = da_n * c.gh_n[[t, j]];
            let da_z = dz * z * (1.0 - z);
            let da_r = dr * r * (1.0 - r);
            d_gx[[t, j]] = da_z;
            d_gx[[t, d + j]] = da_r;
            d_gx[[t, 2 * d + j]] = da_n;
            d_gh[[t, j]] = da_z;
            d_gh[[t, d + j]] = da_r;
            d_gh[[t, 2 * d + j]] = da_n * r;
        }
        dh_next = dh_prev + d_gh.row(t).dot(&w_h_t);
    }
    g.w_h += &c.h_prev.t().dot(&d_gh);
    g.b_h += &d_gh.sum_axis(Axis(0)).insert_axis(Axis(0));
    g.w_x += &c.x.t().dot(&d_gx);
    g.b_x += &d_gx.sum_axis(Axis(0)).insert_axis(Axis(0));
    let d_x = d_gx.dot(&w.w_x.t());
    for (t, &item) in items.iter().enumerate() {
        let mut row = g_emb.slice_mut(s![item, ..]);
        row += &d_x.row(t);
    }
}
