//! One causal self-attention block with learned positions and a ReLU
//! feed-forward layer, both wrapped in residual connections.

use ndarray::{s, Array2, Axis};

use super::ATTENTION_HEADS;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub pos: Array2<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub ffn_w1: Array2<f64>,
    pub ffn_b1: Array2<f64>,
    pub ffn_w2: Array2<f64>,
    pub ffn_b2: Array2<f64>,
}

impl AttentionWeights {
    pub fn zeros(dim: usize, max_len: usize, ffn_dim: usize) -> Self {
        assert!(dim % ATTENTION_HEADS == 0, "dim must divide evenly across heads");
        Self {
            pos: Array2::zeros((max_len, dim)),
            w_q: Array2::zeros((dim, dim)),
            w_k: Array2::zeros((dim, dim)),
            w_v: Array2::zeros((dim, dim)),
            w_o: Array2::zeros((dim, dim)),
            ffn_w1: Array2::zeros((dim, ffn_dim)),
            ffn_b1: Array2::zeros((1, ffn_dim)),
            ffn_w2: Array2::zeros((ffn_dim, dim)),
            ffn_b2: Array2::zeros((1, dim)),
        }
    }

    pub(super) fn tensors(&self) -> Vec<(&'static str, &Array2<f64>)> {
        vec![
            ("attn.pos", &self.pos),
            ("attn.w_q", &self.w_q),
            ("attn.w_k", &self.w_k),
            ("attn.w_v", &self.w_v),
            ("attn.w_o", &self.w_o),
            ("attn.ffn_w1", &self.ffn_w1),
            ("attn.ffn_b1", &self.ffn_b1),
            ("attn.ffn_w2", &self.ffn_w2),
            ("attn.ffn_b2", &self.ffn_b2),
        ]
    }

    pub(super) fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Array2<f64>)> {
        vec![
            ("attn.pos", &mut self.pos),
            ("attn.w_q", &mut self.w_q),
            ("attn.w_k", &mut self.w_k),
            ("attn.w_v", &mut self.w_v),
            ("attn.w_o", &mut self.w_o),
            ("attn.ffn_w1", &mut self.ffn_w1),
            ("attn.ffn_b1", &mut self.ffn_b1),
            ("attn.ffn_w2", &mut self.ffn_w2),
            ("attn.ffn_b2", &mut self.ffn_b2),
        ]
    }
}

#[derive(Debug, Clone)]
pub(super) struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights per head, each T x T (lower triangular).
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    h1: Array2<f64>,
    u: Array2<f64>,
    relu: Array2<f64>,
}

pub(super) fn forward(
    w: &AttentionWeights,
    emb: &Array2<f64>,
    items: &[usize],
) -> (Array2<f64>, AttentionCache) {
    let t_len = items.len();
    let d = emb.ncols();
    let dh = d / ATTENTION_HEADS;
    let scale = 1.0 / (dh as f64).sqrt();

    let x = emb.select(Axis(0), items) + &w.pos.slice(s![0..t_len, ..]);
    let q = x.dot(&w.w_q);
    let k = x.dot(&w.w_k);
    let v = x.dot(&w.w_v);
    let mut o = Array2::zeros((t_len, d));
    let mut attn = Vec::with_capacity(ATTENTION_HEADS);
    for head in 0..ATTENTION_HEADS {
        let cols = s![.., head * dh..(head + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        for i in 0..t_len {
            let mut row = scores.row_mut(i);
            let max = (0..=i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..t_len {
                if j <= i {
                    let e = ((row[j] - max) * scale).exp();
                    row[j] = e;
                    sum += e;
                } else {
                    row[j] = 0.0;
                }
            }
            row.mapv_inplace(|e| e / sum);
        }
        o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        attn.push(scores);
    }
    let h1 = &x + &o.dot(&w.w_o);
    let u = h1.dot(&w.ffn_w1) + &w.ffn_b1;
    let relu = u.mapv(|a| a.max(0.0));
    let h2 = &h1 + &(relu.dot(&w.ffn_w2) + &w.ffn_b2);
    (h2, AttentionCache { x, q, k, v, attn, o, h1, u, relu })
}

pub(super) fn backward(
    w: &AttentionWeights,
    c: &AttentionCache,
    d_states: &Array2<f64>,
    g: &mut AttentionWeights,
    g_emb: &mut Array2<f64>,
    items: &[usize],
) {
    let t_len = items.len();
    let d = c.x.ncols();
    let dh = d / ATTENTION_HEADS;
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward residual
    let d_f = d_states;
    g.ffn_w2 += &c.relu.t().dot(d_f);
    g.ffn_b2 += &d_f.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut d_u = d_f.dot(&w.ffn_w2.t());
    ndarray::Zip::from(&mut d_u).and(&c.u).for_each(|du, &u| {
        if u <= 0.0 {
            *du = 0.0;
        }
    });
    g.ffn_w1 += &c.h1.t().dot(&d_u);
    g.ffn_b1 += &d_u.sum_axis(Axis(0)).insert_axis(Axis(0));
    let d_h1 = d_states + &d_u.dot(&w.ffn_w1.t());

    // attention residual
    g.w_o += &c.o.t().dot(&d_h1);
    let d_o = d_h1.dot(&w.w_o.t());
    let mut d_q = Array2::<f64>::zeros((t_len, d));
    let mut d_k = Array2::<f64>::zeros((t_len, d));
    let mut d_v = Array2::<f64>::zeros((t_len, d));
    for head in 0..ATTENTION_HEADS {
        let cols = s![.., head * dh..(head + 1) * dh];
        let a = &c.attn[head];
        let d_oh = d_o.slice(cols);
        let d_a = d_oh.dot(&c.v.slice(cols).t());
        d_v.slice_mut(cols).assign(&a.t().dot(&d_oh));
        // softmax reverse: dS = A * (dA - rowsum(dA * A))
        let mut d_s = Array2::<f64>::zeros((t_len, t_len));
        for i in 0..t_len {
            let dot: f64 = (0..=i).map(|j| d_a[[i, j]] * a[[i, j]]).sum();
            for j in 0..=i {
                d_s[[i, j]] = a[[i, j]] * (d_a[[i, j]] - dot) * scale;
            }
        }
        d_q.slice_mut(cols).assign(&d_s.dot(&c.k.slice(cols)));
        d_k.slice_mut(cols).assign(&d_s.t().dot(&c.q.slice(cols)));
    }
    g.w_q += &c.x.t().dot(&d_q);
    g.w_k += &c.x.t().dot(&d_k);
    g.w_v += &c.x.t().dot(&d_v);
    let d_x = d_h1 + d_q.dot(&w.w_q.t()) + d_k.dot(&w.w_k.t()) + d_v.dot(&w.w_v.t());

    let mut d_pos = g.pos.slice_mut(s![0..t_len, ..]);
    d_pos += &d_x;
    for (t, &item) in items.iter().enumerate() {
        let mut row = g_emb.slice_mut(s![item, ..]);
        row += &d_x.row(t);
    }
}
