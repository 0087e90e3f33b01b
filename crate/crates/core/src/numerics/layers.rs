//! Building blocks shared by the captioner and ranker: a gated recurrent cell,
//! additive attention over regions, and a standalone softmax cross-entropy.

use rand::Rng;

use super::graph::{Graph, Var};
use super::optim::{ParamId, ParamStore};
use super::tensor::Real;
use crate::error::{Error, Result};

/// Weights of one LSTM cell; gates are packed `[input, forget, cell, output]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

impl LstmParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut impl Rng,
    ) -> Self {
        LstmParams {
            w_x: store.add_matrix(&format!("{prefix}.w_x"), d_in, 4 * d_h, rng),
            w_h: store.add_matrix(&format!("{prefix}.w_h"), d_h, 4 * d_h, rng),
            b: store.add_zeros(&format!("{prefix}.b"), &[1, 4 * d_h]),
            d_in,
            d_h,
        }
    }
}

fn check_cols<T: Real>(g: &Graph<T>, v: Var, want: usize, what: &str) -> Result<()> {
    let got = g.value(v).cols();
    if got != want {
        return Err(Error::Shape(format!("{what}: expected width {want}, got {got}")));
    }
    Ok(())
}

/// One step of a standard LSTM on a batch of rows. Returns `(h', c')`.
pub fn lstm_cell<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    h: Var,
    c: Var,
    p: &LstmParams,
) -> Result<(Var, Var)> {
    check_cols(g, x, p.d_in, "lstm input")?;
    check_cols(g, h, p.d_h, "lstm hidden state")?;
    check_cols(g, c, p.d_h, "lstm cell state")?;
    let rows = g.value(x).rows();
    if g.value(h).rows() != rows || g.value(c).rows() != rows {
        return Err(Error::Shape("lstm batch sizes disagree".into()));
    }
    let d = p.d_h;
    let wx = g.param(p.w_x);
    let wh = g.param(p.w_h);
    let b = g.param(p.b);
    let zx = g.matmul(x, wx);
    let zh = g.matmul(h, wh);
    let z = g.add(zx, zh);
    let z = g.add_row(z, b);
    let zi = g.slice_cols(z, 0, d);
    let zf = g.slice_cols(z, d, 2 * d);
    let zg = g.slice_cols(z, 2 * d, 3 * d);
    let zo = g.slice_cols(z, 3 * d, 4 * d);
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, c);
    let write = g.mul(i, cand);
    let c_new = g.add(keep, write);
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc);
    Ok((h_new, c_new))
}

/// Additive (MLP) attention: `score_r = v . tanh(W_q q + W_k k_r)`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub v: ParamId,
    pub d_q: usize,
    pub d_k: usize,
    pub d_att: usize,
}

impl AttentionParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_q: usize,
        d_k: usize,
        d_att: usize,
        rng: &mut impl Rng,
    ) -> Self {
        AttentionParams {
            w_q: store.add_matrix(&format!("{prefix}.w_q"), d_q, d_att, rng),
            w_k: store.add_matrix(&format!("{prefix}.w_k"), d_k, d_att, rng),
            v: store.add_matrix(&format!("{prefix}.v"), d_att, 1, rng),
            d_q,
            d_k,
            d_att,
        }
    }

    /// Project keys once per batch; `keys` is `[B * R, d_k]`.
    pub fn project_keys<T: Real>(&self, g: &mut Graph<T>, keys: Var) -> Result<Var> {
        check_cols(g, keys, self.d_k, "attention keys")?;
        let wk = g.param(self.w_k);
        Ok(g.matmul(keys, wk))
    }
}

/// Attend from `query` (`[B, d_q]`) over `regions` rows per batch item.
/// `projected_keys` comes from [`AttentionParams::project_keys`]; `values` is
/// `[B * R, d_v]`. Returns `(context [B, d_v], weights [B, R])`.
pub fn attend_projected<T: Real>(
    g: &mut Graph<T>,
    query: Var,
    projected_keys: Var,
    values: Var,
    regions: usize,
    p: &AttentionParams,
) -> Result<(Var, Var)> {
    if regions == 0 {
        return Err(Error::EmptyAttention);
    }
    check_cols(g, query, p.d_q, "attention query")?;
    let batch = g.value(query).rows();
    if g.value(projected_keys).rows() != batch * regions || g.value(values).rows() != batch * regions
    {
        return Err(Error::Shape(format!(
            "attention expects {} key/value rows",
            batch * regions
        )));
    }
    let wq = g.param(p.w_q);
    let qp = g.matmul(query, wq);
    let s = g.group_add(projected_keys, qp, regions);
    let s = g.tanh(s);
    let v = g.param(p.v);
    let e = g.matmul(s, v);
    let e = g.reshape(e, batch, regions);
    let w = g.softmax_rows(e);
    let ctx = g.group_weighted_sum(w, values);
    Ok((ctx, w))
}

/// Convenience wrapper projecting keys and attending in one call.
pub fn attention<T: Real>(
    g: &mut Graph<T>,
    query: Var,
    keys: Var,
    values: Var,
    regions: usize,
    p: &AttentionParams,
) -> Result<(Var, Var)> {
    if regions == 0 {
        return Err(Error::EmptyAttention);
    }
    let pk = p.project_keys(g, keys)?;
    attend_projected(g, query, pk, values, regions, p)
}

/// `-log softmax(logits)[target]` and its gradient `softmax - onehot(target)`.
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::Shape(format!(
            "softmax over {} logits",
            logits.len()
        )));
    }
    if target >= logits.len() {
        return Err(Error::Index {
            index: target,
            size: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + max - logits[target];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_zero_state_gives_zero_hidden() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LstmParams::new(&mut store, "l", 3, 4, &mut rng);
        for id in [p.w_x, p.w_h, p.b] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]));
        let h = g.input(Tensor::zeros(&[1, 4]));
        let c = g.input(Tensor::zeros(&[1, 4]));
        let (h2, c2) = lstm_cell(&mut g, x, h, c, &p).unwrap();
        assert!(g.value(h2).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_preserve_cell() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LstmParams::new(&mut store, "l", 2, 3, &mut rng);
        {
            let b = store.value_mut(p.b).data_mut();
            b[0..3].fill(-10.0); // input gate shut
            b[3..6].fill(10.0); // forget gate open
        }
        for id in [p.w_x, p.w_h] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::matrix(1, 2, vec![0.5, -0.5]));
        let h = g.input(Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]));
        let c0 = vec![0.7, -0.4, 1.3];
        let c = g.input(Tensor::matrix(1, 3, c0.clone()));
        let (_, c2) = lstm_cell(&mut g, x, h, c, &p).unwrap();
        for (a, b) in g.value(c2).data().iter().zip(&c0) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn lstm_rejects_bad_shapes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = LstmParams::new(&mut store, "l", 2, 3, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[1, 5]));
        let h = g.input(Tensor::zeros(&[1, 3]));
        let c = g.input(Tensor::zeros(&[1, 3]));
        assert!(matches!(lstm_cell(&mut g, x, h, c, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn attention_identical_keys_uniform_and_single_region() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AttentionParams::new(&mut store, "a", 2, 3, 4, &mut rng);
        let mut g = Graph::new(&store);
        let q = g.input(Tensor::matrix(1, 2, vec![0.4, -0.2]));
        let keys = g.input(Tensor::matrix(4, 3, [0.1, 0.2, 0.3].repeat(4)));
        let vals = g.input(Tensor::matrix(4, 2, vec![1., 2., 3., 4., 5., 6., 7., 8.]));
        let (ctx, w) = attention(&mut g, q, keys, vals, 4, &p).unwrap();
        for &wi in g.value(w).data() {
            assert!((wi - 0.25).abs() < 1e-12);
        }
        assert!((g.value(ctx).data()[0] - 4.0).abs() < 1e-12);

        let k1 = g.input(Tensor::matrix(1, 3, vec![1.0, -1.0, 0.5]));
        let v1 = g.input(Tensor::matrix(1, 2, vec![9.0, -3.0]));
        let (ctx, w) = attention(&mut g, q, k1, v1, 1, &p).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(ctx).data(), &[9.0, -3.0]);
        assert!(matches!(
            attention(&mut g, q, k1, v1, 0, &p),
            Err(Error::EmptyAttention)
        ));
    }

    #[test]
    fn softmax_xent_cases() {
        let (loss, grad) = softmax_xent(&[0.0; 10], 3).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
        let (_, grad) = softmax_xent(&[0.0, 0.0], 0).unwrap();
        assert!((grad[0] + 0.5).abs() < 1e-12 && (grad[1] - 0.5).abs() < 1e-12);
        assert!(matches!(
            softmax_xent(&[1.0, 2.0], 2),
            Err(Error::Index { .. })
        ));
        let (_, grad) = softmax_xent(&[3.0, -40.0, 7.5, 0.1], 1).unwrap();
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
    }
}
