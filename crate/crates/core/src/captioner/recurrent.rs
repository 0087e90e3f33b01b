//! Two-layer recurrent decoder. Layer 1 reads `[embedding ‖ mean region]`;
//! additive attention over regions is queried by the layer-1 state; layer 2
//! reads `[layer-1 state ‖ context]` and feeds the output projection.

use std::rc::Rc;

use rand::Rng;

use super::{log_softmax_rows, StepOutputs, TeacherBatch, TeacherOutput};
use crate::error::Result;
use crate::numerics::{
    attend_projected, lstm_cell, AttentionParams, Graph, LstmParams, ParamId, ParamStore, Real,
    Tensor, Var,
};
use crate::planner::PAD;

#[derive(Clone, Debug)]
pub struct RecurrentModel {
    pub embed: ParamId,
    pub w_enc: ParamId,
    pub b_enc: ParamId,
    pub lstm1: LstmParams,
    pub att: AttentionParams,
    pub lstm2: LstmParams,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub hidden: usize,
}

/// Per-scene encodings, computed once and shared by all hypotheses.
pub struct SceneContext<T> {
    enc: Tensor<T>,
    keys: Tensor<T>,
    mean: Vec<T>,
    regions: usize,
}

#[derive(Clone)]
pub struct RecState<T> {
    ctx: Rc<SceneContext<T>>,
    h1: Vec<T>,
    c1: Vec<T>,
    h2: Vec<T>,
    c2: Vec<T>,
}

fn stack<T: Real>(rows: impl Iterator<Item = Vec<T>>, width: usize) -> Tensor<T> {
    let data: Vec<T> = rows.flatten().collect();
    let n = data.len() / width.max(1);
    Tensor::matrix(n, width, data)
}

impl RecurrentModel {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        vocab: usize,
        feat_dim: usize,
        embed: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        RecurrentModel {
            embed: store.add_uniform("embed", &[vocab, embed], 0.1, rng),
            w_enc: store.add_matrix("enc.w", feat_dim, hidden, rng),
            b_enc: store.add_zeros("enc.b", &[1, hidden]),
            lstm1: LstmParams::new(store, "lstm1", embed + hidden, hidden, rng),
            att: AttentionParams::new(store, "att", hidden, hidden, hidden, rng),
            lstm2: LstmParams::new(store, "lstm2", 2 * hidden, hidden, rng),
            w_out: store.add_matrix("out.w", hidden, vocab, rng),
            b_out: store.add_zeros("out.b", &[1, vocab]),
            hidden,
        }
    }

    fn encode<T: Real>(&self, g: &mut Graph<T>, feats: Var, batch: usize, regions: usize) -> (Var, Var, Var) {
        let enc = g.linear(feats, self.w_enc, Some(self.b_enc));
        let enc = g.tanh(enc);
        let uniform = g.input(Tensor::filled(&[batch, regions], T::one() / T::lit(regions as f64)));
        let mean = g.group_weighted_sum(uniform, enc);
        (enc, mean, uniform)
    }

    pub fn teacher_forward<T: Real>(&self, g: &mut Graph<T>, b: &TeacherBatch<T>) -> Result<TeacherOutput> {
        let n = b.seqs.len();
        let r = b.regions;
        let h = self.hidden;
        let feats = g.input(b.feats.clone());
        let (enc, mean, _) = self.encode(g, feats, n, r);
        let keys = self.att.project_keys(g, enc)?;
        let embed = g.param(self.embed);
        let zeros = Tensor::zeros(&[n, h]);
        let (mut h1, mut c1) = (g.input(zeros.clone()), g.input(zeros.clone()));
        let (mut h2, mut c2) = (g.input(zeros.clone()), g.input(zeros));
        let lmax = b.max_inputs();
        let mut h1s = Vec::with_capacity(lmax);
        let mut h2s = Vec::with_capacity(lmax);
        for t in 0..lmax {
            let col: Vec<usize> = b
                .seqs
                .iter()
                .map(|s| if t + 1 < s.len() { s[t] } else { PAD })
                .collect();
            let x = g.select_rows(embed, &col);
            let in1 = g.concat_cols(&[x, mean]);
            (h1, c1) = lstm_cell(g, in1, h1, c1, &self.lstm1)?;
            let (ctx, _) = attend_projected(g, h1, keys, enc, r, &self.att)?;
            let in2 = g.concat_cols(&[h1, ctx]);
            (h2, c2) = lstm_cell(g, in2, h2, c2, &self.lstm2)?;
            h1s.push(h1);
            h2s.push(h2);
        }
        let all_h2 = g.concat_rows(&h2s);
        let logits = g.linear(all_h2, self.w_out, Some(self.b_out));
        // time-major targets
        let mut targets = Vec::with_capacity(lmax * n);
        for t in 0..lmax {
            for s in &b.seqs {
                targets.push((t + 1 < s.len()).then(|| s[t + 1]));
            }
        }
        let loss = g.cross_entropy(logits, &targets);
        let all_h1 = g.concat_rows(&h1s);
        let perm: Vec<usize> = (0..n).flat_map(|bi| (0..lmax).map(move |t| t * n + bi)).collect();
        let layer1 = g.select_rows(all_h1, &perm);
        Ok(TeacherOutput {
            loss_sum: loss,
            n_targets: targets.iter().flatten().count(),
            layer1,
            steps: lmax,
        })
    }

    pub fn start<T: Real>(&self, store: &ParamStore<T>, feats: &Tensor<T>) -> Result<RecState<T>> {
        let r = feats.rows();
        let mut g = Graph::new(store);
        let f = g.input(feats.clone());
        let (enc, mean, _) = self.encode(&mut g, f, 1, r);
        let keys = self.att.project_keys(&mut g, enc)?;
        let zeros = vec![T::zero(); self.hidden];
        Ok(RecState {
            ctx: Rc::new(SceneContext {
                enc: g.value(enc).clone(),
                keys: g.value(keys).clone(),
                mean: g.value(mean).data().to_vec(),
                regions: r,
            }),
            h1: zeros.clone(),
            c1: zeros.clone(),
            h2: zeros.clone(),
            c2: zeros,
        })
    }

    pub fn step<T: Real>(
        &self,
        store: &ParamStore<T>,
        states: &mut [RecState<T>],
        tokens: &[usize],
    ) -> Result<StepOutputs> {
        let n = states.len();
        let h = self.hidden;
        let r = states[0].ctx.regions;
        let mut g = Graph::new(store);
        let enc = g.input(stack(states.iter().map(|s| s.ctx.enc.data().to_vec()), h));
        let keys_w = states[0].ctx.keys.cols();
        let keys = g.input(stack(states.iter().map(|s| s.ctx.keys.data().to_vec()), keys_w));
        let mean = g.input(stack(states.iter().map(|s| s.ctx.mean.clone()), h));
        let h1 = g.input(stack(states.iter().map(|s| s.h1.clone()), h));
        let c1 = g.input(stack(states.iter().map(|s| s.c1.clone()), h));
        let h2 = g.input(stack(states.iter().map(|s| s.h2.clone()), h));
        let c2 = g.input(stack(states.iter().map(|s| s.c2.clone()), h));
        let embed = g.param(self.embed);
        let x = g.select_rows(embed, tokens);
        let in1 = g.concat_cols(&[x, mean]);
        let (h1, c1) = lstm_cell(&mut g, in1, h1, c1, &self.lstm1)?;
        let (ctx, _) = attend_projected(&mut g, h1, keys, enc, r, &self.att)?;
        let in2 = g.concat_cols(&[h1, ctx]);
        let (h2, c2) = lstm_cell(&mut g, in2, h2, c2, &self.lstm2)?;
        let logits = g.linear(h2, self.w_out, Some(self.b_out));
        for (i, s) in states.iter_mut().enumerate() {
            s.h1 = g.value(h1).row(i).to_vec();
            s.c1 = g.value(c1).row(i).to_vec();
            s.h2 = g.value(h2).row(i).to_vec();
            s.c2 = g.value(c2).row(i).to_vec();
        }
        debug_assert_eq!(g.value(logits).rows(), n);
        Ok(StepOutputs {
            logprobs: log_softmax_rows(g.value(logits)),
            snapshots: (0..n)
                .map(|i| g.value(h1).row(i).iter().map(|v| v.as_f64() as f32).collect())
                .collect(),
        })
    }
}
