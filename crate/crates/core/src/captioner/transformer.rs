//! Pre-norm transformer decoder: causal self-attention, cross-attention over
//! projected region features, GELU feed-forward, learned positions.

use std::rc::Rc;

use rand::Rng;

use super::{log_softmax_rows, StepOutputs, TeacherBatch, TeacherOutput};
use crate::error::{Error, Result};
use crate::numerics::{AttentionMask, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::planner::PAD;

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    self_qkvo: [ParamId; 4],
    ln2: (ParamId, ParamId),
    cross_qkvo: [ParamId; 4],
    ln3: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct TransformerModel {
    embed: ParamId,
    pos: ParamId,
    w_enc: ParamId,
    b_enc: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    w_out: ParamId,
    b_out: ParamId,
    pub width: usize,
    pub heads: usize,
    pub max_positions: usize,
}

pub struct SceneMemory<T> {
    mem: Tensor<T>,
}

#[derive(Clone)]
pub struct TfState<T> {
    ctx: Rc<SceneMemory<T>>,
    prefix: Vec<usize>,
}

fn layer_norm_params<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> (ParamId, ParamId) {
    (
        store.add(&format!("{name}.gain"), Tensor::filled(&[1, width], T::one())),
        store.add_zeros(&format!("{name}.bias"), &[1, width]),
    )
}

impl TransformerModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        vocab: usize,
        feat_dim: usize,
        width: usize,
        layers: usize,
        heads: usize,
        ff: usize,
        max_positions: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 || layers == 0 {
            return Err(Error::Config(format!(
                "transformer needs layers >= 1 and width {width} divisible by heads {heads}"
            )));
        }
        let embed = store.add_uniform("embed", &[vocab, width], 0.1, rng);
        let pos = store.add_uniform("pos", &[max_positions, width], 0.1, rng);
        let w_enc = store.add_matrix("enc.w", feat_dim, width, rng);
        let b_enc = store.add_zeros("enc.b", &[1, width]);
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = format!("layer{l}");
            let mut proj = |kind: &str, store: &mut ParamStore<T>| -> [ParamId; 4] {
                ["q", "k", "v", "o"].map(|m| store.add_matrix(&format!("{p}.{kind}.{m}"), width, width, rng))
            };
            let ln1 = layer_norm_params(store, &format!("{p}.ln1"), width);
            let self_qkvo = proj("self", store);
            let ln2 = layer_norm_params(store, &format!("{p}.ln2"), width);
            let cross_qkvo = proj("cross", store);
            let ln3 = layer_norm_params(store, &format!("{p}.ln3"), width);
            let ff1 = (
                store.add_matrix(&format!("{p}.ff1.w"), width, ff, rng),
                store.add_zeros(&format!("{p}.ff1.b"), &[1, ff]),
            );
            let ff2 = (
                store.add_matrix(&format!("{p}.ff2.w"), ff, width, rng),
                store.add_zeros(&format!("{p}.ff2.b"), &[1, width]),
            );
            blocks.push(Block {
                ln1,
                self_qkvo,
                ln2,
                cross_qkvo,
                ln3,
                ff1,
                ff2,
            });
        }
        Ok(TransformerModel {
            embed,
            pos,
            w_enc,
            b_enc,
            blocks,
            ln_f: layer_norm_params(store, "ln_f", width),
            // the final norm emits unit-variance rows; a tenth of the usual
            // bound keeps untrained logits near uniform
            w_out: store.add_uniform("out.w", &[width, vocab], 0.1 / (width as f64).sqrt(), rng),
            b_out: store.add_zeros("out.b", &[1, vocab]),
            width,
            heads,
            max_positions,
        })
    }

    fn multi_head<T: Real>(
        &self,
        g: &mut Graph<T>,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        mask: &AttentionMask,
    ) -> Var {
        let dh = self.width / self.heads;
        let outs: Vec<Var> = (0..self.heads)
            .map(|h| {
                let (a, b) = (h * dh, (h + 1) * dh);
                let qh = g.slice_cols(q, a, b);
                let kh = g.slice_cols(k, a, b);
                let vh = g.slice_cols(v, a, b);
                g.attention(qh, kh, vh, batch, mask)
            })
            .collect();
        if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        }
    }

    /// Decoder stack over batch-major `tokens` (`batch` rows of `len` each).
    /// Returns (final logits, layer-1 output).
    fn stack<T: Real>(&self, g: &mut Graph<T>, tokens: &[usize], len: usize, batch: usize, mem: Var) -> Result<(Var, Var)> {
        if len > self.max_positions {
            return Err(Error::Config(format!(
                "sequence length {len} exceeds {} positions",
                self.max_positions
            )));
        }
        let embed = g.param(self.embed);
        let pos = g.param(self.pos);
        let e = g.select_rows(embed, tokens);
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let p = g.select_rows(pos, &positions);
        let mut x = g.add(e, p);
        let causal = AttentionMask {
            causal: true,
            key_lens: None,
        };
        let full = AttentionMask {
            causal: false,
            key_lens: None,
        };
        let mut layer1 = x;
        for (l, b) in self.blocks.iter().enumerate() {
            let a = g.layer_norm(x, b.ln1.0, b.ln1.1);
            let q = g.linear(a, b.self_qkvo[0], None);
            let k = g.linear(a, b.self_qkvo[1], None);
            let v = g.linear(a, b.self_qkvo[2], None);
            let att = self.multi_head(g, q, k, v, batch, &causal);
            let o = g.linear(att, b.self_qkvo[3], None);
            x = g.add(x, o);

            let a = g.layer_norm(x, b.ln2.0, b.ln2.1);
            let q = g.linear(a, b.cross_qkvo[0], None);
            let k = g.linear(mem, b.cross_qkvo[1], None);
            let v = g.linear(mem, b.cross_qkvo[2], None);
            let att = self.multi_head(g, q, k, v, batch, &full);
            let o = g.linear(att, b.cross_qkvo[3], None);
            x = g.add(x, o);

            let a = g.layer_norm(x, b.ln3.0, b.ln3.1);
            let f = g.linear(a, b.ff1.0, Some(b.ff1.1));
            let f = g.gelu(f);
            let f = g.linear(f, b.ff2.0, Some(b.ff2.1));
            x = g.add(x, f);
            if l == 0 {
                layer1 = x;
            }
        }
        let y = g.layer_norm(x, self.ln_f.0, self.ln_f.1);
        let logits = g.linear(y, self.w_out, Some(self.b_out));
        Ok((logits, layer1))
    }

    fn memory<T: Real>(&self, g: &mut Graph<T>, feats: Var) -> Var {
        g.linear(feats, self.w_enc, Some(self.b_enc))
    }

    pub fn teacher_forward<T: Real>(&self, g: &mut Graph<T>, b: &TeacherBatch<T>) -> Result<TeacherOutput> {
        let n = b.seqs.len();
        let lmax = b.max_inputs();
        let mut tokens = Vec::with_capacity(n * lmax);
        let mut targets = Vec::with_capacity(n * lmax);
        for s in &b.seqs {
            for t in 0..lmax {
                let real = t + 1 < s.len();
                tokens.push(if real { s[t] } else { PAD });
                targets.push(real.then(|| s[t + 1]));
            }
        }
        let feats = g.input(b.feats.clone());
        let mem = self.memory(g, feats);
        let (logits, layer1) = self.stack(g, &tokens, lmax, n, mem)?;
        let loss = g.cross_entropy(logits, &targets);
        Ok(TeacherOutput {
            loss_sum: loss,
            n_targets: targets.iter().flatten().count(),
            layer1,
            steps: lmax,
        })
    }

    pub fn start<T: Real>(&self, store: &ParamStore<T>, feats: &Tensor<T>) -> TfState<T> {
        let mut g = Graph::new(store);
        let f = g.input(feats.clone());
        let mem = self.memory(&mut g, f);
        TfState {
            ctx: Rc::new(SceneMemory {
                mem: g.value(mem).clone(),
            }),
            prefix: Vec::new(),
        }
    }

    /// Recomputes each prefix in full; hypotheses of equal length share a batch.
    pub fn step<T: Real>(
        &self,
        store: &ParamStore<T>,
        states: &mut [TfState<T>],
        tokens: &[usize],
    ) -> Result<StepOutputs> {
        for (s, &t) in states.iter_mut().zip(tokens) {
            s.prefix.push(t);
        }
        let n = states.len();
        let len = states[0].prefix.len();
        if states.iter().any(|s| s.prefix.len() != len) {
            // ragged batch: score one state at a time
            let mut out = StepOutputs {
                logprobs: Vec::with_capacity(n),
                snapshots: Vec::with_capacity(n),
            };
            for s in states.iter() {
                let o = self.score_prefixes(store, std::slice::from_ref(s))?;
                out.logprobs.extend(o.logprobs);
                out.snapshots.extend(o.snapshots);
            }
            return Ok(out);
        }
        self.score_prefixes(store, states)
    }

    fn score_prefixes<T: Real>(&self, store: &ParamStore<T>, states: &[TfState<T>]) -> Result<StepOutputs> {
        let n = states.len();
        let len = states[0].prefix.len();
        let mut g = Graph::new(store);
        let r = states[0].ctx.mem.rows();
        let mut mem_data = Vec::with_capacity(n * r * self.width);
        for s in states {
            mem_data.extend_from_slice(s.ctx.mem.data());
        }
        let mem = g.input(Tensor::matrix(n * r, self.width, mem_data));
        let tokens: Vec<usize> = states.iter().flat_map(|s| s.prefix.iter().copied()).collect();
        let (logits, layer1) = self.stack(&mut g, &tokens, len, n, mem)?;
        let last: Vec<usize> = (0..n).map(|i| i * len + len - 1).collect();
        let lg = g.select_rows(logits, &last);
        let h1 = g.select_rows(layer1, &last);
        Ok(StepOutputs {
            logprobs: log_softmax_rows(g.value(lg)),
            snapshots: (0..n)
                .map(|i| g.value(h1).row(i).iter().map(|v| v.as_f64() as f32).collect())
                .collect(),
        })
    }
}
