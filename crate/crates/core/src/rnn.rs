//! LSTM survival model: a recurrent state over each recipient's messages and
//! a linear head with exponential link giving one hazard ratio per message.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{SeqStep, SequenceExample};
use crate::numerics::{forward_backward, init_uniform, Gradients, Graph, ModelFile, ParamStore, Tensor, Var};
use crate::survival::{c_index, SurvivalBatch};
use crate::training::{split_indices, EarlyStopping, TrainConfig, TrainReport};
use crate::virtual_time::BinScheme;

pub const MODEL_KIND: &str = "rnn_s";
pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    input_dim: usize,
    hidden: usize,
    seq_len: usize,
    scheme_hash: Option<String>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnSurvivalModel {
    params: ParamStore,
    meta: Meta,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Recurrent state of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl RnnSurvivalModel {
    /// Gates are laid out `[input, forget, candidate, output]`; the forget
    /// bias starts at one.
    pub fn init(input_dim: usize, hidden: usize, seq_len: usize, seed: u64) -> Self {
        let mut rng = TrainConfig { seed, ..Default::default() }.rng();
        let mut params = ParamStore::new();
        params.insert("w_x", init_uniform(&mut rng, input_dim, 4 * hidden, hidden));
        params.insert("w_h", init_uniform(&mut rng, hidden, 4 * hidden, hidden));
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].fill(1.0);
        params.insert("b", Tensor::matrix(1, 4 * hidden, b).expect("shape"));
        params.insert("head_w", init_uniform(&mut rng, hidden, 1, hidden));
        params.insert("head_b", Tensor::zeros(1, 1));
        Self::with_meta(params, input_dim, hidden, seq_len)
    }

    /// Every parameter zero: all hazard ratios equal one.
    pub fn zeros(input_dim: usize, hidden: usize, seq_len: usize) -> Self {
        let m = Self::init(input_dim, hidden, seq_len, 0);
        Self {
            params: m.params.zeroed(),
            meta: m.meta,
        }
    }

    pub fn from_params(params: ParamStore, seq_len: usize) -> Result<Self> {
        let w_x = params.require("w_x")?;
        let (input_dim, hidden) = (w_x.rows(), w_x.cols() / 4);
        let shapes_ok = w_x.cols() == 4 * hidden
            && params.require("w_h")?.shape() == [hidden, 4 * hidden]
            && params.require("b")?.shape() == [1, 4 * hidden]
            && params.require("head_w")?.shape() == [hidden, 1]
            && params.require("head_b")?.shape() == [1, 1];
        if !shapes_ok {
            return Err(Error::InvalidParameter("inconsistent rnn_s parameter shapes".into()));
        }
        Ok(Self::with_meta(params, input_dim, hidden, seq_len))
    }

    fn with_meta(params: ParamStore, input_dim: usize, hidden: usize, seq_len: usize) -> Self {
        Self {
            params,
            meta: Meta {
                input_dim,
                hidden,
                seq_len,
                scheme_hash: None,
                train: None,
            },
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.meta.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.meta.hidden
    }

    pub fn seq_len(&self) -> usize {
        self.meta.seq_len
    }

    pub fn scheme_hash(&self) -> Option<&str> {
        self.meta.scheme_hash.as_deref()
    }

    pub fn set_scheme(&mut self, scheme: &BinScheme) {
        self.meta.scheme_hash = Some(scheme.hash());
    }

    /// Refuses a scheme other than the one the model was trained against.
    pub fn check_scheme(&self, scheme: &BinScheme) -> Result<()> {
        match &self.meta.scheme_hash {
            Some(h) if *h != scheme.hash() => Err(Error::SchemeMismatch {
                expected: h.clone(),
                actual: scheme.hash(),
            }),
            _ => Ok(()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ModelFile::new(MODEL_KIND, serde_json::to_value(&self.meta)?, &self.params).save(path)
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        if file.model_kind != MODEL_KIND {
            return Err(Error::InvalidParameter(format!("expected an rnn_s model, got {}", file.model_kind)));
        }
        let meta: Meta = serde_json::from_value(file.meta.clone())?;
        let mut m = Self::from_params(file.params()?, meta.seq_len)?;
        if m.meta.input_dim != meta.input_dim || m.meta.hidden != meta.hidden {
            return Err(Error::InvalidParameter("rnn_s metadata disagrees with parameters".into()));
        }
        m.meta = meta;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&ModelFile::load(path)?)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.meta.input_dim {
            return Err(Error::ShapeMismatch {
                op: "rnn_forward",
                detail: format!("model input dimension {}, features {}", self.meta.input_dim, x.len()),
            });
        }
        Ok(())
    }

    pub fn initial_state(&self) -> LstmState {
        LstmState {
            h: vec![0.0; self.meta.hidden],
            c: vec![0.0; self.meta.hidden],
        }
    }

    /// One LSTM step outside the graph.
    pub fn step(&self, x: &[f64], state: &LstmState) -> Result<LstmState> {
        self.check_input(x)?;
        let hd = self.meta.hidden;
        let w_x = self.params.require("w_x")?;
        let w_h = self.params.require("w_h")?;
        let mut z = self.params.require("b")?.values().to_vec();
        for (p, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (zj, w) in z.iter_mut().zip(w_x.row(p)) {
                    *zj += xi * w;
                }
            }
        }
        for (p, &hi) in state.h.iter().enumerate() {
            if hi != 0.0 {
                for (zj, w) in z.iter_mut().zip(w_h.row(p)) {
                    *zj += hi * w;
                }
            }
        }
        let mut next = LstmState {
            h: vec![0.0; hd],
            c: vec![0.0; hd],
        };
        for j in 0..hd {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[hd + j]);
            let g = z[2 * hd + j].tanh();
            let o = sigmoid(z[3 * hd + j]);
            next.c[j] = f * state.c[j] + i * g;
            next.h[j] = o * next.c[j].tanh();
        }
        Ok(next)
    }

    /// Head pre-activation, i.e. `log phi`, for a hidden state.
    pub fn head(&self, h: &[f64]) -> Result<f64> {
        let w = self.params.require("head_w")?.values();
        let b = self.params.require("head_b")?.values()[0];
        Ok(b + h.iter().zip(w).map(|(a, c)| a * c).sum::<f64>())
    }

    /// State after consuming `inputs` in order from the zero state.
    pub fn state_after<'a, I>(&self, inputs: I) -> Result<LstmState>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut s = self.initial_state();
        for x in inputs {
            s = self.step(x, &s)?;
        }
        Ok(s)
    }

    /// Log hazard ratio per slot; pad slots yield `None` and leave the
    /// state untouched.
    pub fn log_phi_sequence(&self, seq: &SequenceExample) -> Result<Vec<Option<f64>>> {
        let mut s = self.initial_state();
        let mut out = Vec::with_capacity(seq.len());
        for (t, step) in seq.steps.iter().enumerate() {
            if !step.valid {
                out.push(None);
                continue;
            }
            s = self.step(&step.input, &s)?;
            let eta = self.head(&s.h)?;
            if !eta.is_finite() || s.c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("rnn activation at step {t} of {}", seq.recipient_id)));
            }
            out.push(Some(eta));
        }
        Ok(out)
    }

    /// Hazard ratios per slot for a batch of sequences.
    pub fn forward(&self, batch: &[SequenceExample]) -> Result<Vec<Vec<Option<f64>>>> {
        batch
            .iter()
            .map(|s| Ok(self.log_phi_sequence(s)?.into_iter().map(|e| e.map(f64::exp)).collect()))
            .collect()
    }

    /// Hazard ratio of a next message with input `next` after `prefix`.
    pub fn score_next(&self, prefix: &[&[f64]], next: &[f64]) -> Result<f64> {
        let s = self.state_after(prefix.iter().copied())?;
        Ok(self.head(&self.step(next, &s)?.h)?.exp())
    }

    /// Hazard ratios of the next message for every candidate bin: `dense`
    /// holds the non one-hot part of its input.
    pub fn score_next_bins(&self, prefix: &[&[f64]], dense: &[f64], bin_count: usize) -> Result<Vec<f64>> {
        if dense.len() + bin_count != self.meta.input_dim {
            return Err(Error::ShapeMismatch {
                op: "score_next",
                detail: format!("{} dense + {bin_count} bins vs input {}", dense.len(), self.meta.input_dim),
            });
        }
        let s = self.state_after(prefix.iter().copied())?;
        let mut x = dense.to_vec();
        x.resize(self.meta.input_dim, 0.0);
        (0..bin_count)
            .map(|b| {
                x[dense.len() + b] = 1.0;
                let phi = self.head(&self.step(&x, &s)?.h)?.exp();
                x[dense.len() + b] = 0.0;
                Ok(phi)
            })
            .collect()
    }

    /// Flattened valid slots as a batch of hazard ratios.
    pub fn survival_batch(&self, seqs: &[SequenceExample]) -> Result<SurvivalBatch> {
        let (mut scores, mut durations, mut events) = (Vec::new(), Vec::new(), Vec::new());
        for s in seqs {
            for (eta, step) in self.log_phi_sequence(s)?.into_iter().zip(&s.steps) {
                if let Some(eta) = eta {
                    scores.push(eta.exp());
                    durations.push(step.outcome.hours());
                    events.push(step.outcome.event);
                }
            }
        }
        SurvivalBatch::new(scores, durations, events)
    }

    pub fn c_index(&self, seqs: &[SequenceExample]) -> Result<f64> {
        c_index(&self.survival_batch(seqs)?)
    }
}

/// Step `t` of `s` when front-padded to `len` slots.
fn slot_at(s: &SequenceExample, t: usize, len: usize) -> Option<&SeqStep> {
    (t + s.len()).checked_sub(len).map(|i| &s.steps[i])
}

/// Graph node of the log hazard ratios of every valid slot in `batch`,
/// with the matching durations and events.
pub(crate) fn graph_log_phi<'b>(g: &mut Graph<'_>, batch: &[&'b SequenceExample]) -> Result<(Var, Vec<f64>, Vec<bool>)> {
    let len = batch.iter().map(|s| s.len()).max().unwrap_or(0);
    let dim = batch.iter().map(|s| s.input_dim()).max().unwrap_or(0);
    let (w_x, w_h, b) = (g.param("w_x")?, g.param("w_h")?, g.param("b")?);
    let (head_w, head_b) = (g.param("head_w")?, g.param("head_b")?);
    let hd = g.value(w_h).rows();
    let rows = batch.len();
    let mut h = g.input(Tensor::zeros(rows, hd))?;
    let mut c = g.input(Tensor::zeros(rows, hd))?;
    let mut picks = Vec::new();
    let (mut durations, mut events) = (Vec::new(), Vec::new());
    for t in 0..len {
        let slot = |s: &'b SequenceExample| slot_at(s, t, len);
        let mask: Vec<bool> = batch.iter().map(|s| slot(s).is_some_and(|st| st.valid)).collect();
        if !mask.iter().any(|m| *m) {
            continue;
        }
        let mut xs = vec![0.0; rows * dim];
        for (r, s) in batch.iter().enumerate() {
            if let Some(st) = slot(s).filter(|st| st.valid) {
                xs[r * dim..(r + 1) * dim].copy_from_slice(&st.input);
            }
        }
        let step = |g: &mut Graph<'_>| -> Result<(Var, Var)> {
            let x = g.input(Tensor::matrix(rows, dim, xs)?)?;
            let zx = g.matmul(x, w_x)?;
            let zh = g.matmul(h, w_h)?;
            let z = g.add(zx, zh)?;
            let z = g.add_row(z, b)?;
            let i = g.slice_cols(z, 0, hd)?;
            let i = g.sigmoid(i)?;
            let f = g.slice_cols(z, hd, hd)?;
            let f = g.sigmoid(f)?;
            let cand = g.slice_cols(z, 2 * hd, hd)?;
            let cand = g.tanh(cand)?;
            let o = g.slice_cols(z, 3 * hd, hd)?;
            let o = g.sigmoid(o)?;
            let fc = g.mul(f, c)?;
            let ig = g.mul(i, cand)?;
            let c_new = g.add(fc, ig)?;
            let tc = g.tanh(c_new)?;
            let h_new = g.mul(o, tc)?;
            Ok((g.blend_rows(h_new, h, &mask)?, g.blend_rows(c_new, c, &mask)?))
        };
        let (h_next, c_next) = step(g).map_err(|e| match e {
            Error::NonFinite(d) => Error::NonFinite(format!("rnn step {t}: {d}")),
            other => other,
        })?;
        h = h_next;
        c = c_next;
        let eta = g.matmul(h, head_w)?;
        let eta = g.add_row(eta, head_b)?;
        for (r, s) in batch.iter().enumerate() {
            if mask[r] {
                let st = slot(s).expect("masked slot exists");
                picks.push((eta, r));
                durations.push(st.outcome.hours());
                events.push(st.outcome.event);
            }
        }
    }
    let column = g.gather(&picks)?;
    Ok((column, durations, events))
}

/// Efron loss of one minibatch with risk sets inside the batch, divided by
/// its event count. `None` when the batch holds no events.
pub fn batch_loss(params: &ParamStore, batch: &[&SequenceExample]) -> Result<Option<(f64, Gradients)>> {
    let has_event = batch
        .iter()
        .any(|s| s.steps.iter().any(|st| st.valid && st.outcome.event));
    if !has_event {
        return Ok(None);
    }
    forward_backward(params, |g| {
        let (eta, durations, events) = graph_log_phi(g, batch)?;
        let n_events = events.iter().filter(|e| **e).count() as f64;
        let nll = g.efron_nll(eta, &durations, &events)?;
        g.scale(nll, 1.0 / n_events)
    })
    .map(Some)
}

/// Minibatch Adam with per-epoch recipient shuffling and early stopping on
/// validation C-index.
pub fn train(sequences: &[SequenceExample], hidden: usize, cfg: &TrainConfig) -> Result<(RnnSurvivalModel, TrainReport)> {
    let has_event = sequences
        .iter()
        .any(|s| s.steps.iter().any(|st| st.valid && st.outcome.event));
    if !has_event {
        return Err(Error::NoEvents);
    }
    let input_dim = sequences.iter().map(|s| s.input_dim()).max().unwrap_or(0);
    let seq_len = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut rng = cfg.rng();
    let (mut order, val) = split_indices(sequences.len(), cfg.val_fraction, &mut rng);
    let val_seqs: Vec<SequenceExample> = val.iter().map(|&i| sequences[i].clone()).collect();
    let mut model = RnnSurvivalModel::init(input_dim, hidden, seq_len, cfg.seed);
    model.meta.train = Some(*cfg);
    let adam = cfg.adam();
    let mut report = TrainReport::default();
    let mut stopper = EarlyStopping::new(cfg.patience);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for (bi, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let batch: Vec<&SequenceExample> = chunk.iter().map(|&i| &sequences[i]).collect();
            let result = batch_loss(&model.params, &batch).map_err(|e| Error::Divergence {
                epoch,
                batch: bi,
                detail: e.to_string(),
            })?;
            let Some((loss, grads)) = result else {
                report.skipped_batches += 1;
                continue;
            };
            if !loss.is_finite() || !grads.norm().is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    detail: format!("loss {loss}, gradient norm {}", grads.norm()),
                });
            }
            adam.step(&mut model.params, &grads)?;
            total += loss;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        log::debug!("rnn_s epoch {epoch}: loss {mean:.5}");
        report.loss_curve.push(mean);
        if let Ok(c) = model.c_index(&val_seqs) {
            report.val_cindex.push(c);
            if stopper.record(epoch, c, &model.params) {
                report.stopped_early = true;
                break;
            }
        }
    }
    if let Some((epoch, best)) = stopper.into_best() {
        report.best_epoch = epoch;
        model.params = best;
    } else {
        report.best_epoch = report.loss_curve.len().saturating_sub(1);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_log::CensoredOutcome;
    use crate::numerics::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(id: &str, inputs: &[Vec<f64>], outcomes: &[(i64, bool)], pads: usize) -> SequenceExample {
        let dim = inputs[0].len();
        let mut steps: Vec<SeqStep> = (0..pads)
            .map(|_| SeqStep {
                input: vec![0.0; dim],
                outcome: CensoredOutcome::default(),
                position: 0,
                valid: false,
            })
            .collect();
        for (j, (x, &(d, e))) in inputs.iter().zip(outcomes).enumerate() {
            steps.push(SeqStep {
                input: x.clone(),
                outcome: CensoredOutcome { duration_s: d, event: e },
                position: j,
                valid: true,
            });
        }
        SequenceExample {
            recipient_id: id.into(),
            steps,
        }
    }

    fn random_seqs(n: usize, len: usize, dim: usize, seed: u64) -> Vec<SequenceExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let k = rng.random_range(1..=len);
                let inputs: Vec<Vec<f64>> = (0..k)
                    .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect();
                let outcomes: Vec<(i64, bool)> = (0..k)
                    .map(|_| (rng.random_range(1..10_000), rng.random_bool(0.6)))
                    .collect();
                seq(&format!("r{i}"), &inputs, &outcomes, len - k)
            })
            .collect()
    }

    #[test]
    fn zero_model_scores_one() {
        let m = RnnSurvivalModel::zeros(3, 4, 4);
        let seqs = random_seqs(5, 4, 3, 1);
        for (s, out) in seqs.iter().zip(m.forward(&seqs).unwrap()) {
            for (st, phi) in s.steps.iter().zip(out) {
                assert_eq!(phi, st.valid.then_some(1.0));
            }
        }
        assert_eq!(m.score_next_bins(&[], &[0.5], 2).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn hand_traced_two_step_lstm() {
        // hidden size 2, input size 1
        let mut p = ParamStore::new();
        let w_x = vec![0.5, -0.3, 0.2, 0.1, 0.4, 0.3, -0.6, 0.7];
        let w_h = vec![
            0.1, 0.2, -0.1, 0.3, 0.05, -0.2, 0.4, 0.1, //
            -0.3, 0.1, 0.2, 0.2, 0.3, 0.1, -0.1, 0.25,
        ];
        let b = vec![0.0, 0.1, 1.0, 1.0, 0.0, -0.1, 0.2, 0.0];
        p.insert("w_x", Tensor::matrix(1, 8, w_x.clone()).unwrap());
        p.insert("w_h", Tensor::matrix(2, 8, w_h.clone()).unwrap());
        p.insert("b", Tensor::matrix(1, 8, b.clone()).unwrap());
        p.insert("head_w", Tensor::matrix(2, 1, vec![0.8, -0.5]).unwrap());
        p.insert("head_b", Tensor::scalar(0.1));
        let m = RnnSurvivalModel::from_params(p, 2).unwrap();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (mut h, mut c) = ([0.0f64; 2], [0.0f64; 2]);
        let mut expected = Vec::new();
        for x in [1.0, -2.0] {
            let z: Vec<f64> = (0..8)
                .map(|k| b[k] + x * w_x[k] + h[0] * w_h[k] + h[1] * w_h[8 + k])
                .collect();
            for j in 0..2 {
                c[j] = sig(z[2 + j]) * c[j] + sig(z[j]) * z[4 + j].tanh();
            }
            for j in 0..2 {
                h[j] = sig(z[6 + j]) * c[j].tanh();
            }
            expected.push((0.1 + 0.8 * h[0] - 0.5 * h[1]).exp());
        }
        let s = seq("a", &[vec![1.0], vec![-2.0]], &[(1, true), (2, false)], 0);
        let got = m.forward(&[s]).unwrap();
        for (g, e) in got[0].iter().zip(&expected) {
            assert!((g.unwrap() - e).abs() < 1e-10);
        }
    }

    #[test]
    fn graph_and_plain_forward_agree() {
        let m = RnnSurvivalModel::init(3, 5, 4, 9);
        let seqs = random_seqs(6, 4, 3, 2);
        let refs: Vec<&SequenceExample> = seqs.iter().collect();
        let mut g = Graph::new(m.params());
        let (col, _, _) = graph_log_phi(&mut g, &refs).unwrap();
        let mut graph_vals = g.value(col).values().to_vec();
        let mut plain: Vec<f64> = seqs
            .iter()
            .flat_map(|s| m.log_phi_sequence(s).unwrap().into_iter().flatten())
            .collect();
        graph_vals.sort_by(f64::total_cmp);
        plain.sort_by(f64::total_cmp);
        for (a, b) in graph_vals.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_permutation_and_padding_neutral() {
        let m = RnnSurvivalModel::init(3, 4, 4, 3);
        let seqs = random_seqs(4, 4, 3, 5);
        let fwd = m.forward(&seqs).unwrap();
        let rev: Vec<SequenceExample> = seqs.iter().rev().cloned().collect();
        let mut back = m.forward(&rev).unwrap();
        back.reverse();
        assert_eq!(fwd, back);
        let a: Vec<&SequenceExample> = seqs.iter().collect();
        let padded: Vec<SequenceExample> = seqs.iter().map(|s| s.padded(3)).collect();
        let b: Vec<&SequenceExample> = padded.iter().collect();
        let (la, _) = batch_loss(m.params(), &a).unwrap().unwrap();
        let (lb, _) = batch_loss(m.params(), &b).unwrap().unwrap();
        assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn appending_future_messages_keeps_earlier_scores() {
        let m = RnnSurvivalModel::init(2, 3, 5, 4);
        let inputs = vec![vec![0.1, 0.4], vec![-0.3, 0.9], vec![0.7, -0.2]];
        let outs = [(5, true), (6, false), (7, true)];
        let short = m.forward(&[seq("a", &inputs[..2], &outs[..2], 0)]).unwrap();
        let long = m.forward(&[seq("a", &inputs, &outs, 0)]).unwrap();
        assert_eq!(short[0][..], long[0][..2]);
    }

    #[test]
    fn training_graph_passes_gradient_check() {
        let m = RnnSurvivalModel::init(4, 3, 3, 6);
        let seqs = random_seqs(3, 3, 4, 8);
        let batch: Vec<&SequenceExample> = seqs.iter().collect();
        let (_, grads) = batch_loss(m.params(), &batch).unwrap().unwrap();
        let loss = |p: &ParamStore| Ok(batch_loss(p, &batch)?.expect("events").0);
        let report = finite_diff_check(m.params(), &grads, loss, 1e-5, 1e-4, 1000).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn scheme_hash_is_enforced() {
        let mut m = RnnSurvivalModel::zeros(3, 2, 2);
        let a = BinScheme::uniform(4).unwrap();
        let b = BinScheme::uniform(5).unwrap();
        m.set_scheme(&a);
        assert!(m.check_scheme(&a).is_ok());
        assert!(matches!(m.check_scheme(&b), Err(Error::SchemeMismatch { .. })));
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut m = RnnSurvivalModel::init(3, 2, 4, 1);
        m.set_scheme(&BinScheme::uniform(3).unwrap());
        m.save(&path).unwrap();
        assert_eq!(RnnSurvivalModel::load(&path).unwrap(), m);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let seqs = random_seqs(64, 4, 3, 11);
        // make the first input coordinate predictive of fast opens
        let seqs: Vec<SequenceExample> = seqs
            .into_iter()
            .map(|mut s| {
                for st in s.steps.iter_mut().filter(|st| st.valid) {
                    st.outcome.duration_s = if st.input[0] > 0.0 { 100 } else { 5000 };
                }
                s
            })
            .collect();
        let cfg = TrainConfig {
            lr: 0.01,
            epochs: 10,
            patience: 0,
            val_fraction: 0.0,
            seed: 3,
            ..Default::default()
        };
        let (a, ra) = train(&seqs, 4, &cfg).unwrap();
        let (b, rb) = train(&seqs, 4, &cfg).unwrap();
        assert_eq!(ra.loss_curve, rb.loss_curve);
        assert_eq!(a.params(), b.params());
        assert!(ra.loss_curve.last() < ra.loss_curve.first(), "{:?}", ra.loss_curve);
    }
}
