//! The recurrent encoder/decoder with a fixed normalization front end,
//! a mixture-density output head, and the three decode regimes.
//!
//! The encoder and decoder share one weight set: the same stack first
//! consumes the observation window, then rolls forward generating one
//! mixture step per future timestep. Decoder feedback depends on the
//! variant: FF feeds a sample drawn from the current output, ZF feeds
//! zeros, FL stops after a single step.

pub mod checkpoint;
pub mod lstm;
pub mod mdn;

use crate::types::{
    MdnStep, ModelConfig, NormStats, ObsPoint, PredictionSequence, TrackSnippet, Variant,
};
use lstm::{backward_layer, LayerGrads, LstmLayer, StepCache};
use mdn::{mdn_activate, normalize, pinned_position, sample_position, step_loss_and_raw_grad};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// How the FF decoder obtains its feedback positions.
pub enum FeedbackMode<'a> {
    /// Draw from the mixture (training and inference).
    Sample(&'a mut ChaCha8Rng),
    /// Component zero, zero noise; used for gradient verification.
    Pinned,
    /// Feed a prerecorded input sequence; used by the finite-difference
    /// oracle so the stop-gradient feedback stays constant.
    Replay(&'a [Vec<[f64; 4]>]),
}

/// Encoder/decoder network with shared weights.
#[derive(Debug, Clone)]
pub struct SeqNet {
    pub cfg: ModelConfig,
    pub norm: NormStats,
    pub layers: Vec<LstmLayer>,
    /// Output projection, `[width, 1 + 6M]`.
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

/// Hidden and cell states of all layers for one sequence.
#[derive(Debug, Clone)]
pub struct NetState {
    h: Vec<Array2<f64>>,
    c: Vec<Array2<f64>>,
}

/// Everything one training forward pass produces.
pub struct BatchForward {
    /// Mean over the batch of each element's summed step losses.
    pub mean_loss: f64,
    pub element_losses: Vec<f64>,
    /// Raw decoder inputs actually fed, per element per decoder step.
    pub decoder_inputs: Vec<Vec<[f64; 4]>>,
    caches: Vec<Vec<StepCache>>,
    raw_grads: Vec<Array2<f64>>,
    encoder_len: usize,
}

impl SeqNet {
    pub fn out_dim(&self) -> usize {
        1 + 6 * self.cfg.mixtures
    }

    /// Builds a network with uniform `+-1/sqrt(fan_in)` weights, zero
    /// biases, and forget-gate biases of one.
    pub fn init(cfg: ModelConfig, norm: NormStats, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = cfg.lstm_width;
        let out_dim = 1 + 6 * cfg.mixtures;

        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
        };

        let mut layers = Vec::with_capacity(cfg.lstm_layers);
        for l in 0..cfg.lstm_layers {
            let in_dim = if l == 0 { 4 } else { w };
            let w_ih = uniform(in_dim, 4 * w, in_dim);
            let w_hh = uniform(w, 4 * w, w);
            let mut b = Array1::zeros(4 * w);
            b.slice_mut(ndarray::s![w..2 * w]).fill(1.0);
            layers.push(LstmLayer { w_ih, w_hh, b });
        }
        let w_out = uniform(w, out_dim, w);
        let b_out = Array1::zeros(out_dim);

        Self { cfg, norm, layers, w_out, b_out }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum::<usize>()
            + self.w_out.len()
            + self.b_out.len()
    }

    /// Flattens all parameters in the fixed order: per layer `w_ih`
    /// row-major, `w_hh` row-major, `b`; then `w_out` row-major and
    /// `b_out`. Checkpoints and the optimizer use this order.
    pub fn params_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w_ih.iter());
            out.extend(l.w_hh.iter());
            out.extend(l.b.iter());
        }
        out.extend(self.w_out.iter());
        out.extend(self.b_out.iter());
        out
    }

    pub fn set_params_vec(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "parameter count mismatch");
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for v in l.w_ih.iter_mut() {
                *v = it.next().unwrap();
            }
            for v in l.w_hh.iter_mut() {
                *v = it.next().unwrap();
            }
            for v in l.b.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        for v in self.w_out.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in self.b_out.iter_mut() {
            *v = it.next().unwrap();
        }
    }

    fn zero_state(&self, batch: usize) -> NetState {
        NetState {
            h: self.layers.iter().map(|l| Array2::zeros((batch, l.width()))).collect(),
            c: self.layers.iter().map(|l| Array2::zeros((batch, l.width()))).collect(),
        }
    }

    /// Advances the whole stack one step. Returns the top hidden state;
    /// pushes per-layer caches when given a cache store.
    fn stack_step(
        &self,
        x: Array2<f64>,
        state: &mut NetState,
        caches: Option<&mut Vec<Vec<StepCache>>>,
    ) -> Array2<f64> {
        let mut xin = x;
        let mut cache_slot = caches;
        for (l, layer) in self.layers.iter().enumerate() {
            let sc = layer.forward_step(&xin, &state.h[l], &state.c[l]);
            state.h[l] = sc.h.clone();
            state.c[l] = sc.c.clone();
            xin = sc.h.clone();
            if let Some(store) = cache_slot.as_deref_mut() {
                store[l].push(sc);
            }
        }
        xin
    }

    fn normalized_rows(&self, inputs: &[[f64; 4]]) -> Array2<f64> {
        let mut x = Array2::zeros((inputs.len(), 4));
        for (k, raw) in inputs.iter().enumerate() {
            let n = normalize(raw, &self.norm);
            for c in 0..4 {
                x[(k, c)] = n[c];
            }
        }
        x
    }

    /// Consumes a full observation window and returns the final state.
    pub fn encode(&self, obs: &[ObsPoint]) -> NetState {
        assert_eq!(obs.len(), self.cfg.encoder_steps, "observation window length");
        let mut state = self.zero_state(1);
        for o in obs {
            let x = self.normalized_rows(&[o.as_array()]);
            self.stack_step(x, &mut state, None);
        }
        state
    }

    fn output_row(&self, h_top: &Array2<f64>) -> Vec<f64> {
        let raw = h_top.dot(&self.w_out) + &self.b_out;
        raw.row(0).to_vec()
    }

    /// Rolls the decoder forward from an encoded state.
    ///
    /// FF samples one position per step and feeds it back with speed and
    /// heading derived from the displacement; ZF feeds zeros and ignores
    /// the rng entirely; FL emits exactly one step.
    pub fn decode(
        &self,
        state: &NetState,
        last_obs: &ObsPoint,
        variant: Variant,
        steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> PredictionSequence {
        let dec_steps = if variant == Variant::Fl { 1 } else { steps };
        let mut state = state.clone();
        let dt = self.cfg.dt();

        let mut prev_pos = (last_obs.x, last_obs.y);
        let mut input: [f64; 4] = match variant {
            Variant::Zf => [0.0; 4],
            Variant::Ff | Variant::Fl => last_obs.as_array(),
        };

        let mut out_steps = Vec::with_capacity(dec_steps);
        for _ in 0..dec_steps {
            let x = self.normalized_rows(&[input]);
            let h_top = self.stack_step(x, &mut state, None);
            let raw = self.output_row(&h_top);
            let step = mdn_activate(&raw, &self.norm);
            if variant == Variant::Ff {
                let pos = sample_position(&step, rng);
                input = feedback_input(prev_pos, pos, dt);
                prev_pos = pos;
            }
            out_steps.push(step);
        }
        PredictionSequence { steps: out_steps, source_variant: variant }
    }

    /// Decode as used at evaluation time: FL checkpoints are rolled out
    /// by iterating the one-step decoder with sampled self-feedback,
    /// which is the FF mechanism.
    pub fn decode_for_eval(
        &self,
        state: &NetState,
        last_obs: &ObsPoint,
        variant: Variant,
        steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> PredictionSequence {
        let mechanism = if variant == Variant::Fl { Variant::Ff } else { variant };
        let mut seq = self.decode(state, last_obs, mechanism, steps, rng);
        seq.source_variant = variant;
        seq
    }

    /// Full training forward pass over a batch: encoder unroll, decoder
    /// unroll under the given variant, per-step losses and raw-output
    /// gradients.
    pub fn forward_batch(
        &self,
        batch: &[&TrackSnippet],
        variant: Variant,
        feedback: FeedbackMode<'_>,
    ) -> BatchForward {
        let b = batch.len();
        assert!(b > 0, "empty batch");
        let enc = self.cfg.encoder_steps;
        let dec = if variant == Variant::Fl { 1 } else { self.cfg.decoder_steps };
        let dt = self.cfg.dt();
        let out_dim = self.out_dim();

        let mut caches: Vec<Vec<StepCache>> =
            self.layers.iter().map(|_| Vec::with_capacity(enc + dec)).collect();
        let mut state = self.zero_state(b);

        for t in 0..enc {
            let rows: Vec<[f64; 4]> = batch.iter().map(|s| s.obs[t].as_array()).collect();
            let x = self.normalized_rows(&rows);
            self.stack_step(x, &mut state, Some(&mut caches));
        }

        let mut prev_pos: Vec<(f64, f64)> =
            batch.iter().map(|s| (s.last_obs().x, s.last_obs().y)).collect();
        let mut inputs: Vec<[f64; 4]> = match variant {
            Variant::Zf => vec![[0.0; 4]; b],
            Variant::Ff | Variant::Fl => batch.iter().map(|s| s.last_obs().as_array()).collect(),
        };
        let mut feedback = feedback;

        let mut element_losses = vec![0.0; b];
        let mut raw_grads: Vec<Array2<f64>> = Vec::with_capacity(dec);
        let mut decoder_inputs: Vec<Vec<[f64; 4]>> = vec![Vec::with_capacity(dec); b];

        for t in 0..dec {
            for (k, input) in inputs.iter().enumerate() {
                decoder_inputs[k].push(*input);
            }
            let x = self.normalized_rows(&inputs);
            let h_top = self.stack_step(x, &mut state, Some(&mut caches));
            let raw_mat = h_top.dot(&self.w_out) + &self.b_out;

            let mut grad_mat = Array2::zeros((b, out_dim));
            let mut steps_for_feedback: Vec<MdnStep> = Vec::new();
            let want_feedback = variant == Variant::Ff && t + 1 < dec;
            for k in 0..b {
                let row = raw_mat.row(k);
                let raw_row = row.as_slice().expect("contiguous row");
                let truth = &batch[k].future[t];
                let (loss, step, grad) = step_loss_and_raw_grad(
                    raw_row,
                    &self.norm,
                    truth,
                    self.cfg.alpha,
                    self.cfg.beta,
                );
                element_losses[k] += loss;
                grad_mat.row_mut(k).assign(&Array1::from_vec(grad));
                if want_feedback {
                    steps_for_feedback.push(step);
                }
            }
            raw_grads.push(grad_mat);

            if want_feedback {
                match &mut feedback {
                    FeedbackMode::Sample(rng) => {
                        for k in 0..b {
                            let pos = sample_position(&steps_for_feedback[k], rng);
                            inputs[k] = feedback_input(prev_pos[k], pos, dt);
                            prev_pos[k] = pos;
                        }
                    }
                    FeedbackMode::Pinned => {
                        for k in 0..b {
                            let pos = pinned_position(&steps_for_feedback[k]);
                            inputs[k] = feedback_input(prev_pos[k], pos, dt);
                            prev_pos[k] = pos;
                        }
                    }
                    FeedbackMode::Replay(recorded) => {
                        for k in 0..b {
                            inputs[k] = recorded[k][t + 1];
                        }
                    }
                }
            }
        }

        let mean_loss = element_losses.iter().sum::<f64>() / b as f64;
        BatchForward {
            mean_loss,
            element_losses,
            decoder_inputs,
            caches,
            raw_grads,
            encoder_len: enc,
        }
    }

    /// Reverse-mode pass over a cached forward. Returns the gradient of
    /// the mean batch loss, flattened in `params_vec` order. Decoder
    /// feedback inputs are constants, so no gradient flows through the
    /// sampler; it does flow through the recurrent state across the
    /// whole unroll.
    pub fn backward(&self, fwd: &BatchForward) -> Vec<f64> {
        let b = fwd.element_losses.len();
        let scale = 1.0 / b as f64;
        let total_steps = fwd.caches[0].len();
        let top = self.layers.len() - 1;
        let width = self.cfg.lstm_width;

        let mut dw_out: Array2<f64> = Array2::zeros(self.w_out.raw_dim());
        let mut db_out: Array1<f64> = Array1::zeros(self.b_out.len());
        let mut dh_top: Vec<Array2<f64>> =
            (0..total_steps).map(|_| Array2::zeros((b, width))).collect();

        for (t_dec, grad_mat) in fwd.raw_grads.iter().enumerate() {
            let t = fwd.encoder_len + t_dec;
            let dy = grad_mat * scale;
            let h_top = &fwd.caches[top][t].h;
            dw_out += &h_top.t().dot(&dy);
            db_out += &dy.sum_axis(Axis(0));
            dh_top[t] = dy.dot(&self.w_out.t());
        }

        let mut layer_grads: Vec<LayerGrads> =
            self.layers.iter().map(LayerGrads::zeros_like).collect();
        let mut dh_in = dh_top;
        for l in (0..self.layers.len()).rev() {
            let dx = backward_layer(&self.layers[l], &fwd.caches[l], &dh_in, &mut layer_grads[l]);
            dh_in = dx;
        }

        let mut flat = Vec::with_capacity(self.param_count());
        for lg in &layer_grads {
            flat.extend(lg.dw_ih.iter());
            flat.extend(lg.dw_hh.iter());
            flat.extend(lg.db.iter());
        }
        flat.extend(dw_out.iter());
        flat.extend(db_out.iter());
        flat
    }
}

/// Builds the next decoder input from a sampled position: speed and
/// heading come from the displacement vector over one timestep.
fn feedback_input(prev: (f64, f64), pos: (f64, f64), dt: f64) -> [f64; 4] {
    let dx = pos.0 - prev.0;
    let dy = pos.1 - prev.1;
    let v = (dx * dx + dy * dy).sqrt() / dt;
    let theta = dy.atan2(dx);
    [pos.0, pos.1, v, theta]
}
