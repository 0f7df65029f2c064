//! Gated recurrent unit with hand-derived backpropagation through time, and
//! the sentence/video sequence encoders built on it.
//!
//! One step computes
//!
//! ```text
//! r  = sigmoid(W_rx x + W_rh h + b_r)
//! z  = sigmoid(W_zx x + W_zh h + b_z)
//! h~ = tanh(W_hx x + W_hh (r * h) + b_h)
//! h' = z * h + (1 - z) * h~
//! ```
//!
//! with `h_0 = 0` for every sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sigmoid, tanh, Matrix, ParamSet, Vector};

/// Hidden width of both encoders and of the context network.
pub const HIDDEN_DIM: usize = 300;
/// Width of the word-vector table.
pub const WORD_DIM: usize = 300;
/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_rx: Matrix,
    pub w_rh: Matrix,
    pub b_r: Vector,
    pub w_zx: Matrix,
    pub w_zh: Matrix,
    pub b_z: Vector,
    pub w_hx: Matrix,
    pub w_hh: Matrix,
    pub b_h: Vector,
}

impl GruParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        GruParams {
            w_rx: Matrix::zeros(hidden_dim, input_dim),
            w_rh: Matrix::zeros(hidden_dim, hidden_dim),
            b_r: Vector::zeros(hidden_dim),
            w_zx: Matrix::zeros(hidden_dim, input_dim),
            w_zh: Matrix::zeros(hidden_dim, hidden_dim),
            b_z: Vector::zeros(hidden_dim),
            w_hx: Matrix::zeros(hidden_dim, input_dim),
            w_hh: Matrix::zeros(hidden_dim, hidden_dim),
            b_h: Vector::zeros(hidden_dim),
        }
    }

    /// Uniform initialization in `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, input_dim: usize, hidden_dim: usize, scale: f64) -> Self {
        GruParams {
            w_rx: Matrix::random_uniform(rng, hidden_dim, input_dim, scale),
            w_rh: Matrix::random_uniform(rng, hidden_dim, hidden_dim, scale),
            b_r: Vector::random_uniform(rng, hidden_dim, scale),
            w_zx: Matrix::random_uniform(rng, hidden_dim, input_dim, scale),
            w_zh: Matrix::random_uniform(rng, hidden_dim, hidden_dim, scale),
            b_z: Vector::random_uniform(rng, hidden_dim, scale),
            w_hx: Matrix::random_uniform(rng, hidden_dim, input_dim, scale),
            w_hh: Matrix::random_uniform(rng, hidden_dim, hidden_dim, scale),
            b_h: Vector::random_uniform(rng, hidden_dim, scale),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_rx.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_rx.rows()
    }

    pub fn zeros_like(&self) -> Self {
        GruParams::zeros(self.input_dim(), self.hidden_dim())
    }

    /// Checks that all nine tensors agree on input and hidden widths.
    pub fn validate(&self) -> Result<()> {
        let (h, d) = (self.hidden_dim(), self.input_dim());
        let mats = [
            ("w_rx", &self.w_rx, (h, d)),
            ("w_zx", &self.w_zx, (h, d)),
            ("w_hx", &self.w_hx, (h, d)),
            ("w_rh", &self.w_rh, (h, h)),
            ("w_zh", &self.w_zh, (h, h)),
            ("w_hh", &self.w_hh, (h, h)),
        ];
        for (name, m, shape) in mats {
            if m.shape() != shape {
                return Err(Error::validation(name, format!("shape {:?}, expected {:?}", m.shape(), shape)));
            }
        }
        for (name, b) in [("b_r", &self.b_r), ("b_z", &self.b_z), ("b_h", &self.b_h)] {
            if b.len() != h {
                return Err(Error::validation(name, format!("length {}, expected {h}", b.len())));
            }
        }
        Ok(())
    }
}

impl ParamSet for GruParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.w_rx.as_slice());
        f(self.w_rh.as_slice());
        f(&self.b_r);
        f(self.w_zx.as_slice());
        f(self.w_zh.as_slice());
        f(&self.b_z);
        f(self.w_hx.as_slice());
        f(self.w_hh.as_slice());
        f(&self.b_h);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.w_rx.as_mut_slice());
        f(self.w_rh.as_mut_slice());
        f(&mut self.b_r);
        f(self.w_zx.as_mut_slice());
        f(self.w_zh.as_mut_slice());
        f(&mut self.b_z);
        f(self.w_hx.as_mut_slice());
        f(self.w_hh.as_mut_slice());
        f(&mut self.b_h);
    }
}

/// Activations of one step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: Vector,
    pub h_prev: Vector,
    pub r: Vector,
    pub z: Vector,
    pub candidate: Vector,
    pub h: Vector,
}

pub fn gru_step(p: &GruParams, x: &[f64], h_prev: &[f64]) -> Result<StepCache> {
    if x.len() != p.input_dim() {
        return Err(Error::dims("gru_cell input", p.input_dim(), x.len()));
    }
    if h_prev.len() != p.hidden_dim() {
        return Err(Error::dims("gru_cell hidden", p.hidden_dim(), h_prev.len()));
    }
    let pre_r = p.w_rx.matvec(x)?.add(&p.w_rh.matvec(h_prev)?)?.add(&p.b_r)?;
    let r = sigmoid(&pre_r);
    let pre_z = p.w_zx.matvec(x)?.add(&p.w_zh.matvec(h_prev)?)?.add(&p.b_z)?;
    let z = sigmoid(&pre_z);
    let rh = r.zip_map(h_prev, |a, b| a * b);
    let pre_c = p.w_hx.matvec(x)?.add(&p.w_hh.matvec(&rh)?)?.add(&p.b_h)?;
    let candidate = tanh(&pre_c);
    let h = Vector::from_fn(z.len(), |i| z[i] * h_prev[i] + (1.0 - z[i]) * candidate[i]);
    Ok(StepCache {
        x: Vector::from_vec(x.to_vec()),
        h_prev: Vector::from_vec(h_prev.to_vec()),
        r,
        z,
        candidate,
        h,
    })
}

/// One GRU transition `h_t = GRU(x_t, h_{t-1})`.
pub fn gru_cell(p: &GruParams, x: &[f64], h_prev: &[f64]) -> Result<Vector> {
    Ok(gru_step(p, x, h_prev)?.h)
}

/// Backpropagates `dh` (gradient of the loss w.r.t. this step's output)
/// through one step. Parameter gradients are accumulated into `grads`;
/// returns the gradients w.r.t. `h_prev` and `x`.
pub fn gru_step_backward(p: &GruParams, c: &StepCache, dh: &[f64], grads: &mut GruParams) -> Result<(Vector, Vector)> {
    let n = p.hidden_dim();
    if dh.len() != n {
        return Err(Error::dims("gru backward", n, dh.len()));
    }
    let mut dh_prev = Vector::from_fn(n, |i| dh[i] * c.z[i]);
    let da_c = Vector::from_fn(n, |i| dh[i] * (1.0 - c.z[i]) * (1.0 - c.candidate[i] * c.candidate[i]));
    let da_z = Vector::from_fn(n, |i| dh[i] * (c.h_prev[i] - c.candidate[i]) * c.z[i] * (1.0 - c.z[i]));

    let rh = c.r.zip_map(&c.h_prev, |a, b| a * b);
    grads.w_hx.add_outer(1.0, &da_c, &c.x)?;
    grads.w_hh.add_outer(1.0, &da_c, &rh)?;
    grads.b_h.axpy(1.0, &da_c)?;
    let d_rh = p.w_hh.matvec_t(&da_c)?;
    let da_r = Vector::from_fn(n, |i| d_rh[i] * c.h_prev[i] * c.r[i] * (1.0 - c.r[i]));
    dh_prev.axpy(1.0, &c.r.zip_map(&d_rh, |a, b| a * b))?;

    grads.w_zx.add_outer(1.0, &da_z, &c.x)?;
    grads.w_zh.add_outer(1.0, &da_z, &c.h_prev)?;
    grads.b_z.axpy(1.0, &da_z)?;
    grads.w_rx.add_outer(1.0, &da_r, &c.x)?;
    grads.w_rh.add_outer(1.0, &da_r, &c.h_prev)?;
    grads.b_r.axpy(1.0, &da_r)?;

    dh_prev.axpy(1.0, &p.w_zh.matvec_t(&da_z)?)?;
    dh_prev.axpy(1.0, &p.w_rh.matvec_t(&da_r)?)?;

    let mut dx = p.w_hx.matvec_t(&da_c)?;
    dx.axpy(1.0, &p.w_zx.matvec_t(&da_z)?)?;
    dx.axpy(1.0, &p.w_rx.matvec_t(&da_r)?)?;
    Ok((dh_prev, dx))
}

/// Forward activations of a whole sequence.
#[derive(Debug, Clone)]
pub struct SequenceTrace {
    pub steps: Vec<StepCache>,
}

impl SequenceTrace {
    pub fn last(&self) -> &Vector {
        &self.steps.last().expect("trace is never empty").h
    }

    pub fn hidden(&self, t: usize) -> &Vector {
        &self.steps[t].h
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Runs the GRU over `inputs` from a zero state. `label` names the layer in
/// diagnostics.
pub fn run_sequence<'a, I>(p: &GruParams, inputs: I, label: &str) -> Result<SequenceTrace>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut h = Vector::zeros(p.hidden_dim());
    let mut steps = Vec::new();
    for (t, x) in inputs.into_iter().enumerate() {
        let c = gru_step(p, x, &h)?;
        if !c.h.is_finite() {
            return Err(Error::NonFinite(format!("{label} hidden state at step {t}")));
        }
        h = c.h.clone();
        steps.push(c);
    }
    if steps.is_empty() {
        return Err(Error::Empty(format!("{label} input sequence")));
    }
    Ok(SequenceTrace { steps })
}

/// BPTT over a trace. `upstream[t]` is dL/dh_t (use zeros where the loss
/// does not touch step `t`). Returns dL/dx_t for every step.
pub fn backward_sequence(
    p: &GruParams,
    trace: &SequenceTrace,
    upstream: &[Vector],
    grads: &mut GruParams,
    label: &str,
) -> Result<Vec<Vector>> {
    if upstream.len() != trace.len() {
        return Err(Error::dims("backward_sequence", trace.len(), upstream.len()));
    }
    let mut carry = Vector::zeros(p.hidden_dim());
    let mut dxs = vec![Vector::zeros(p.input_dim()); trace.len()];
    for t in (0..trace.len()).rev() {
        carry.axpy(1.0, &upstream[t])?;
        let (dh_prev, dx) = gru_step_backward(p, &trace.steps[t], &carry, grads)?;
        if !dh_prev.is_finite() || !dx.is_finite() {
            return Err(Error::NonFinite(format!("{label} gradient at step {t}")));
        }
        dxs[t] = dx;
        carry = dh_prev;
    }
    Ok(dxs)
}

/// Convenience wrapper for losses that only read the final hidden state.
pub fn backward_last(p: &GruParams, trace: &SequenceTrace, dh_last: &[f64], grads: &mut GruParams, label: &str) -> Result<Vec<Vector>> {
    let mut up = vec![Vector::zeros(p.hidden_dim()); trace.len()];
    *up.last_mut().expect("nonempty") = Vector::from_vec(dh_last.to_vec());
    backward_sequence(p, trace, &up, grads, label)
}

/// Final hidden state of the GRU over the rows of `inputs`.
pub fn encode_sequence(p: &GruParams, inputs: &Matrix) -> Result<Vector> {
    if inputs.rows() == 0 {
        return Err(Error::Empty("encode_sequence input".into()));
    }
    if inputs.cols() != p.input_dim() {
        return Err(Error::dims("encode_sequence", p.input_dim(), inputs.cols()));
    }
    Ok(run_sequence(p, inputs.row_iter(), "encoder")?.last().clone())
}

/// Sentence and video encoders; two independent parameter sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderBundle {
    pub sentence: GruParams,
    pub video: GruParams,
}

impl EncoderBundle {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, word_dim: usize, feature_dim: usize, hidden_dim: usize) -> Self {
        EncoderBundle {
            sentence: GruParams::random(rng, word_dim, hidden_dim, INIT_SCALE),
            video: GruParams::random(rng, feature_dim, hidden_dim, INIT_SCALE),
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderBundle {
            sentence: self.sentence.zeros_like(),
            video: self.video.zeros_like(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.video.hidden_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.sentence.validate()?;
        self.video.validate()?;
        if self.sentence.hidden_dim() != self.video.hidden_dim() {
            return Err(Error::validation(
                "encoders",
                format!(
                    "sentence hidden {} differs from video hidden {}",
                    self.sentence.hidden_dim(),
                    self.video.hidden_dim()
                ),
            ));
        }
        Ok(())
    }
}

impl ParamSet for EncoderBundle {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.sentence.visit(f);
        self.video.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.sentence.visit_mut(f);
        self.video.visit_mut(f);
    }
}

pub fn encode_sentence(bundle: &EncoderBundle, word_vectors: &Matrix) -> Result<Vector> {
    encode_sequence(&bundle.sentence, word_vectors)
}

pub fn encode_video_clip(bundle: &EncoderBundle, frame_features: &Matrix) -> Result<Vector> {
    encode_sequence(&bundle.video, frame_features)
}

/// Output of [`encoder_gradients`].
#[derive(Debug, Clone)]
pub struct EncoderGradients {
    pub loss: f64,
    pub params: EncoderBundle,
    /// dL/d(word vector) per sentence and token position.
    pub sentence_inputs: Vec<Vec<Vector>>,
}

/// Gradient of `loss` w.r.t. both encoders via full BPTT. The loss sees the
/// sentence and clip embeddings and must return its value together with
/// dL/dv for each sentence and dL/dx for each clip.
pub fn encoder_gradients<F>(bundle: &EncoderBundle, sentences: &[Matrix], clips: &[Matrix], loss: F) -> Result<EncoderGradients>
where
    F: FnOnce(&[Vector], &[Vector]) -> Result<(f64, Vec<Vector>, Vec<Vector>)>,
{
    let s_traces = sentences
        .iter()
        .enumerate()
        .map(|(i, m)| run_sequence(&bundle.sentence, m.row_iter(), &format!("sentence encoder (item {i})")))
        .collect::<Result<Vec<_>>>()?;
    let c_traces = clips
        .iter()
        .enumerate()
        .map(|(i, m)| run_sequence(&bundle.video, m.row_iter(), &format!("video encoder (item {i})")))
        .collect::<Result<Vec<_>>>()?;
    let v: Vec<Vector> = s_traces.iter().map(|t| t.last().clone()).collect();
    let x: Vec<Vector> = c_traces.iter().map(|t| t.last().clone()).collect();
    let (value, dv, dx) = loss(&v, &x)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("encoder loss value".into()));
    }
    if dv.len() != v.len() || dx.len() != x.len() {
        return Err(Error::dims(
            "encoder_gradients loss output",
            format!("{}/{}", v.len(), x.len()),
            format!("{}/{}", dv.len(), dx.len()),
        ));
    }
    let mut grads = bundle.zeros_like();
    let mut sentence_inputs = Vec::with_capacity(sentences.len());
    for (i, (tr, g)) in s_traces.iter().zip(&dv).enumerate() {
        let dxs = backward_last(
            &bundle.sentence,
            tr,
            g,
            &mut grads.sentence,
            &format!("sentence encoder (item {i})"),
        )?;
        sentence_inputs.push(dxs);
    }
    for (i, (tr, g)) in c_traces.iter().zip(&dx).enumerate() {
        backward_last(&bundle.video, tr, g, &mut grads.video, &format!("video encoder (item {i})"))?;
    }
    Ok(EncoderGradients {
        loss: value,
        params: grads,
        sentence_inputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{finite_diff_grad, max_relative_error, sigmoid_scalar};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct, loop-based evaluation of one GRU step.
    fn oracle_step(p: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
        let n = p.hidden_dim();
        let d = p.input_dim();
        let lin = |w: &Matrix, v: &[f64], i: usize, k: usize| (0..k).map(|j| w.get(i, j) * v[j]).sum::<f64>();
        let r: Vec<f64> = (0..n)
            .map(|i| sigmoid_scalar(lin(&p.w_rx, x, i, d) + lin(&p.w_rh, h, i, n) + p.b_r[i]))
            .collect();
        let z: Vec<f64> = (0..n)
            .map(|i| sigmoid_scalar(lin(&p.w_zx, x, i, d) + lin(&p.w_zh, h, i, n) + p.b_z[i]))
            .collect();
        let rh: Vec<f64> = (0..n).map(|i| r[i] * h[i]).collect();
        let c: Vec<f64> = (0..n)
            .map(|i| (lin(&p.w_hx, x, i, d) + lin(&p.w_hh, &rh, i, n) + p.b_h[i]).tanh())
            .collect();
        (0..n).map(|i| z[i] * h[i] + (1.0 - z[i]) * c[i]).collect()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_params_collapse_gates() {
        let p = GruParams::zeros(4, 3);
        let x = [1.0, -2.0, 0.5, 3.0];
        assert_eq!(gru_cell(&p, &x, &[0.0; 3]).unwrap().as_slice(), &[0.0; 3]);
        let h = gru_cell(&p, &x, &[0.4, -1.0, 2.0]).unwrap();
        assert_eq!(h.as_slice(), &[0.2, -0.5, 1.0]);
    }

    #[test]
    fn cell_matches_oracle() {
        let mut r = rng(1);
        let p = GruParams::random(&mut r, 3, 3, 0.8);
        let x = Vector::random_uniform(&mut r, 3, 1.0);
        let h = Vector::random_uniform(&mut r, 3, 1.0);
        let got = gru_cell(&p, &x, &h).unwrap();
        for (a, b) in got.iter().zip(oracle_step(&p, &x, &h)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn cell_rejects_bad_dims() {
        let p = GruParams::zeros(4, 3);
        assert!(gru_cell(&p, &[0.0; 3], &[0.0; 3]).is_err());
        assert!(gru_cell(&p, &[0.0; 4], &[0.0; 2]).is_err());
    }

    #[test]
    fn encode_sequence_cases() {
        let mut r = rng(2);
        let p = GruParams::random(&mut r, 3, 4, 0.5);
        let seq = Matrix::random_uniform(&mut r, 3, 3, 1.0);
        let one = seq.slice_rows(0, 1).unwrap();
        assert_eq!(encode_sequence(&p, &one).unwrap(), gru_cell(&p, seq.row(0), &[0.0; 4]).unwrap());
        let mut h = vec![0.0; 4];
        for t in 0..3 {
            h = oracle_step(&p, seq.row(t), &h);
        }
        let got = encode_sequence(&p, &seq).unwrap();
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(encode_sequence(&GruParams::zeros(3, 4), &seq).unwrap().as_slice(), &[0.0; 4]);
        assert!(matches!(encode_sequence(&p, &Matrix::zeros(0, 3)), Err(Error::Empty(_))));
    }

    #[test]
    fn encoders_route_to_their_own_params() {
        let mut r = rng(4);
        let b = EncoderBundle::random(&mut r, 3, 5, 4);
        let words = Matrix::random_uniform(&mut r, 1, 3, 1.0);
        assert_eq!(
            encode_sentence(&b, &words).unwrap(),
            gru_cell(&b.sentence, words.row(0), &[0.0; 4]).unwrap()
        );
        let frame = Matrix::random_uniform(&mut r, 1, 5, 1.0);
        let clip = Matrix::from_rows(&vec![frame.row(0).to_vec(); 4]).unwrap();
        let a = encode_video_clip(&b, &clip).unwrap();
        let c = encode_video_clip(&b, &clip).unwrap();
        assert_eq!(a, c);
        assert!(encode_video_clip(&b, &words).is_err());
    }

    fn loss_of(p: &GruParams, seq: &Matrix, w: &[f64]) -> f64 {
        let trace = run_sequence(p, seq.row_iter(), "t").unwrap();
        // loss touches every hidden state
        (0..trace.len())
            .map(|t| crate::linalg::dot(trace.hidden(t), w) * (t as f64 + 1.0))
            .sum::<f64>()
            + trace.last().iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let mut r = rng(7);
        for (d, n, t) in [(3, 4, 5), (8, 8, 3), (2, 5, 1)] {
            let p = GruParams::random(&mut r, d, n, 0.6);
            let seq = Matrix::random_uniform(&mut r, t, d, 1.0);
            let w = Vector::random_uniform(&mut r, n, 1.0);
            let trace = run_sequence(&p, seq.row_iter(), "t").unwrap();
            let upstream: Vec<Vector> = (0..t)
                .map(|k| {
                    let mut u = w.scale(k as f64 + 1.0);
                    if k == t - 1 {
                        u.axpy(2.0, trace.last()).unwrap();
                    }
                    u
                })
                .collect();
            let mut g = p.zeros_like();
            let dxs = backward_sequence(&p, &trace, &upstream, &mut g, "t").unwrap();
            let flat = p.to_flat();
            let fd = finite_diff_grad(
                |v| {
                    let mut q = p.clone();
                    q.set_flat(v).unwrap();
                    loss_of(&q, &seq, &w)
                },
                &flat,
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(&g.to_flat(), &fd);
            assert!(err < 1e-4, "param rel err {err}");
            let fdx = finite_diff_grad(
                |v| loss_of(&p, &Matrix::from_vec(t, d, v.to_vec()).unwrap(), &w),
                seq.as_slice(),
                1e-5,
            )
            .unwrap();
            let dx_flat: Vec<f64> = dxs.iter().flat_map(|v| v.iter().copied()).collect();
            assert!(max_relative_error(&dx_flat, &fdx) < 1e-4);
        }
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut r = rng(8);
        let b = EncoderBundle::random(&mut r, 3, 4, 5);
        let s = vec![Matrix::random_uniform(&mut r, 3, 3, 1.0)];
        let c = vec![Matrix::random_uniform(&mut r, 2, 4, 1.0)];
        let g = encoder_gradients(&b, &s, &c, |v, x| {
            Ok((3.0, vec![Vector::zeros(5); v.len()], vec![Vector::zeros(5); x.len()]))
        })
        .unwrap();
        assert!(g.params.to_flat().iter().all(|&v| v == 0.0));
        assert_eq!(g.loss, 3.0);
    }

    #[test]
    fn shared_parameter_reuse_sums_gradients() {
        // The same video encoder encodes two clips; the gradient of a loss
        // over both equals the finite-difference gradient of that loss.
        let mut r = rng(11);
        let b = EncoderBundle::random(&mut r, 2, 3, 4);
        let clips = vec![Matrix::random_uniform(&mut r, 3, 3, 1.0), Matrix::random_uniform(&mut r, 2, 3, 1.0)];
        let loss = |x: &[Vector]| crate::linalg::cosine_sim(&x[0], &x[1]).unwrap();
        let g = encoder_gradients(&b, &[], &clips, |_, x| {
            let (s, ga, gb) = crate::linalg::cosine_sim_grad(&x[0], &x[1])?;
            Ok((s, vec![], vec![ga, gb]))
        })
        .unwrap();
        let fd = finite_diff_grad(
            |v| {
                let mut q = b.video.clone();
                q.set_flat(v).unwrap();
                let x: Vec<Vector> = clips.iter().map(|c| encode_sequence(&q, c).unwrap()).collect();
                loss(&x)
            },
            &b.video.to_flat(),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&g.params.video.to_flat(), &fd) < 1e-4);
        // and it is the sum of the two single-use gradients
        let mut parts = b.video.zeros_like();
        let x: Vec<Vector> = clips.iter().map(|c| encode_sequence(&b.video, c).unwrap()).collect();
        let (_, ga, gb) = crate::linalg::cosine_sim_grad(&x[0], &x[1]).unwrap();
        for (c, dg) in clips.iter().zip([ga, gb]) {
            let tr = run_sequence(&b.video, c.row_iter(), "t").unwrap();
            let mut one = b.video.zeros_like();
            backward_last(&b.video, &tr, &dg, &mut one, "t").unwrap();
            let mut f = parts.to_flat();
            for (a, o) in f.iter_mut().zip(one.to_flat()) {
                *a += o;
            }
            parts.set_flat(&f).unwrap();
        }
        assert!(max_relative_error(&parts.to_flat(), &g.params.video.to_flat()) < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn output_lies_between_previous_and_candidate(seed in 0u64..10_000) {
            let mut r = rng(seed);
            let p = GruParams::random(&mut r, 3, 4, 2.0);
            let x = Vector::random_uniform(&mut r, 3, 2.0);
            let h = Vector::random_uniform(&mut r, 4, 2.0);
            let c = gru_step(&p, &x, &h).unwrap();
            for i in 0..4 {
                let lo = c.h_prev[i].min(c.candidate[i]) - 1e-12;
                let hi = c.h_prev[i].max(c.candidate[i]) + 1e-12;
                prop_assert!(c.h[i] >= lo && c.h[i] <= hi);
            }
        }

        #[test]
        fn encode_sequence_is_deterministic(seed in 0u64..10_000) {
            let mut r = rng(seed);
            let p = GruParams::random(&mut r, 3, 4, 0.5);
            let seq = Matrix::random_uniform(&mut r, 4, 3, 1.0);
            let a = encode_sequence(&p, &seq).unwrap();
            let b = encode_sequence(&p, &seq).unwrap();
            prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
