//! Learnable components: the convolutional frame encoder, the feed-forward
//! segment encoder and the recurrent context model.
//!
//! The frame encoder is five valid convolutions (kernels 10, 8, 4, 4, 4;
//! strides 5, 4, 2, 2, 2) with `p` channels and a relu after each layer,
//! giving a 465-sample receptive field and a 160-sample hop: 30 ms frames at
//! 10 ms shift for 16 kHz audio.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::mix_seed;

pub const KERNELS: [usize; 5] = [10, 8, 4, 4, 4];
pub const STRIDES: [usize; 5] = [5, 4, 2, 2, 2];
pub const RECEPTIVE_FIELD: usize = 465;
pub const HOP: usize = 160;
pub const SAMPLE_RATE: u32 = 16_000;
/// Seconds between consecutive frames.
pub const FRAME_SECONDS: f64 = 0.010;
/// Added to the last relu so that no latent is exactly zero.
pub const LATENT_FLOOR: f64 = 1e-6;

/// Number of frames produced for `samples` input samples.
pub fn frame_count(samples: usize) -> usize {
    if samples < RECEPTIVE_FIELD {
        0
    } else {
        (samples - RECEPTIVE_FIELD) / HOP + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Frame latent width.
    pub p: usize,
    /// Segment representation width.
    pub q: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { p: 64, q: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[c_out, kernel, c_in]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEncoder {
    pub layers: Vec<ConvLayer>,
}

/// `p -> q` map with one hidden relu layer of width `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentEncoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Single-layer tanh recurrence `h_i = tanh(s_i Wx + h_{i-1} Wh + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextModel {
    pub wx: Tensor,
    pub wh: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScpcModel {
    pub config: ModelConfig,
    pub frame: FrameEncoder,
    pub segment: SegmentEncoder,
    pub context: ContextModel,
}

/// Frame latents `Z` (`[L, p]`) of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSeq {
    pub id: String,
    pub z: Tensor,
}

impl FrameSeq {
    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.numel() == 0
    }
}

/// Segment representations `S`, their frame spans (inclusive, 0-based) and
/// the context sequence `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSeq {
    pub s: Tensor,
    pub spans: Vec<(usize, usize)>,
    pub c: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape")
}

/// Parameters bound to a tape, in [`ScpcModel::param_names`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub frame: Vec<(Var, Var)>,
    pub seg: [Var; 4],
    pub ctx: [Var; 3],
}

impl BoundParams {
    pub fn all(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.frame.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.extend(self.seg);
        v.extend(self.ctx);
        v
    }
}

impl ScpcModel {
    /// Fan-in scaled uniform weights from `seed`; biases start at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x1417]));
        let (p, q) = (config.p, config.q);
        let mut c_in = 1;
        let layers = KERNELS
            .iter()
            .zip(STRIDES)
            .map(|(&k, stride)| {
                let weight = uniform(&mut rng, &[p, k, c_in], k * c_in);
                c_in = p;
                ConvLayer { weight, bias: Tensor::zeros(&[p]), stride }
            })
            .collect();
        let segment = SegmentEncoder {
            w1: uniform(&mut rng, &[p, q], p),
            b1: Tensor::zeros(&[q]),
            w2: uniform(&mut rng, &[q, q], q),
            b2: Tensor::zeros(&[q]),
        };
        let rb = (1.0 / q as f64).sqrt();
        let mut rec = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-rb..rb)).collect()).expect("shape")
        };
        let context = ContextModel { wx: rec(&[q, q]), wh: rec(&[q, q]), b: Tensor::zeros(&[q]) };
        Self { config, frame: FrameEncoder { layers }, segment, context }
    }

    pub fn param_names() -> Vec<String> {
        let mut names: Vec<String> =
            (0..KERNELS.len()).flat_map(|i| [format!("frame.conv{i}.weight"), format!("frame.conv{i}.bias")]).collect();
        names.extend(["segment.w1", "segment.b1", "segment.w2", "segment.b2"].map(String::from));
        names.extend(["context.wx", "context.wh", "context.b"].map(String::from));
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.frame.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect();
        v.extend([&self.segment.w1, &self.segment.b1, &self.segment.w2, &self.segment.b2]);
        v.extend([&self.context.wx, &self.context.wh, &self.context.b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.frame.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect();
        let s = &mut self.segment;
        v.extend([&mut s.w1, &mut s.b1, &mut s.w2, &mut s.b2]);
        let c = &mut self.context;
        v.extend([&mut c.wx, &mut c.wh, &mut c.b]);
        v
    }

    /// Records every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let frame = self.frame.layers.iter().map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone()))).collect();
        let s = &self.segment;
        let seg = [s.w1.clone(), s.b1.clone(), s.w2.clone(), s.b2.clone()].map(|t| tape.param(t));
        let c = &self.context;
        let ctx = [c.wx.clone(), c.wh.clone(), c.b.clone()].map(|t| tape.param(t));
        BoundParams { frame, seg, ctx }
    }
}

/// Checks rate and length; returns the waveform as a `[T, 1]` tape input.
pub fn waveform_input(tape: &mut Tape, wave: &Waveform) -> Result<Var> {
    if wave.sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate { id: wave.id.clone(), rate: wave.sample_rate });
    }
    if wave.samples.len() < RECEPTIVE_FIELD {
        return Err(Error::TooShort { id: wave.id.clone(), samples: wave.samples.len(), needed: RECEPTIVE_FIELD });
    }
    let t = wave.samples.len();
    let x = Tensor::matrix(t, 1, wave.samples.iter().map(|&s| s as f64).collect())?;
    Ok(tape.constant(x))
}

/// `Z = f_enc(X)` on the tape: `[L, p]`.
pub fn encode_frames_on(tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
    let mut h = x;
    for (&(w, b), &stride) in params.frame.iter().zip(STRIDES.iter()) {
        let y = tape.conv1d(h, w, stride)?;
        let y = tape.add_bias(y, b)?;
        h = tape.relu(y)?;
    }
    Ok(tape.add_scalar(h, LATENT_FLOOR)?)
}

/// Segment encoder applied row-wise to segment means `[M, p] -> [M, q]`.
pub fn encode_segments_on(tape: &mut Tape, params: &BoundParams, means: Var) -> Result<Var> {
    let [w1, b1, w2, b2] = params.seg;
    let h = tape.matmul(means, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, w2)?;
    Ok(tape.add_bias(o, b2)?)
}

/// Runs the recurrence over the rows of `s` from a zero state: `[M, q] -> [M, q]`.
pub fn context_on(tape: &mut Tape, params: &BoundParams, s: Var) -> Result<Var> {
    let [wx, wh, b] = params.ctx;
    let m = tape.value(s).rows();
    let xs = tape.matmul(s, wx)?;
    let xs = tape.add_bias(xs, b)?;
    let mut rows = Vec::with_capacity(m);
    let mut h: Option<Var> = None;
    for i in 0..m {
        let xi = tape.narrow(xs, i, 1)?;
        let pre = match h {
            None => xi,
            Some(prev) => {
                let r = tape.matmul(prev, wh)?;
                tape.add(xi, r)?
            }
        };
        let hi = tape.tanh(pre)?;
        rows.push(hi);
        h = Some(hi);
    }
    Ok(tape.concat_rows(&rows)?)
}

impl ScpcModel {
    /// Frame latents for one 16 kHz utterance.
    pub fn encode_frames(&self, wave: &Waveform) -> Result<FrameSeq> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let x = waveform_input(&mut tape, wave)?;
        let z = encode_frames_on(&mut tape, &params, x)?;
        Ok(FrameSeq { id: wave.id.clone(), z: tape.value(z).clone() })
    }

    /// `[M, p]` segment means to `[M, q]` representations.
    pub fn encode_segments(&self, means: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let m = tape.constant(means.clone());
        let s = encode_segments_on(&mut tape, &params, m)?;
        Ok(tape.value(s).clone())
    }

    /// Context rows `C` for segment representations `S` (`[M, q]`).
    pub fn context(&self, s: &Tensor) -> Result<Tensor> {
        if s.rows() == 0 {
            return Err(Error::Invalid("context needs at least one segment".into()));
        }
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let sv = tape.constant(s.clone());
        let c = context_on(&mut tape, &params, sv)?;
        Ok(tape.value(c).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScpcModel {
        ScpcModel::init(ModelConfig { p: 8, q: 6 }, 1)
    }

    #[test]
    fn geometry() {
        let mut rf = 1;
        let mut jump = 1;
        for (k, s) in KERNELS.iter().zip(STRIDES) {
            rf += (k - 1) * jump;
            jump *= s;
        }
        assert_eq!(rf, RECEPTIVE_FIELD);
        assert_eq!(jump, HOP);
        assert_eq!(frame_count(16000), 98);
        assert_eq!(frame_count(465), 1);
        assert_eq!(frame_count(464), 0);
    }

    #[test]
    fn encode_frames_lengths() {
        let m = small();
        for t in [465usize, 624, 625, 16000] {
            let w = Waveform::new("x", vec![0.1; t], 16000).unwrap();
            assert_eq!(m.encode_frames(&w).unwrap().len(), frame_count(t), "T = {t}");
        }
    }

    #[test]
    fn zero_waveform_gives_identical_rows() {
        let m = small();
        let w = Waveform::new("z", vec![0.0; 2000], 16000).unwrap();
        let z = m.encode_frames(&w).unwrap().z;
        for i in 1..z.rows() {
            assert_eq!(z.row(i), z.row(0));
        }
    }

    #[test]
    fn rejects_short_and_wrong_rate() {
        let m = small();
        let w = Waveform::new("s", vec![0.0; 464], 16000).unwrap();
        assert!(matches!(m.encode_frames(&w), Err(Error::TooShort { .. })));
        let w = Waveform::new("r", vec![0.0; 4000], 44100).unwrap();
        assert!(matches!(m.encode_frames(&w), Err(Error::SampleRate { rate: 44100, .. })));
    }

    #[test]
    fn segment_encoder_rowwise() {
        let m = small();
        let means = Tensor::matrix(3, 8, [vec![0.3; 8], vec![-0.2; 8], vec![0.3; 8]].concat()).unwrap();
        let s = m.encode_segments(&means).unwrap();
        assert_eq!(s.shape(), &[3, 6]);
        assert_eq!(s.row(0), s.row(2));
        let one = m.encode_segments(&Tensor::matrix(1, 8, vec![0.3; 8]).unwrap()).unwrap();
        assert_eq!(one.row(0), s.row(0));
    }

    #[test]
    fn context_is_causal() {
        let m = small();
        let s = Tensor::matrix(4, 6, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let c = m.context(&s).unwrap();
        for i in 1..=4 {
            let prefix = Tensor::matrix(i, 6, s.data()[..i * 6].to_vec()).unwrap();
            let cp = m.context(&prefix).unwrap();
            assert_eq!(cp.data(), &c.data()[..i * 6]);
        }
        let mut s2 = s.clone();
        s2.data_mut()[3 * 6] += 0.5;
        let c2 = m.context(&s2).unwrap();
        assert_eq!(&c2.data()[..18], &c.data()[..18]);
        assert_ne!(&c2.data()[18..], &c.data()[18..]);
    }

    #[test]
    fn param_lists_agree() {
        let mut m = small();
        assert_eq!(ScpcModel::param_names().len(), m.params().len());
        assert_eq!(m.params().len(), m.params_mut().len());
        let mut tape = Tape::new();
        assert_eq!(m.bind(&mut tape).all().len(), m.params().len());
    }
}
