//! Differentiable boundary detection and vectorized segment means.
//!
//! Junction `t` (0-based) sits between frames `t` and `t + 1`. Out-of-range
//! neighbours in the peak functions read as 0, and a constant similarity
//! profile normalizes to `d = 0` everywhere.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gain of the soft (gradient-carrying) boundary path.
pub const SOFT_GAIN: f64 = 10.0;
/// Gain of the hard (forward) boundary path.
pub const HARD_GAIN: f64 = 1000.0;
/// Forward `b` above this value marks a hard boundary.
pub const HARD_THRESHOLD: f64 = 0.5;

/// Adjacent-frame similarities and normalized dissimilarities.
#[derive(Debug, Clone, Copy)]
pub struct DissimVec {
    pub d_s: Var,
    pub d: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct PeakVec {
    pub p1: Var,
    pub p2: Var,
    pub p: Var,
    pub thres: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundaryVec {
    pub b_soft: Var,
    pub b_hard: Var,
    pub b: Var,
}

/// Column-normalized membership matrix `W` (`[L, M]`).
#[derive(Debug, Clone)]
pub struct SegWeightMatrix {
    pub w: Var,
    /// Inclusive frame span of each segment.
    pub spans: Vec<(usize, usize)>,
}

impl SegWeightMatrix {
    pub fn n_segments(&self) -> usize {
        self.spans.len()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.spans.iter().map(|(a, b)| b - a + 1).collect()
    }
}

/// `d_s[t] = sim(z_t, z_{t+1})` and `d = 1 - (d_s - min) / (max - min)`.
pub fn adjacent_dissim(tape: &mut Tape, z: Var) -> Result<DissimVec> {
    let l = tape.value(z).rows();
    if tape.value(z).ndim() != 2 || l < 2 {
        return Err(Error::Invalid(format!("adjacent_dissim needs at least 2 frames, got {l}")));
    }
    let a = tape.narrow(z, 0, l - 1)?;
    let b = tape.narrow(z, 1, l - 1)?;
    let d_s = tape.cosine_sim(a, b)?;
    let d = normalize_on(tape, d_s)?;
    Ok(DissimVec { d_s, d })
}

/// Min-max normalization followed by reflection.
pub fn normalize_on(tape: &mut Tape, d_s: Var) -> Result<Var> {
    let n = tape.value(d_s).numel();
    let lo = tape.min_all(d_s)?;
    let hi = tape.max_all(d_s)?;
    if tape.value(hi).item() == tape.value(lo).item() {
        return Ok(tape.constant(Tensor::vector(vec![0.0; n])));
    }
    let lo_b = tape.broadcast(lo, &[n])?;
    let range = tape.sub(hi, lo)?;
    let range_b = tape.broadcast(range, &[n])?;
    let num = tape.sub(d_s, lo_b)?;
    let frac = tape.div(num, range_b)?;
    let neg = tape.scale(frac, -1.0)?;
    Ok(tape.add_scalar(neg, 1.0)?)
}

/// `min(max(d_t - d_{t-k}, 0), max(d_t - d_{t+k}, 0))`.
fn neighbour_peak(tape: &mut Tape, d: Var, k: isize) -> Result<Var> {
    let before = tape.shift(d, -k)?;
    let after = tape.shift(d, k)?;
    let up = tape.sub(d, before)?;
    let up = tape.relu(up)?;
    let down = tape.sub(d, after)?;
    let down = tape.relu(down)?;
    Ok(tape.min_elem(up, down)?)
}

/// Peak detectors `p1`, `p2` and the thresholded `p`.
pub fn peak_scores(tape: &mut Tape, d: Var, thres: f64) -> Result<PeakVec> {
    if !(0.0..=1.0).contains(&thres) {
        return Err(Error::Threshold(thres));
    }
    let p1 = neighbour_peak(tape, d, 1)?;
    let p2 = neighbour_peak(tape, d, 2)?;
    let wide = tape.max_elem(p1, p2)?;
    let above = tape.add_scalar(wide, -thres)?;
    let above = tape.relu(above)?;
    let p = tape.min_elem(above, p1)?;
    Ok(PeakVec { p1, p2, p, thres })
}

/// `b = b_soft + sg(b_hard - b_soft)` with `b_soft = tanh(10 p)` and
/// `b_hard = tanh(1000 p)`.
pub fn ste_boundaries(tape: &mut Tape, p: Var) -> Result<BoundaryVec> {
    let soft_in = tape.scale(p, SOFT_GAIN)?;
    let b_soft = tape.tanh(soft_in)?;
    let hard_in = tape.scale(p, HARD_GAIN)?;
    let b_hard = tape.tanh(hard_in)?;
    let gap = tape.sub(b_hard, b_soft)?;
    let gap = tape.stop_gradient(gap)?;
    let b = tape.add(b_soft, gap)?;
    Ok(BoundaryVec { b_soft, b_hard, b })
}

/// Builds `W` from boundary values `b` (length `L - 1`).
///
/// Forward values above [`HARD_THRESHOLD`] are snapped to 1 and the rest to
/// 0 through another straight-through step, so the running count
/// `c_t = sum_{i < t} b_i` is integral and `m[t, j] = relu(1 - |c_t - j|)`
/// is exactly one-hot. Columns are normalized to sum to 1.
pub fn build_weight_matrix(tape: &mut Tape, b: Var, frames: usize) -> Result<SegWeightMatrix> {
    let bv = tape.value(b).data().to_vec();
    if bv.len() + 1 != frames {
        return Err(Error::Invalid(format!("{} boundary values for {frames} frames", bv.len())));
    }
    let snapped: Vec<f64> = bv.iter().map(|&x| if x > HARD_THRESHOLD { 1.0 } else { 0.0 }).collect();
    let target = tape.constant(Tensor::vector(snapped.clone()));
    let gap = tape.sub(target, b)?;
    let gap = tape.stop_gradient(gap)?;
    let b01 = tape.add(b, gap)?;

    let mut spans = Vec::new();
    let mut start = 0;
    for (t, &s) in snapped.iter().enumerate() {
        if s == 1.0 {
            spans.push((start, t));
            start = t + 1;
        }
    }
    spans.push((start, frames - 1));
    let m = spans.len();

    let counts = if snapped.is_empty() {
        tape.constant(Tensor::vector(vec![0.0]))
    } else {
        let cs = tape.cumsum(b01)?;
        tape.pad(cs, 1, 0)?
    };
    let cols: Vec<f64> = (0..m).map(|j| j as f64).collect();
    let diff = tape.sub_outer(counts, &cols)?;
    let dist = tape.abs(diff)?;
    let neg = tape.scale(dist, -1.0)?;
    let tri = tape.add_scalar(neg, 1.0)?;
    let member = tape.relu(tri)?;
    let colsum = tape.sum_axis(member, 0)?;
    let w = tape.div_cols(member, colsum)?;
    Ok(SegWeightMatrix { w, spans })
}

/// `W^T Z`: row `j` is the mean of the frames in segment `j`.
pub fn segment_means(tape: &mut Tape, z: Var, w: &SegWeightMatrix) -> Result<Var> {
    let wt = tape.transpose(w.w)?;
    Ok(tape.matmul(wt, z)?)
}

/// Everything the boundary stage produces for one utterance.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub dissim: DissimVec,
    pub peaks: PeakVec,
    pub bounds: BoundaryVec,
    pub weights: SegWeightMatrix,
    pub means: Var,
}

/// Runs the full boundary stage on frame latents `z`.
pub fn segment_on(tape: &mut Tape, z: Var, thres: f64) -> Result<Segmentation> {
    let frames = tape.value(z).rows();
    let dissim = adjacent_dissim(tape, z)?;
    let peaks = peak_scores(tape, dissim.d, thres)?;
    let bounds = ste_boundaries(tape, peaks.p)?;
    let weights = build_weight_matrix(tape, bounds.b, frames)?;
    let means = segment_means(tape, z, &weights)?;
    Ok(Segmentation { dissim, peaks, bounds, weights, means })
}

/// Normalized dissimilarity for a plain similarity vector.
pub fn normalize_dissim(d_s: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(d_s.to_vec()));
    let d = normalize_on(&mut tape, v)?;
    Ok(tape.value(d).data().to_vec())
}

/// `(p1, p2, p)` for a plain dissimilarity vector.
pub fn peak_values(d: &[f64], thres: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(d.to_vec()));
    let pk = peak_scores(&mut tape, v, thres)?;
    let get = |x: Var| tape.value(x).data().to_vec();
    Ok((get(pk.p1), get(pk.p2), get(pk.p)))
}

/// Hard boundary count implied by `p` (values whose forward `b` exceeds 0.5).
pub fn count_hard(p: &[f64]) -> usize {
    p.iter().filter(|&&x| (HARD_GAIN * x).tanh() > HARD_THRESHOLD).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn dissim_examples() {
        assert!(close(&normalize_dissim(&[0.9, 0.1, 0.9]).unwrap(), &[0.0, 1.0, 0.0], 1e-12));
        assert_eq!(normalize_dissim(&[0.5, 0.5]).unwrap(), vec![0.0, 0.0]);
        assert!(close(&normalize_dissim(&[0.0, 0.5, 1.0]).unwrap(), &[1.0, 0.5, 0.0], 1e-12));
    }

    #[test]
    fn dissim_needs_two_frames() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(1, 3, vec![1.0; 3]).unwrap());
        assert!(adjacent_dissim(&mut tape, z).is_err());
    }

    #[test]
    fn peak_examples() {
        let (p1, p2, p) = peak_values(&[0.0, 0.2, 1.0, 0.1, 0.0], 0.05).unwrap();
        assert!(close(&p, &[0.0, 0.0, 0.8, 0.0, 0.0], 1e-12), "{p:?}");
        assert!((p1[2] - 0.8).abs() < 1e-12 && (p2[2] - 1.0).abs() < 1e-12);

        let (_, p2, _) = peak_values(&[0.0, 1.0, 0.0], 0.05).unwrap();
        assert_eq!(p2, vec![0.0, 1.0, 0.0]);
        let (_, _, p) = peak_values(&[0.0, 1.0, 0.0], 0.05).unwrap();
        assert!(close(&p, &[0.0, 0.95, 0.0], 1e-12), "{p:?}");

        let (_, _, p) = peak_values(&[0.3, 1.0, 0.0, 0.7, 0.2], 1.0).unwrap();
        assert!(p.iter().all(|&x| x == 0.0));
        assert!(matches!(peak_values(&[0.0], 1.5), Err(Error::Threshold(_))));
    }

    #[test]
    fn ste_forward_and_backward() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![0.0, 0.8, 0.005]));
        let bv = ste_boundaries(&mut tape, p).unwrap();
        let b = tape.value(bv.b).data().to_vec();
        assert_eq!(b[0], 0.0);
        assert!(b[1] >= 1.0 - 1e-12);
        assert!(b[2] >= 0.9999);
        let l = tape.sum_all(bv.b).unwrap();
        let g = tape.backward(l).unwrap().get(p).unwrap().to_vec();
        assert!((g[0] - 10.0).abs() < 1e-12);
        let want = 10.0 * (1.0 - 8.0f64.tanh().powi(2));
        assert!((g[1] - want).abs() < 1e-18);
        assert!((g[1] - 4.5e-6).abs() < 0.1e-6);
    }

    fn weights_for(b: &[f64]) -> (Vec<f64>, Vec<(usize, usize)>, usize) {
        let mut tape = Tape::new();
        let bv = tape.constant(Tensor::vector(b.to_vec()));
        let w = build_weight_matrix(&mut tape, bv, b.len() + 1).unwrap();
        (tape.value(w.w).data().to_vec(), w.spans.clone(), w.n_segments())
    }

    #[test]
    fn weight_matrix_worked_example() {
        let (w, spans, m) = weights_for(&[0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(m, 2);
        assert_eq!(spans, vec![(0, 3), (4, 5)]);
        let col = |j: usize| (0..6).map(|t| w[t * 2 + j]).collect::<Vec<_>>();
        assert_eq!(col(0), vec![0.25, 0.25, 0.25, 0.25, 0.0, 0.0]);
        assert_eq!(col(1), vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);

        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(6, 1, vec![1.0, 1.0, 1.0, 1.0, 5.0, 7.0]).unwrap());
        let bv = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0, 1.0, 0.0]));
        let wm = build_weight_matrix(&mut tape, bv, 6).unwrap();
        let means = segment_means(&mut tape, z, &wm).unwrap();
        assert_eq!(tape.value(means).data(), &[1.0, 6.0]);
    }

    #[test]
    fn weight_matrix_degenerate_cases() {
        let (w, _, m) = weights_for(&[0.0, 0.0, 0.0]);
        assert_eq!(m, 1);
        assert!(w.iter().all(|&x| x == 0.25));
        let (w, _, m) = weights_for(&[1.0, 1.0]);
        assert_eq!(m, 3);
        assert_eq!(w, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let (w, _, m) = weights_for(&[]);
        assert_eq!((w, m), (vec![1.0], 1));
    }

    #[test]
    fn identity_and_global_means() {
        let zdata = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        for (b, want) in [(vec![1.0, 1.0], zdata.clone()), (vec![0.0, 0.0], vec![3.0, 4.0])] {
            let mut tape = Tape::new();
            let z = tape.constant(Tensor::matrix(3, 2, zdata.clone()).unwrap());
            let bv = tape.constant(Tensor::vector(b));
            let wm = build_weight_matrix(&mut tape, bv, 3).unwrap();
            let means = segment_means(&mut tape, z, &wm).unwrap();
            assert_eq!(tape.value(means).data(), want.as_slice());
        }
    }

    #[test]
    fn soft_values_snap_to_hard_segments() {
        // tanh(1000 * 0.0002) ~ 0.197 stays inside the segment.
        let (_, spans, m) = weights_for(&[(HARD_GAIN * 0.0002f64).tanh(), 1.0]);
        assert_eq!(m, 2);
        assert_eq!(spans, vec![(0, 1), (2, 2)]);
    }
}
