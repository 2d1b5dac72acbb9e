//! Sequence machinery around the transport problem: frame stacking, the
//! two-layer adapter, unique target extraction and similarity-based compression.

use serde::Serialize;

use crate::autodiff::{cosine, Backend, Eager, Tape, Var};
use crate::corpus::SplitMix64;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::ot::build_cost;

pub const DEFAULT_UNIQUENESS_THRESHOLD: f64 = 0.999;
pub const DEFAULT_COMPRESSION_THRESHOLD: f64 = 0.9;

/// Concatenates every `k` consecutive rows into one; trailing `n_s mod k` rows are dropped.
pub fn stack_frames(raw: &Matrix, k: usize) -> Result<Matrix> {
    if k == 0 {
        return Err(Error::Contract("stacking factor k must be at least 1".into()));
    }
    let (n, d) = raw.shape();
    if n < k {
        return Err(Error::Degenerate(format!(
            "cannot stack {n} frames with k = {k}: empty output"
        )));
    }
    let q = n / k;
    // row-major storage makes this a reshape of the retained prefix
    Ok(Matrix::from_vec_unchecked(q, d * k, raw.data()[..q * k * d].to_vec()))
}

/// Weights of `linear(relu(linear(h)))`; biases are `1 x width` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<V> {
    pub w1: V,
    pub b1: V,
    pub w2: V,
    pub b2: V,
}

pub type AdapterParams = Adapter<Matrix>;

impl AdapterParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            w1: Matrix::zeros(input_dim, hidden_dim),
            b1: Matrix::zeros(1, hidden_dim),
            w2: Matrix::zeros(hidden_dim, output_dim),
            b2: Matrix::zeros(1, output_dim),
        }
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
    pub fn init(rng: &mut SplitMix64, input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| bound * rng.next_signed_unit())
        };
        let w1 = uniform(input_dim, hidden_dim);
        let w2 = uniform(hidden_dim, output_dim);
        Self {
            w1,
            b1: Matrix::zeros(1, hidden_dim),
            w2,
            b2: Matrix::zeros(1, output_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (i, h) = self.w1.shape();
        let (h2, o) = self.w2.shape();
        let ok = self.b1.shape() == (1, h) && h2 == h && self.b2.shape() == (1, o);
        if !ok {
            return Err(Error::Dimension {
                op: "adapter params",
                lhs: (i, h),
                rhs: (h2, o),
            });
        }
        for m in self.as_slice() {
            if !m.is_finite() {
                return Err(Error::NonFinite("adapter params"));
            }
        }
        Ok(())
    }

    pub fn as_slice(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    /// Registers all four tensors as tape parameters, in `w1, b1, w2, b2` order.
    pub fn register(&self, tape: &mut Tape) -> Adapter<Var> {
        Adapter {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
        }
    }

    pub fn from_vec(mut v: Vec<Matrix>) -> Result<Self> {
        if v.len() != 4 {
            return Err(Error::Contract(format!("adapter needs 4 tensors, got {}", v.len())));
        }
        let b2 = v.pop().unwrap();
        let w2 = v.pop().unwrap();
        let b1 = v.pop().unwrap();
        let w1 = v.pop().unwrap();
        let p = Self { w1, b1, w2, b2 };
        p.validate()?;
        Ok(p)
    }

    /// `self -= rate * grads` for gradients in `w1, b1, w2, b2` order.
    pub fn descend(&mut self, grads: &[Matrix], rate: f64) {
        let targets = [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2];
        for (p, g) in targets.into_iter().zip(grads) {
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= rate * d;
            }
        }
    }
}

/// `F = relu(h w1 + b1) w2 + b2`.
pub fn adapter_forward_on<B: Backend>(b: &mut B, h: &B::Var, p: &Adapter<B::Var>) -> Result<B::Var> {
    let z = b.matmul(h, &p.w1)?;
    let z = b.add(&z, &p.b1)?;
    let a = b.relu(&z)?;
    let y = b.matmul(&a, &p.w2)?;
    b.add(&y, &p.b2)
}

pub fn adapter_forward(h: &Matrix, p: &AdapterParams) -> Result<Matrix> {
    let mut e = Eager;
    let vars = Adapter {
        w1: p.w1.clone(),
        b1: p.b1.clone(),
        w2: p.w2.clone(),
        b2: p.b2.clone(),
    };
    adapter_forward_on(&mut e, h, &vars)
}

/// Where a row of the unique target set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    /// Row index into the transcript embeddings.
    Transcript(usize),
    Pad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniqueTargetSet {
    pub embeddings: Matrix,
    pub sources: Vec<TargetSource>,
    /// Row of `embeddings` that stands for the pad token.
    pub pad_row_index: usize,
}

impl UniqueTargetSet {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

fn check_threshold(t: f64, name: &str) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Contract(format!("{name} must lie in (0, 1], got {t}")));
    }
    Ok(())
}

fn check_nonzero_rows(m: &Matrix, what: &str) -> Result<()> {
    if let Some(i) = m.row_norms().iter().position(|&n| n == 0.0) {
        return Err(Error::Degenerate(format!("{what} row {i} has zero norm")));
    }
    Ok(())
}

/// Deduplicates `[transcript; pad]` by cosine similarity, keeping first occurrences.
///
/// A row is kept iff its similarity to every previously kept row is below
/// `threshold`. If a transcript row already duplicates `pad`, that row becomes
/// the pad representative instead of appending another one.
pub fn unique_targets(transcript: &Matrix, pad: &[f64], threshold: f64) -> Result<UniqueTargetSet> {
    check_threshold(threshold, "uniqueness threshold")?;
    if transcript.cols() != pad.len() && transcript.rows() > 0 {
        return Err(Error::Dimension {
            op: "unique_targets",
            lhs: transcript.shape(),
            rhs: (1, pad.len()),
        });
    }
    check_nonzero_rows(transcript, "transcript")?;
    if pad.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("pad embedding has zero norm".into()));
    }

    let mut kept: Vec<usize> = Vec::new();
    let mut sources = Vec::new();
    let candidates = (0..transcript.rows())
        .map(|i| (transcript.row(i), TargetSource::Transcript(i)))
        .chain(std::iter::once((pad, TargetSource::Pad)));

    let mut rows: Vec<&[f64]> = Vec::new();
    let mut pad_row_index = None;
    for (row, source) in candidates {
        let dup = rows
            .iter()
            .position(|k| cosine(k, row).expect("nonzero rows checked") >= threshold);
        match (dup, source) {
            (None, _) => {
                if source == TargetSource::Pad {
                    pad_row_index = Some(rows.len());
                }
                rows.push(row);
                sources.push(source);
                if let TargetSource::Transcript(i) = source {
                    kept.push(i);
                }
            }
            (Some(k), TargetSource::Pad) => pad_row_index = Some(k),
            (Some(_), TargetSource::Transcript(_)) => {}
        }
    }
    let cols = pad.len();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in &rows {
        data.extend_from_slice(r);
    }
    Ok(UniqueTargetSet {
        embeddings: Matrix::from_vec_unchecked(rows.len(), cols, data),
        sources,
        pad_row_index: pad_row_index.expect("pad is always considered"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionReport {
    pub input_length: usize,
    pub after_merge: usize,
    pub after_drop: usize,
    /// Input row pairs that were averaged into one row.
    pub merged_pair_indices: Vec<(usize, usize)>,
    /// Positions in the merged sequence that were removed as pad-like.
    pub dropped_indices: Vec<usize>,
    /// Cosine similarity to pad of each dropped row, parallel to `dropped_indices`.
    pub dropped_pad_similarity: Vec<f64>,
}

/// Pairwise merge of near-duplicate adjacent rows, then removal of pad-like rows.
///
/// Rows are paired as `(0, 1), (2, 3), ...`; a pair whose cosine similarity
/// exceeds `merge_threshold` is replaced by its mean. Any surviving row whose
/// similarity to `pad` exceeds `drop_threshold` is then removed. Both steps are
/// products with constant selection matrices, so gradients flow to the kept rows.
pub fn ot_compress_on<B: Backend>(
    b: &mut B,
    f: &B::Var,
    pad: &[f64],
    merge_threshold: f64,
    drop_threshold: f64,
) -> Result<(B::Var, CompressionReport)> {
    check_threshold(merge_threshold, "merge threshold")?;
    check_threshold(drop_threshold, "drop threshold")?;
    let (n, d) = b.value(f).shape();
    if d != pad.len() && n > 0 {
        return Err(Error::Dimension {
            op: "ot_compress",
            lhs: (n, d),
            rhs: (1, pad.len()),
        });
    }

    let mut merge_rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut merged_pairs = Vec::new();
    {
        let fv = b.value(f);
        let mut i = 0;
        while i < n {
            if i + 1 < n {
                let sim = cosine(fv.row(i), fv.row(i + 1));
                if sim.is_some_and(|s| s > merge_threshold) {
                    merge_rows.push(vec![(i, 0.5), (i + 1, 0.5)]);
                    merged_pairs.push((i, i + 1));
                } else {
                    merge_rows.push(vec![(i, 1.0)]);
                    merge_rows.push(vec![(i + 1, 1.0)]);
                }
            } else {
                merge_rows.push(vec![(i, 1.0)]);
            }
            i += 2;
        }
    }
    let after_merge = merge_rows.len();
    let mut select = Matrix::zeros(after_merge, n);
    for (r, entries) in merge_rows.iter().enumerate() {
        for &(c, w) in entries {
            select.set(r, c, w);
        }
    }
    let select = b.constant(select);
    let merged = b.matmul(&select, f)?;

    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    let mut dropped_sim = Vec::new();
    {
        let mv = b.value(&merged);
        for r in 0..after_merge {
            match cosine(mv.row(r), pad) {
                Some(s) if s > drop_threshold => {
                    dropped.push(r);
                    dropped_sim.push(s);
                }
                _ => keep.push(r),
            }
        }
    }
    let mut pick = Matrix::zeros(keep.len(), after_merge);
    for (r, &c) in keep.iter().enumerate() {
        pick.set(r, c, 1.0);
    }
    let pick = b.constant(pick);
    let out = b.matmul(&pick, &merged)?;
    let report = CompressionReport {
        input_length: n,
        after_merge,
        after_drop: keep.len(),
        merged_pair_indices: merged_pairs,
        dropped_indices: dropped,
        dropped_pad_similarity: dropped_sim,
    };
    Ok((out, report))
}

pub fn ot_compress(
    f: &Matrix,
    pad: &[f64],
    merge_threshold: f64,
    drop_threshold: f64,
) -> Result<(Matrix, CompressionReport)> {
    ot_compress_on(&mut Eager, f, pad, merge_threshold, drop_threshold)
}

/// `1 - cos(f_i, t_j)` for heatmaps; the same formula as the transport cost.
pub fn pairwise_distance_map(f: &Matrix, t: &Matrix) -> Result<Matrix> {
    build_cost(f, t).map(|c| c.into_matrix())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[&[f64]]) -> Matrix {
        Matrix::from_rows(r).unwrap()
    }

    #[test]
    fn stacking_shapes() {
        let raw = Matrix::from_fn(10, 4, |i, j| (i * 4 + j) as f64);
        let h = stack_frames(&raw, 5).unwrap();
        assert_eq!(h.shape(), (2, 20));
        assert_eq!(h.row(1)[0], 20.0);
        assert_eq!(stack_frames(&raw, 1).unwrap(), raw);
        let raw11 = Matrix::from_fn(11, 4, |i, _| i as f64);
        let h = stack_frames(&raw11, 5).unwrap();
        assert_eq!(h.rows(), 2);
        assert!(h.data().iter().all(|&v| v < 10.0));
        assert!(matches!(stack_frames(&Matrix::zeros(3, 2), 5), Err(Error::Degenerate(_))));
        assert!(stack_frames(&raw, 0).is_err());
    }

    #[test]
    fn adapter_constant_output_with_zero_weights() {
        let mut p = AdapterParams::zeros(3, 4, 2);
        p.b2 = rows(&[&[0.5, -1.5]]);
        let out = adapter_forward(&rows(&[&[1.0, 2.0, 3.0], &[-1.0, 0.0, 4.0]]), &p).unwrap();
        assert_eq!(out, rows(&[&[0.5, -1.5], &[0.5, -1.5]]));
    }

    #[test]
    fn adapter_identity_on_nonnegative_input() {
        let p = AdapterParams {
            w1: Matrix::identity(3),
            b1: Matrix::zeros(1, 3),
            w2: Matrix::identity(3),
            b2: Matrix::zeros(1, 3),
        };
        let h = rows(&[&[0.0, 1.0, 2.5], &[3.0, 0.5, 0.0]]);
        assert_eq!(adapter_forward(&h, &p).unwrap(), h);
        assert!(matches!(
            adapter_forward(&rows(&[&[1.0, 2.0]]), &p),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn banana_has_four_targets() {
        let b = [1.0, 0.0, 0.0, 0.0];
        let a = [0.0, 1.0, 0.0, 0.0];
        let n = [0.0, 0.0, 1.0, 0.0];
        let pad = [0.0, 0.0, 0.0, 1.0];
        let t = rows(&[&b, &a, &n, &a, &n, &a]);
        let u = unique_targets(&t, &pad, DEFAULT_UNIQUENESS_THRESHOLD).unwrap();
        assert_eq!(u.len(), 4);
        assert_eq!(
            u.sources,
            vec![
                TargetSource::Transcript(0),
                TargetSource::Transcript(1),
                TargetSource::Transcript(2),
                TargetSource::Pad
            ]
        );
        assert_eq!(u.pad_row_index, 3);
    }

    #[test]
    fn single_token_plus_pad() {
        let u = unique_targets(&rows(&[&[1.0, 0.0]]), &[0.0, 1.0], 0.999).unwrap();
        assert_eq!(u.len(), 2);
    }

    #[test]
    fn transcript_row_can_represent_pad() {
        let u = unique_targets(&rows(&[&[1.0, 0.0], &[0.0, 2.0]]), &[0.0, 1.0], 0.999).unwrap();
        assert_eq!(u.len(), 2);
        assert_eq!(u.pad_row_index, 1);
        assert_eq!(u.sources[1], TargetSource::Transcript(1));
    }

    #[test]
    fn unique_rejects_zero_rows_and_bad_threshold() {
        let t = rows(&[&[0.0, 0.0]]);
        assert!(matches!(unique_targets(&t, &[1.0, 0.0], 0.9), Err(Error::Degenerate(_))));
        let t = rows(&[&[1.0, 0.0]]);
        assert!(unique_targets(&t, &[0.0, 0.0], 0.9).is_err());
        assert!(unique_targets(&t, &[0.0, 1.0], 0.0).is_err());
        assert!(unique_targets(&t, &[0.0, 1.0], 1.5).is_err());
    }

    #[test]
    fn compress_drops_pad_like_rows() {
        let h = [1.0, 0.0, 0.0];
        let i = [0.0, 1.0, 0.0];
        let pad = [0.0, 0.0, 1.0];
        let (k, rep) = ot_compress(&rows(&[&h, &pad, &i]), &pad, 0.9, 0.9).unwrap();
        assert_eq!(k, rows(&[&h, &i]));
        assert_eq!(rep.after_merge, 3);
        assert_eq!(rep.dropped_indices, vec![1]);
    }

    #[test]
    fn compress_merges_pairs_only() {
        let e = |v: usize| {
            let mut r = vec![0.0; 5];
            r[v] = 1.0;
            r
        };
        let pad = e(4);
        // h h e e l l l l o o
        let seq: Vec<Vec<f64>> = [0, 0, 1, 1, 2, 2, 2, 2, 3, 3].iter().map(|&t| e(t)).collect();
        let (k, rep) = ot_compress(&Matrix::from_rows(&seq).unwrap(), &pad, 0.9, 0.9).unwrap();
        assert_eq!(k.rows(), 5);
        assert_eq!(rep.merged_pair_indices.len(), 5);
        let decoded: Vec<usize> = k.row_argmax();
        assert_eq!(decoded, vec![0, 1, 2, 2, 3]);
    }

    #[test]
    fn compress_odd_length_passthrough() {
        let m = rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[1.0, 1.0, 0.0]]);
        let (k, rep) = ot_compress(&m, &[0.0, 0.0, 1.0], 0.9, 0.9).unwrap();
        assert_eq!(k, m);
        assert_eq!(rep.after_drop, 3);
    }

    #[test]
    fn compress_all_pad_is_empty() {
        let pad = [0.0, 1.0];
        let m = rows(&[&pad, &[0.0, 2.0], &pad]);
        let (k, rep) = ot_compress(&m, &pad, 0.9, 0.9).unwrap();
        assert_eq!(k.rows(), 0);
        assert_eq!(rep.after_drop, 0);
        assert_eq!(rep.after_merge, 2);
    }

    #[test]
    fn distance_map_anchors() {
        let f = rows(&[&[1.0, 0.0], &[0.0, 3.0]]);
        let t = rows(&[&[1.0, 0.0]]);
        let d = pairwise_distance_map(&f, &t).unwrap();
        assert_eq!(d.data(), &[0.0, 1.0]);
    }
}
