//! Temporal-spatial attention: queries from frame `i`, keys and values from
//! the row-concatenation `[z^{i−1}; z^i]`, all through the unchanged per-frame
//! projections. The first frame uses itself as its predecessor, which makes
//! its output identical to plain self-attention.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Number of frames that feed keys and values.
pub const KV_FRAMES: usize = 2;

/// Per-frame features `(h·w, c)` ordered by frame index.
#[derive(Debug, Clone)]
pub struct FrameFeatureBatch {
    frames: Vec<Array2<f64>>,
}

impl FrameFeatureBatch {
    pub fn new(frames: Vec<Array2<f64>>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Empty("frame feature batch".into()))?;
        let dim = first.dim();
        if let Some(bad) = frames.iter().find(|f| f.dim() != dim) {
            return Err(Error::shape(&[dim.0, dim.1], bad.shape()));
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Array2<f64>] {
        &self.frames
    }
}

/// `W^Q`, `W^K`, `W^V`, each `(c, d)`; features are row vectors, so `Q = Z·W^Q`.
#[derive(Debug, Clone)]
pub struct AttentionProjections {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

impl AttentionProjections {
    fn check(&self, c: usize) -> Result<()> {
        let d = self.wq.ncols();
        for w in [&self.wq, &self.wk] {
            if w.dim() != (c, d) {
                return Err(Error::shape(&[c, d], w.shape()));
            }
        }
        if self.wv.nrows() != c {
            return Err(Error::shape(&[c, self.wv.ncols()], self.wv.shape()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TemporalAttentionOutput {
    /// `(h·w, d_v)` per frame.
    pub outputs: Vec<Array2<f64>>,
    /// `(h·w, 2·h·w)` per frame; columns `0..hw` are the predecessor's sites.
    pub maps: Vec<Array2<f64>>,
}

/// Scaled dot-product attention recorded on a tape.
///
/// `kv` may be the query features themselves (per-frame self-attention) or a
/// row-concatenation of neighbor and own features. Returns `(output, map)`.
pub fn attend(tape: &mut Tape<'_>, queries: Var, kv: Var, wq: Var, wk: Var, wv: Var) -> (Var, Var) {
    let q = tape.matmul(queries, wq);
    let k = tape.matmul(kv, wk);
    let v = tape.matmul(kv, wv);
    let d = tape.value(q).ncols() as f64;
    let scores = tape.matmul_nt(q, k);
    let scores = tape.scale(scores, 1.0 / d.sqrt());
    let map = tape.softmax_rows(scores);
    let out = tape.matmul(map, v);
    (out, map)
}

fn attend_frame(prev: &Array2<f64>, cur: &Array2<f64>, proj: &AttentionProjections) -> (Array2<f64>, Array2<f64>) {
    let mut tape = Tape::new();
    let (p, c) = (tape.param(prev), tape.param(cur));
    let kv = tape.concat_rows(p, c);
    let (wq, wk, wv) = (tape.param(&proj.wq), tape.param(&proj.wk), tape.param(&proj.wv));
    let (out, map) = attend(&mut tape, c, kv, wq, wk, wv);
    (tape.value(out).clone(), tape.value(map).clone())
}

/// Plain per-frame self-attention, `(output, map)` with map `(h·w, h·w)`.
pub fn self_attention(z: &Array2<f64>, proj: &AttentionProjections) -> Result<(Array2<f64>, Array2<f64>)> {
    proj.check(z.ncols())?;
    let mut tape = Tape::new();
    let x = tape.param(z);
    let (wq, wk, wv) = (tape.param(&proj.wq), tape.param(&proj.wk), tape.param(&proj.wv));
    let (out, map) = attend(&mut tape, x, x, wq, wk, wv);
    Ok((tape.value(out).clone(), tape.value(map).clone()))
}

pub fn temporal_spatial_attention(batch: &FrameFeatureBatch, proj: &AttentionProjections) -> Result<TemporalAttentionOutput> {
    if batch.is_empty() {
        return Err(Error::Empty("frame feature batch".into()));
    }
    proj.check(batch.frames[0].ncols())?;
    let frames = &batch.frames;
    let (outputs, maps) = (0..frames.len()).into_par_iter().map(|i| attend_frame(&frames[i.saturating_sub(1)], &frames[i], proj)).unzip();
    Ok(TemporalAttentionOutput { outputs, maps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn projections(seed: u64, c: usize) -> AttentionProjections {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionProjections { wq: rand_mat(&mut rng, c, c), wk: rand_mat(&mut rng, c, c), wv: rand_mat(&mut rng, c, c) }
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Scalar-loop attention used as an independent oracle.
    fn brute_force(q_in: &[Vec<f64>], kv_in: &[Vec<f64>], p: &AttentionProjections) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let proj =
            |x: &Vec<f64>, w: &Array2<f64>| -> Vec<f64> { (0..w.ncols()).map(|j| (0..x.len()).map(|k| x[k] * w[[k, j]]).sum()).collect() };
        let d = p.wq.ncols() as f64;
        let keys: Vec<_> = kv_in.iter().map(|x| proj(x, &p.wk)).collect();
        let vals: Vec<_> = kv_in.iter().map(|x| proj(x, &p.wv)).collect();
        let mut outs = Vec::new();
        let mut maps = Vec::new();
        for x in q_in {
            let q = proj(x, &p.wq);
            let scores: Vec<f64> = keys.iter().map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let w: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
            let o = (0..vals[0].len()).map(|j| w.iter().zip(&vals).map(|(a, v)| a * v[j]).sum()).collect();
            outs.push(o);
            maps.push(w);
        }
        (outs, maps)
    }

    #[test]
    fn hand_built_two_frames_match_brute_force() {
        let p = AttentionProjections {
            wq: Array2::from_shape_vec((2, 2), vec![1.0, 0.5, -0.3, 0.8]).unwrap(),
            wk: Array2::from_shape_vec((2, 2), vec![0.2, -1.0, 0.7, 0.4]).unwrap(),
            wv: Array2::from_shape_vec((2, 2), vec![1.5, 0.0, -0.5, 2.0]).unwrap(),
        };
        let f1 = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let f2 = vec![vec![0.5, -1.0], vec![2.0, 0.25]];
        let to_mat = |f: &Vec<Vec<f64>>| Array2::from_shape_fn((2, 2), |(r, c)| f[r][c]);
        let batch = FrameFeatureBatch::new(vec![to_mat(&f1), to_mat(&f2)]).unwrap();
        let out = temporal_spatial_attention(&batch, &p).unwrap();

        let kv1: Vec<_> = f1.iter().chain(f1.iter()).cloned().collect();
        let kv2: Vec<_> = f1.iter().chain(f2.iter()).cloned().collect();
        for (i, (q, kv)) in [(&f1, kv1), (&f2, kv2)].into_iter().enumerate() {
            let (o, m) = brute_force(q, &kv, &p);
            for r in 0..2 {
                for c in 0..2 {
                    assert!((out.outputs[i][[r, c]] - o[r][c]).abs() < 1e-12);
                }
                for c in 0..4 {
                    assert!((out.maps[i][[r, c]] - m[r][c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_frame_equals_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = projections(2, 8);
        let z = rand_mat(&mut rng, 16, 8);
        let out = temporal_spatial_attention(&FrameFeatureBatch::new(vec![z.clone()]).unwrap(), &p).unwrap();
        let (plain, _) = self_attention(&z, &p).unwrap();
        assert!(max_abs_diff(&out.outputs[0], &plain) < 1e-6);
    }

    #[test]
    fn identical_frames_match_per_frame_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = projections(4, 6);
        let z = rand_mat(&mut rng, 9, 6);
        let out = temporal_spatial_attention(&FrameFeatureBatch::new(vec![z.clone(); 4]).unwrap(), &p).unwrap();
        let (plain, _) = self_attention(&z, &p).unwrap();
        for o in &out.outputs {
            assert!(max_abs_diff(o, &plain) < 1e-6);
        }
    }

    #[test]
    fn maps_have_two_frames_of_columns_and_unit_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = projections(6, 4);
        let frames = (0..3).map(|_| rand_mat(&mut rng, 12, 4)).collect();
        let out = temporal_spatial_attention(&FrameFeatureBatch::new(frames).unwrap(), &p).unwrap();
        for m in &out.maps {
            assert_eq!(m.dim(), (12, KV_FRAMES * 12));
            for row in m.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-5);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn output_depends_only_on_self_and_predecessor() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = projections(8, 4);
        let frames: Vec<_> = (0..5).map(|_| rand_mat(&mut rng, 6, 4)).collect();
        let base = temporal_spatial_attention(&FrameFeatureBatch::new(frames.clone()).unwrap(), &p).unwrap();
        for j in 0..5 {
            let mut pert = frames.clone();
            pert[j][[2, 1]] += 0.5;
            let out = temporal_spatial_attention(&FrameFeatureBatch::new(pert).unwrap(), &p).unwrap();
            for i in 0..5 {
                let same = out.outputs[i] == base.outputs[i];
                assert_eq!(same, i != j && i != j + 1, "frame {i} after perturbing {j}");
            }
        }
    }

    #[test]
    fn errors() {
        assert!(FrameFeatureBatch::new(vec![]).is_err());
        assert!(FrameFeatureBatch::new(vec![Array2::zeros((4, 2)), Array2::zeros((4, 3))]).is_err());
        let batch = FrameFeatureBatch::new(vec![Array2::zeros((4, 3))]).unwrap();
        assert!(temporal_spatial_attention(&batch, &projections(0, 2)).is_err());
    }
}
