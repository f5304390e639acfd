//! Polyline subgraph encoder and global interaction pass.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Attention, Mat, Mlp2, ParamStore, Tape, Var};
use crate::scene::{ElementKind, PolyVector, PolylineSet, TurnDirection, LAST_OBS};

/// Width of the per-vector input feature.
pub const VECTOR_WIDTH: usize = 16;

/// start, end, end - start (scaled), kind one-hot, intersection flag,
/// turn one-hot, normalized timestamp, zero padding.
pub fn vector_features(v: &PolyVector, coord_scale: f64) -> [f64; VECTOR_WIDTH] {
    let mut f = [0.0; VECTOR_WIDTH];
    let s = 1.0 / coord_scale;
    f[0] = v.start.x * s;
    f[1] = v.start.y * s;
    f[2] = v.end.x * s;
    f[3] = v.end.y * s;
    f[4] = (v.end.x - v.start.x) * s;
    f[5] = (v.end.y - v.start.y) * s;
    f[6 + match v.kind {
        ElementKind::Lane => 0,
        ElementKind::AgentOfInterest => 1,
        ElementKind::Agent => 2,
    }] = 1.0;
    f[9] = f64::from(u8::from(v.is_intersection));
    f[10 + match v.turn {
        TurnDirection::None => 0,
        TurnDirection::Left => 1,
        TurnDirection::Right => 2,
    }] = 1.0;
    f[13] = v.timestamp.map_or(0.0, |t| t as f64 / LAST_OBS as f64);
    f
}

/// Stacked vector features of every non-empty polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct PolylineBatch {
    pub features: Mat,
    /// Vector count of each non-empty polyline, in node order.
    pub lengths: Vec<usize>,
    /// For every node, its row among the non-empty polylines (`None` if empty).
    pub node_rows: Vec<Option<usize>>,
}

impl PolylineBatch {
    pub fn new(set: &PolylineSet, coord_scale: f64) -> Self {
        let total: usize = set.polylines.iter().map(|p| p.vectors.len()).sum();
        let mut data = Vec::with_capacity(total * VECTOR_WIDTH);
        let mut lengths = Vec::new();
        let mut node_rows = Vec::with_capacity(set.polylines.len());
        for p in &set.polylines {
            if p.vectors.is_empty() {
                node_rows.push(None);
                continue;
            }
            node_rows.push(Some(lengths.len()));
            lengths.push(p.vectors.len());
            for v in &p.vectors {
                data.extend_from_slice(&vector_features(v, coord_scale));
            }
        }
        PolylineBatch {
            features: Mat {
                rows: total,
                cols: VECTOR_WIDTH,
                data,
            },
            lengths,
            node_rows,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.node_rows.len()
    }
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub subgraph: Vec<Mlp2>,
    pub global: Attention,
    pub dim: usize,
}

impl ContextEncoder {
    pub fn new(store: &mut ParamStore, dim: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let subgraph = (0..layers)
            .map(|l| {
                let input = if l == 0 { VECTOR_WIDTH } else { 2 * dim };
                Mlp2::new(store, &format!("context.subgraph{l}"), input, dim, dim, rng)
            })
            .collect();
        ContextEncoder {
            subgraph,
            global: Attention::new(store, "context.global", dim, rng),
            dim,
        }
    }

    /// Subgraph layers over stacked polylines; returns one L2-normalized row
    /// per segment of `lengths`.
    pub fn encode_segments(&self, tape: &mut Tape, features: Var, lengths: &[usize]) -> Result<Var> {
        let owner: Vec<usize> = lengths
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| std::iter::repeat_n(i, l))
            .collect();
        let mut x = features;
        let last = self.subgraph.len() - 1;
        for (l, layer) in self.subgraph.iter().enumerate() {
            let h = layer.forward(tape, x)?;
            let pooled = tape.segment_max_pool(h, lengths)?;
            if l == last {
                return Ok(tape.l2_normalize_rows(pooled));
            }
            let broadcast = tape.gather_rows(pooled, &owner)?;
            x = tape.concat_cols(&[h, broadcast])?;
        }
        unreachable!("encoder has at least one subgraph layer")
    }

    /// Encodes a single polyline given as a `vectors x VECTOR_WIDTH` matrix.
    pub fn encode_polyline(&self, tape: &mut Tape, vectors: &Mat) -> Result<Vec<f64>> {
        if vectors.rows == 0 {
            return Ok(vec![0.0; self.dim]);
        }
        let x = tape.constant(vectors.clone());
        let out = self.encode_segments(tape, x, &[vectors.rows])?;
        Ok(tape.value(out).data.clone())
    }

    /// Node features before global interaction; empty polylines get zero rows.
    pub fn encode_polylines(&self, tape: &mut Tape, batch: &PolylineBatch) -> Result<Var> {
        let x = tape.constant(batch.features.clone());
        let pooled = self.encode_segments(tape, x, &batch.lengths)?;
        if batch.node_rows.iter().all(Option::is_some) {
            return Ok(pooled);
        }
        let zero = tape.constant(Mat::zeros(1, self.dim));
        let padded = tape.concat_rows(&[pooled, zero])?;
        let rows: Vec<usize> = batch
            .node_rows
            .iter()
            .map(|r| r.unwrap_or(batch.lengths.len()))
            .collect();
        tape.gather_rows(padded, &rows)
    }

    /// One unmasked single-head self-attention pass.
    pub fn global_interaction(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        self.global.self_attend(tape, features, None)
    }

    pub fn forward(&self, tape: &mut Tape, batch: &PolylineBatch) -> Result<Var> {
        let f = self.encode_polylines(tape, batch)?;
        self.global_interaction(tape, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mat, ParamStore};
    use crate::scene::Point2;
    use rand::{Rng, SeedableRng};

    fn encoder(dim: usize) -> (ParamStore, ContextEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let enc = ContextEncoder::new(&mut store, dim, 3, &mut rng);
        (store, enc)
    }

    fn random_vectors(rows: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * VECTOR_WIDTH).map(|_| rng.random_range(-1.0..1.0)).collect();
        Mat::from_vec(rows, VECTOR_WIDTH, data).unwrap()
    }

    #[test]
    fn feature_layout() {
        let v = PolyVector {
            start: Point2::new(10.0, 0.0),
            end: Point2::new(20.0, -10.0),
            kind: ElementKind::Agent,
            is_intersection: true,
            turn: TurnDirection::Right,
            timestamp: Some(LAST_OBS),
            element: 0,
        };
        let f = vector_features(&v, 10.0);
        assert_eq!(&f[..6], &[1.0, 0.0, 2.0, -1.0, 1.0, -1.0]);
        assert_eq!(&f[6..14], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(&f[14..], &[0.0, 0.0]);
    }

    #[test]
    fn polyline_output_is_unit_norm_and_order_free() {
        let (store, enc) = encoder(12);
        let m = random_vectors(7, 1);
        let mut tape = Tape::new(&store);
        let a = enc.encode_polyline(&mut tape, &m).unwrap();
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let order = [3, 0, 6, 2, 5, 1, 4];
        let rows: Vec<Vec<f64>> = order.iter().map(|&r| m.row(r).to_vec()).collect();
        let b = enc.encode_polyline(&mut tape, &Mat::from_rows(&rows).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_vector_pool_is_its_own_encoding() {
        let (store, enc) = encoder(6);
        let m = random_vectors(1, 2);
        let mut tape = Tape::new(&store);
        let out = enc.encode_polyline(&mut tape, &m).unwrap();
        // Manual pass: every pool of one row is that row.
        let mut x = tape.constant(m.clone());
        let mut h = x;
        for (l, layer) in enc.subgraph.iter().enumerate() {
            h = layer.forward(&mut tape, x).unwrap();
            if l + 1 < enc.subgraph.len() {
                x = tape.concat_cols(&[h, h]).unwrap();
            }
        }
        let v = tape.value(h).data.clone();
        let n: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for (a, b) in out.iter().zip(&v) {
            assert!((a - b / n).abs() < 1e-12);
        }
        assert!(enc.encode_polyline(&mut tape, &Mat::zeros(0, VECTOR_WIDTH)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn global_interaction_examples() {
        let (mut store, enc) = encoder(3);
        store.set(enc.global.wq, &[0.0; 9]).unwrap();
        store.set(enc.global.wk, &[0.0; 9]).unwrap();
        store.set(enc.global.wv, &Mat::identity(3).data).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![3.0, 0.0, -3.0]]).unwrap());
        let y = enc.global_interaction(&mut tape, x).unwrap();
        for r in 0..2 {
            assert_eq!(tape.value(y).row(r), &[2.0, 1.0, 0.0]);
        }
    }
}
