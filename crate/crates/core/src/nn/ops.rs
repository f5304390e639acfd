//! Standalone evaluation of the differentiable primitives on plain values.
//!
//! These bind their weights as constants on a throwaway tape and reuse the
//! same composites as the trainable layers.

use super::layers::{
    affine_vars, attention_vars, gru_vars, mlp2_vars, AffineVars, AttentionVars, GruVars,
    Mlp2Vars,
};
use super::mat::Mat;
use super::tape::{AttentionMask, Tape};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AffineWeights {
    /// (out, in)
    pub w: Mat,
    pub b: Vec<f64>,
}

impl AffineWeights {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        AffineWeights {
            w: Mat::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AffineVars {
        AffineVars {
            w: tape.constant(self.w.clone()),
            b: Some(tape.constant(Mat::row_vector(self.b.clone()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2Weights {
    pub first: AffineWeights,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub second: AffineWeights,
}

impl Mlp2Weights {
    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Mlp2Weights {
            first: AffineWeights::zeros(in_dim, hidden),
            gain: vec![0.0; hidden],
            bias: vec![0.0; hidden],
            second: AffineWeights::zeros(hidden, out_dim),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Mlp2Vars {
        Mlp2Vars {
            first: self.first.bind(tape),
            gain: tape.constant(Mat::row_vector(self.gain.clone())),
            bias: tape.constant(Mat::row_vector(self.bias.clone())),
            second: self.second.bind(tape),
        }
    }
}

/// `W_Q`, `W_K`, `W_V`, each d x d.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
}

impl AttentionWeights {
    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            wq: tape.constant(self.wq.clone()),
            wk: tape.constant(self.wk.clone()),
            wv: tape.constant(self.wv.clone()),
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        for m in [&self.wq, &self.wk, &self.wv] {
            if m.shape() != (d, d) {
                return Err(Error::shape(
                    "attention",
                    format!("projection {:?} for feature width {d}", m.shape()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruWeights {
    pub w_z: Mat,
    pub u_z: Mat,
    pub b_z: Vec<f64>,
    pub w_r: Mat,
    pub u_r: Mat,
    pub b_r: Vec<f64>,
    pub w_h: Mat,
    pub u_h: Mat,
    pub b_h: Vec<f64>,
}

impl GruWeights {
    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        GruWeights {
            w_z: Mat::zeros(hidden, in_dim),
            u_z: Mat::zeros(hidden, hidden),
            b_z: vec![0.0; hidden],
            w_r: Mat::zeros(hidden, in_dim),
            u_r: Mat::zeros(hidden, hidden),
            b_r: vec![0.0; hidden],
            w_h: Mat::zeros(hidden, in_dim),
            u_h: Mat::zeros(hidden, hidden),
            b_h: vec![0.0; hidden],
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> GruVars {
        let mut c = |m: &Mat| tape.constant(m.clone());
        GruVars {
            w_z: c(&self.w_z),
            u_z: c(&self.u_z),
            b_z: c(&Mat::row_vector(self.b_z.clone())),
            w_r: c(&self.w_r),
            u_r: c(&self.u_r),
            b_r: c(&Mat::row_vector(self.b_r.clone())),
            w_h: c(&self.w_h),
            u_h: c(&self.u_h),
            b_h: c(&Mat::row_vector(self.b_h.clone())),
        }
    }
}

pub fn affine(x: &[f64], p: &AffineWeights) -> Result<Vec<f64>> {
    let mut tape = Tape::detached();
    let xv = tape.constant(Mat::row_vector(x.to_vec()));
    let pv = p.bind(&mut tape);
    let y = affine_vars(&mut tape, xv, pv)?;
    Ok(tape.value(y).data.clone())
}

pub fn mlp2(x: &[f64], p: &Mlp2Weights) -> Result<Vec<f64>> {
    let mut tape = Tape::detached();
    let xv = tape.constant(Mat::row_vector(x.to_vec()));
    let pv = p.bind(&mut tape);
    let y = mlp2_vars(&mut tape, xv, pv)?;
    Ok(tape.value(y).data.clone())
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(Error::InvalidArgument(
            "layer_norm needs at least two features".into(),
        ));
    }
    let mut tape = Tape::detached();
    let xv = tape.constant(Mat::row_vector(x.to_vec()));
    let g = tape.constant(Mat::row_vector(gain.to_vec()));
    let b = tape.constant(Mat::row_vector(bias.to_vec()));
    let y = tape.layer_norm(xv, g, b)?;
    Ok(tape.value(y).data.clone())
}

/// `softmax(Q K^T / sqrt(d)) V` restricted to the allowed mask entries.
pub fn masked_self_attention(
    f: &Mat,
    mask: &AttentionMask,
    p: &AttentionWeights,
) -> Result<Mat> {
    p.check(f.cols)?;
    let mut tape = Tape::detached();
    let x = tape.constant(f.clone());
    let pv = p.bind(&mut tape);
    let y = attention_vars(&mut tape, x, x, pv, Some(mask))?;
    Ok(tape.value(y).clone())
}

pub fn cross_attention(queries: &Mat, context: &Mat, p: &AttentionWeights) -> Result<Mat> {
    if context.rows == 0 {
        return Err(Error::Empty("cross_attention context"));
    }
    p.check(queries.cols)?;
    let mut tape = Tape::detached();
    let q = tape.constant(queries.clone());
    let c = tape.constant(context.clone());
    let pv = p.bind(&mut tape);
    let y = attention_vars(&mut tape, q, c, pv, None)?;
    Ok(tape.value(y).clone())
}

pub fn gru_step(x: &[f64], h: &[f64], p: &GruWeights) -> Result<Vec<f64>> {
    let mut tape = Tape::detached();
    let xv = tape.constant(Mat::row_vector(x.to_vec()));
    let hv = tape.constant(Mat::row_vector(h.to_vec()));
    let pv = p.bind(&mut tape);
    let y = gru_vars(&mut tape, xv, hv, pv)?;
    Ok(tape.value(y).data.clone())
}

pub fn max_pool(rows: &Mat) -> Result<Vec<f64>> {
    let mut tape = Tape::detached();
    let x = tape.constant(rows.clone());
    let y = tape.max_pool_rows(x)?;
    Ok(tape.value(y).data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn attn_identity_v(d: usize) -> AttentionWeights {
        AttentionWeights {
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::identity(d),
        }
    }

    #[test]
    fn affine_examples() {
        assert_eq!(
            affine(&[3.0, -1.0], &AffineWeights::zeros(2, 3)).unwrap(),
            vec![0.0; 3]
        );
        let id = AffineWeights {
            w: Mat::identity(2),
            b: vec![0.0, 0.0],
        };
        assert_eq!(affine(&[3.0, -1.0], &id).unwrap(), vec![3.0, -1.0]);
        let p = AffineWeights {
            w: Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            b: vec![1.0, 1.0],
        };
        assert_eq!(affine(&[1.0, 1.0], &p).unwrap(), vec![4.0, 8.0]);
        assert!(matches!(
            affine(&[1.0, 1.0, 1.0], &p),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn mlp2_zero_and_hand_evaluated() {
        assert_eq!(
            mlp2(&[0.3, -2.0], &Mlp2Weights::zeros(2, 4, 3)).unwrap(),
            vec![0.0; 3]
        );
        // Two hidden units so layer norm is non-degenerate:
        // pre = (x0 + x1, x0 - x1) = (3, -1); mean 1, var 4
        // normalized = (2, -2)/sqrt(4 + 1e-5); gain (1, 1), bias (0.5, 0)
        // relu -> (2/s + 0.5, 0); out = 2 * h0 - 1
        let p = Mlp2Weights {
            first: AffineWeights {
                w: Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap(),
                b: vec![0.0, 0.0],
            },
            gain: vec![1.0, 1.0],
            bias: vec![0.5, 0.0],
            second: AffineWeights {
                w: Mat::from_rows(&[vec![2.0, 3.0]]).unwrap(),
                b: vec![-1.0],
            },
        };
        let s = (4.0f64 + 1e-5).sqrt();
        let want = 2.0 * (2.0 / s + 0.5) - 1.0;
        let got = mlp2(&[1.0, 2.0], &p).unwrap();
        assert_abs_diff_eq!(got[0], want, epsilon = 1e-14);
        assert_eq!(got, mlp2(&[1.0, 2.0], &p).unwrap());
    }

    #[test]
    fn layer_norm_examples() {
        let one = [1.0, 1.0, 1.0];
        let zero = [0.0, 0.0, 0.0];
        assert_eq!(layer_norm(&[4.0, 4.0, 4.0], &one, &zero).unwrap(), vec![0.0; 3]);
        let y = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        let s = (1.0f64 + 1e-5).sqrt();
        assert_abs_diff_eq!(y[0], 1.0 / s, epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], -1.0 / s, epsilon = 1e-15);
        let x = [0.3, -1.2, 2.5];
        let a = layer_norm(&x, &one, &zero).unwrap();
        let b = layer_norm(&x.map(|v| v + 7.0), &one, &zero).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
        assert!(layer_norm(&[1.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn attention_single_node_is_value_transform() {
        let f = Mat::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let p = AttentionWeights {
            wq: Mat::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap(),
            wk: Mat::identity(2),
            wv: Mat::from_rows(&[vec![2.0, 0.0], vec![1.0, 1.0]]).unwrap(),
        };
        let out = masked_self_attention(&f, &AttentionMask::diagonal(1), &p).unwrap();
        assert_eq!(out.data, vec![1.0, -0.5]);
    }

    #[test]
    fn diagonal_mask_returns_own_value_transform() {
        let f = Mat::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 4.0]]).unwrap();
        let p = AttentionWeights {
            wq: Mat::identity(2),
            wk: Mat::identity(2),
            wv: Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
        };
        let out = masked_self_attention(&f, &AttentionMask::diagonal(3), &p).unwrap();
        assert_eq!(out.row(1), &[0.5, -3.0]);
    }

    #[test]
    fn full_mask_uniform_attention_gives_mean_of_present_rows() {
        let f = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, -2.0], vec![100.0, 100.0]]).unwrap();
        let mut mask = AttentionMask::full(3);
        // Node 2 absent: its row and column are cleared.
        mask.present[2] = false;
        for i in 0..3 {
            mask.set(i, 2, false);
            mask.set(2, i, false);
        }
        let out = masked_self_attention(&f, &mask, &attn_identity_v(2)).unwrap();
        assert_abs_diff_eq!(out.get(0, 0), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.get(1, 1), 0.0, epsilon = 1e-15);
        assert_eq!(out.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn present_row_without_entries_is_rejected() {
        let f = Mat::zeros(2, 2);
        let mut mask = AttentionMask::diagonal(2);
        mask.set(1, 1, false);
        assert!(matches!(
            masked_self_attention(&f, &mask, &attn_identity_v(2)),
            Err(Error::EmptyAttentionRow { row: 1 })
        ));
    }

    #[test]
    fn cross_attention_examples() {
        let q = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let ctx = Mat::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let p = AttentionWeights {
            wq: Mat::identity(2),
            wk: Mat::identity(2),
            wv: Mat::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap(),
        };
        let out = cross_attention(&q, &ctx, &p).unwrap();
        assert_eq!(out.row(0), &[1.0, -2.0]);
        assert_eq!(out.row(1), &[1.0, -2.0]);

        let same = Mat::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap();
        let out = cross_attention(&q, &same, &p).unwrap();
        assert_abs_diff_eq!(out.get(0, 0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.get(0, 1), 1.4, epsilon = 1e-15);

        // Logits (0, ln 3): query (1, 0), keys (0, *) and (ln3 * sqrt(2), *).
        let d = 2.0f64;
        let ctx = Mat::from_rows(&[vec![0.0, 1.0], vec![3f64.ln() * d.sqrt(), 5.0]]).unwrap();
        let qq = Mat::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let p = AttentionWeights {
            wq: Mat::identity(2),
            wk: Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap(),
            wv: Mat::identity(2),
        };
        let out = cross_attention(&qq, &ctx, &p).unwrap();
        assert_abs_diff_eq!(out.get(0, 1), 0.25 * 1.0 + 0.75 * 5.0, epsilon = 1e-12);

        assert!(cross_attention(&qq, &Mat::zeros(0, 2), &p).is_err());
    }

    #[test]
    fn gru_examples() {
        let p = GruWeights::zeros(3, 3);
        assert_eq!(gru_step(&[0.0; 3], &[0.0; 3], &p).unwrap(), vec![0.0; 3]);
        let h = [0.4, -2.0, 7.0];
        let out = gru_step(&[1.0, 2.0, 3.0], &h, &p).unwrap();
        for (o, hv) in out.iter().zip(&h) {
            assert_abs_diff_eq!(*o, 0.5 * hv, epsilon = 1e-15);
        }
    }

    #[test]
    fn max_pool_examples() {
        let one = Mat::from_rows(&[vec![1.0, -3.0]]).unwrap();
        assert_eq!(max_pool(&one).unwrap(), vec![1.0, -3.0]);
        let two = Mat::from_rows(&[vec![1.0, -2.0], vec![0.0, 5.0]]).unwrap();
        assert_eq!(max_pool(&two).unwrap(), vec![1.0, 5.0]);
        let swapped = Mat::from_rows(&[vec![0.0, 5.0], vec![1.0, -2.0]]).unwrap();
        assert_eq!(max_pool(&swapped).unwrap(), vec![1.0, 5.0]);
        assert!(matches!(max_pool(&Mat::zeros(0, 2)), Err(Error::Empty(_))));
    }
}
