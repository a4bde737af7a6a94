//! Dual-view tokenizers.
//!
//! The RoI view treats each row of the correlation matrix as one token: a
//! learned affine map takes the M-length connectivity profile to d_model,
//! a learned CLS token is prepended, and learned positional embeddings are
//! added. The connectivity view cuts the binary adjacency into non-overlapping
//! P x P patches (zero-padded when P does not divide M), flattens each patch,
//! and projects it the same way under its own CLS and positions.

use crate::error::{Error, Result};
use crate::params::{self, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct TokenizerIds {
    pub roi_w: ParamId,
    pub roi_b: ParamId,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls_r: ParamId,
    pub cls_c: ParamId,
    pub pos_r: ParamId,
    pub pos_c: ParamId,
}

/// Patches per side after zero-padding M up to a multiple of P.
pub fn patches_per_side(m: usize, p: usize) -> usize {
    m.div_ceil(p)
}

/// Token count N of the connectivity view.
pub fn patch_count(m: usize, p: usize) -> usize {
    let side = patches_per_side(m, p);
    side * side
}

impl TokenizerIds {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        m: usize,
        p: usize,
        d_model: usize,
        sigma: f64,
    ) -> TokenizerIds {
        let n = patch_count(m, p);
        TokenizerIds {
            roi_w: store.register("tok.roi_proj.w", params::gaussian(rng, m, d_model, sigma)),
            roi_b: store.register("tok.roi_proj.b", params::zeros(1, d_model)),
            patch_w: store.register("tok.patch_proj.w", params::gaussian(rng, p * p, d_model, sigma)),
            patch_b: store.register("tok.patch_proj.b", params::zeros(1, d_model)),
            cls_r: store.register("tok.cls_r", params::gaussian(rng, 1, d_model, sigma)),
            cls_c: store.register("tok.cls_c", params::gaussian(rng, 1, d_model, sigma)),
            pos_r: store.register("tok.pos_r", params::gaussian(rng, 1 + m, d_model, sigma)),
            pos_c: store.register("tok.pos_c", params::gaussian(rng, 1 + n, d_model, sigma)),
        }
    }
}

/// Cut an M x M matrix into N flattened P x P patches, row-major in both the
/// block grid and within each block. Out-of-range positions read as zero.
pub fn patchify<S: Scalar>(m: usize, p: usize, matrix: &Tensor<S>) -> Result<Tensor<S>> {
    if p < 2 {
        return Err(Error::Config(format!("patch size must be at least 2, got {p}")));
    }
    if matrix.rows() != m || matrix.cols() != m {
        return Err(Error::Config(format!(
            "patchify expects a {m}x{m} matrix, got {}x{}",
            matrix.rows(),
            matrix.cols()
        )));
    }
    let side = patches_per_side(m, p);
    let n = side * side;
    let data = matrix.data();
    let mut out = vec![S::ZERO; n * p * p];
    for bi in 0..side {
        for bj in 0..side {
            let patch = bi * side + bj;
            for pi in 0..p {
                let row = bi * p + pi;
                if row >= m {
                    break;
                }
                for pj in 0..p {
                    let col = bj * p + pj;
                    if col >= m {
                        break;
                    }
                    out[patch * p * p + pi * p + pj] = data[row * m + col];
                }
            }
        }
    }
    Tensor::matrix(n, p * p, out)
}

/// Inverse of [`patchify`]: place each patch back and crop the padding.
pub fn unpatchify<S: Scalar>(m: usize, p: usize, patches: &Tensor<S>) -> Result<Tensor<S>> {
    let side = patches_per_side(m, p);
    let n = side * side;
    if patches.rows() != n || patches.cols() != p * p {
        return Err(Error::Config(format!(
            "expected {n}x{} patch matrix, got {}x{}",
            p * p,
            patches.rows(),
            patches.cols()
        )));
    }
    let mut out = vec![S::ZERO; m * m];
    let data = patches.data();
    for bi in 0..side {
        for bj in 0..side {
            let patch = bi * side + bj;
            for pi in 0..p {
                let row = bi * p + pi;
                if row >= m {
                    break;
                }
                for pj in 0..p {
                    let col = bj * p + pj;
                    if col >= m {
                        break;
                    }
                    out[row * m + col] = data[patch * p * p + pi * p + pj];
                }
            }
        }
    }
    Tensor::matrix(m, m, out)
}

fn encode<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &Bound,
    content: Var,
    w: ParamId,
    b: ParamId,
    cls: ParamId,
    pos: ParamId,
) -> Result<Var> {
    let proj = tape.matmul(content, bound.v(w))?;
    let proj = tape.add_row(proj, bound.v(b))?;
    let seq = tape.concat(0, &[bound.v(cls), proj])?;
    tape.add(seq, bound.v(pos))
}

/// RoI-view token sequence: (1+M) x d_model, row 0 = CLS.
pub fn encode_roi<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &Bound,
    ids: &TokenizerIds,
    m: usize,
    roi_features: &Tensor<S>,
) -> Result<Var> {
    if roi_features.rows() != m || roi_features.cols() != m {
        return Err(Error::Config(format!(
            "RoI view expects a {m}x{m} feature matrix, got {}x{}",
            roi_features.rows(),
            roi_features.cols()
        )));
    }
    let x = tape.input(roi_features)?;
    encode(tape, bound, x, ids.roi_w, ids.roi_b, ids.cls_r, ids.pos_r)
}

/// Connectivity-view token sequence: (1+N) x d_model, row 0 = CLS.
pub fn encode_connectivity<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &Bound,
    ids: &TokenizerIds,
    m: usize,
    p: usize,
    adjacency: &Tensor<S>,
) -> Result<Var> {
    let patches = patchify(m, p, adjacency)?;
    let x = tape.input(&patches)?;
    encode(tape, bound, x, ids.patch_w, ids.patch_b, ids.cls_c, ids.pos_c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn setup(m: usize, p: usize, d: usize) -> (ParamStore<f64>, TokenizerIds) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let ids = TokenizerIds::register(&mut store, &mut rng, m, p, d, 0.02);
        (store, ids)
    }

    fn run_roi(store: &ParamStore<f64>, ids: &TokenizerIds, m: usize, fcn: &Tensor<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape).unwrap();
        let seq = encode_roi(&mut tape, &bound, ids, m, fcn).unwrap();
        tape.value(seq).to_vec()
    }

    fn run_conn(
        store: &ParamStore<f64>,
        ids: &TokenizerIds,
        m: usize,
        p: usize,
        adj: &Tensor<f64>,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape).unwrap();
        let seq = encode_connectivity(&mut tape, &bound, ids, m, p, adj).unwrap();
        tape.value(seq).to_vec()
    }

    #[test]
    fn patch_counts() {
        assert_eq!(patch_count(90, 30), 9);
        assert_eq!(patch_count(90, 45), 4);
        assert_eq!(patch_count(90, 32), 9);
        assert_eq!(patch_count(8, 4), 4);
    }

    #[test]
    fn patchify_pads_with_zeros_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let m = 10;
        let p = 4;
        let data: Vec<f64> = (0..m * m).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let matrix = Tensor::matrix(m, m, data).unwrap();
        let patches = patchify(m, p, &matrix).unwrap();
        assert_eq!(patches.rows(), 9);
        assert_eq!(patches.cols(), 16);

        // Patch 2 covers columns 8..12; columns 10 and 11 are padding.
        for pi in 0..p {
            for pj in 0..p {
                let v = patches.data()[2 * 16 + pi * p + pj];
                if pj >= 2 {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, matrix.data()[pi * m + 8 + pj]);
                }
            }
        }

        let back = unpatchify(m, p, &patches).unwrap();
        assert_eq!(back.data(), matrix.data());
    }

    #[test]
    fn roi_tokens_reduce_to_positions_on_zero_input() {
        let (mut store, ids) = setup(6, 3, 5);
        // Zero the projection weight so only bias and positions remain.
        store.get_mut(ids.roi_w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let fcn = Tensor::zeros(vec![6, 6]);
        let out = run_roi(&store, &ids, 6, &fcn);
        let pos = store.get(ids.pos_r).data();
        let cls = store.get(ids.cls_r).data();
        for d in 0..5 {
            assert_eq!(out[d], cls[d] + pos[d]);
        }
        for i in 1..7 {
            for d in 0..5 {
                assert_eq!(out[i * 5 + d], pos[i * 5 + d]);
            }
        }
    }

    #[test]
    fn identity_projection_passes_rows_through() {
        let m = 5;
        let (mut store, ids) = setup(m, 3, m);
        {
            let w = store.get_mut(ids.roi_w).data_mut();
            w.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..m {
                w[i * m + i] = 1.0;
            }
        }
        store.get_mut(ids.pos_r).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let data: Vec<f64> = (0..m * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fcn = Tensor::matrix(m, m, data.clone()).unwrap();
        let out = run_roi(&store, &ids, m, &fcn);
        for i in 0..m {
            for d in 0..m {
                assert_eq!(out[(i + 1) * m + d], data[i * m + d]);
            }
        }
    }

    #[test]
    fn roi_tokens_match_affine_oracle() {
        let m = 6;
        let d = 4;
        let (store, ids) = setup(m, 3, d);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let data: Vec<f64> = (0..m * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fcn = Tensor::matrix(m, m, data.clone()).unwrap();
        let out = run_roi(&store, &ids, m, &fcn);
        let w = store.get(ids.roi_w).data();
        let b = store.get(ids.roi_b).data();
        let pos = store.get(ids.pos_r).data();
        for i in 0..m {
            for dj in 0..d {
                let mut want = b[dj] + pos[(i + 1) * d + dj];
                for k in 0..m {
                    want += data[i * m + k] * w[k * d + dj];
                }
                assert!((out[(i + 1) * d + dj] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn connectivity_tokens_are_local_to_their_patch() {
        let m = 6;
        let p = 3;
        let d = 4;
        let (store, ids) = setup(m, p, d);
        let empty = Tensor::zeros(vec![m, m]);
        let base = run_conn(&store, &ids, m, p, &empty);

        // Nonzero entries only inside block (0,1), which is patch index 1.
        let mut data = vec![0.0f64; m * m];
        data[4] = 1.0; // row 0, col 4
        data[2 * m + 3] = 1.0;
        let adj = Tensor::matrix(m, m, data).unwrap();
        let out = run_conn(&store, &ids, m, p, &adj);
        for (i, (a, b)) in out.iter().zip(&base).enumerate() {
            let token = i / d;
            if token == 2 {
                continue;
            }
            assert_eq!(a, b, "token {token} changed");
        }
        assert!(out[2 * d..3 * d].iter().zip(&base[2 * d..3 * d]).any(|(a, b)| a != b));
    }

    #[test]
    fn connectivity_tokens_match_affine_oracle() {
        let m = 6;
        let p = 3;
        let d = 4;
        let n = patch_count(m, p);
        let (store, ids) = setup(m, p, d);
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let data: Vec<f64> = (0..m * m).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let adj = Tensor::matrix(m, m, data).unwrap();
        let out = run_conn(&store, &ids, m, p, &adj);
        let patches = patchify(m, p, &adj).unwrap();
        let w = store.get(ids.patch_w).data();
        let b = store.get(ids.patch_b).data();
        let pos = store.get(ids.pos_c).data();
        for i in 0..n {
            for dj in 0..d {
                let mut want = b[dj] + pos[(i + 1) * d + dj];
                for k in 0..p * p {
                    want += patches.data()[i * p * p + k] * w[k * d + dj];
                }
                assert!((out[(i + 1) * d + dj] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn encoders_are_affine_in_their_input() {
        let m = 6;
        let d = 4;
        let (store, ids) = setup(m, 3, d);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mk = |rng: &mut ChaCha8Rng| {
            let data: Vec<f64> = (0..m * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::matrix(m, m, data).unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let (alpha, beta) = (0.3, 0.5);
        let combo_data: Vec<f64> =
            a.data().iter().zip(b.data()).map(|(x, y)| alpha * x + beta * y).collect();
        let combo = Tensor::matrix(m, m, combo_data).unwrap();
        let zero = Tensor::zeros(vec![m, m]);

        let ea = run_roi(&store, &ids, m, &a);
        let eb = run_roi(&store, &ids, m, &b);
        let e0 = run_roi(&store, &ids, m, &zero);
        let ec = run_roi(&store, &ids, m, &combo);
        // CLS row is input-independent; the relation holds on all rows.
        for i in 0..ec.len() {
            let want = alpha * ea[i] + beta * eb[i] + (1.0 - alpha - beta) * e0[i];
            assert!((ec[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn token_counts_follow_config() {
        let m = 7;
        let p = 3;
        let d = 4;
        let (store, ids) = setup(m, p, d);
        let fcn = Tensor::zeros(vec![m, m]);
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape).unwrap();
        let r = encode_roi(&mut tape, &bound, &ids, m, &fcn).unwrap();
        let c = encode_connectivity(&mut tape, &bound, &ids, m, p, &fcn).unwrap();
        assert_eq!(tape.dims(r), (1 + m, d));
        assert_eq!(tape.dims(c), (1 + patch_count(m, p), d));
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let (store, ids) = setup(6, 3, 4);
        let wrong = Tensor::zeros(vec![5, 5]);
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape).unwrap();
        assert!(encode_roi(&mut tape, &bound, &ids, 6, &wrong).is_err());
        assert!(encode_connectivity(&mut tape, &bound, &ids, 6, 3, &wrong).is_err());
    }
}
