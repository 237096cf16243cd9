//! Passage alignment memories and the unified memories built from them.
//!
//! The alignment memory of a target passage is `stackᵀ · W^p`, where the
//! stack holds the MPMs of every other passage in dataset order. Each slot
//! of the stack is padded to `N_max` rows and there are `K_max − 1` slots,
//! which gives the shared weight matrix a fixed height. Because slot rows
//! are position-specific, the result depends on passage order.

use crate::config::ModelConfig;
use crate::encoder::Mpm;
use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Var};
use crate::params::{glorot, ParamId, ParamStore, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignmentWeights {
    /// `((K_max − 1)·N_max) × L`
    pub w_p: ParamId,
    pub slots: usize,
    pub slot_len: usize,
    pub width: usize,
}

impl AlignmentWeights {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let slots = cfg.max_passages.saturating_sub(1);
        let w_p = store.add(
            "memory.w_p",
            glorot(rng, &[slots * cfg.max_passage_len, cfg.pam_width]),
        );
        AlignmentWeights {
            w_p,
            slots,
            slot_len: cfg.max_passage_len,
            width: cfg.pam_width,
        }
    }
}

/// Alignment memory of passage `target`: a `2(D+Z) × L` matrix. With a
/// single passage it is all zeros.
pub fn build_pam(
    s: &mut Session,
    target: usize,
    mpms: &[Mpm],
    weights: &AlignmentWeights,
) -> Result<Var> {
    if target >= mpms.len() {
        return Err(Error::Contract(format!(
            "target passage {target} out of range for {} passages",
            mpms.len()
        )));
    }
    if mpms.len() > weights.slots + 1 {
        return Err(Error::Contract(format!(
            "{} passages exceed the configured maximum of {}",
            mpms.len(),
            weights.slots + 1
        )));
    }
    let width = s.g.shape(mpms[target].rows)[1];
    let w_p = s.p(weights.w_p);
    let mut pam: Option<Var> = None;
    let others = mpms.iter().enumerate().filter(|(k, _)| *k != target);
    for (slot, (_, mpm)) in others.enumerate() {
        let n = mpm.valid.len();
        if n > weights.slot_len {
            return Err(Error::Contract(format!(
                "passage of {n} tokens exceeds the padded length {}",
                weights.slot_len
            )));
        }
        if s.g.shape(mpm.rows) != [n, width] {
            return Err(Error::dim("build_pam", s.g.shape(mpm.rows), &[n, width]));
        }
        let h = s.g.mask_rows(mpm.rows, &mpm.valid)?;
        let ht = s.g.transpose(h)?;
        let w = s.g.rows(w_p, slot * weights.slot_len, n)?;
        let term = s.g.matmul(ht, w)?;
        pam = Some(match pam {
            Some(acc) => s.g.add(acc, term)?,
            None => term,
        });
    }
    Ok(match pam {
        Some(p) => p,
        None => s.g.zeros(&[width, weights.width]),
    })
}

/// Unified memory: each row is `[h_j, h_j · PA]`, width `2(D+Z) + L`.
pub fn build_um(s: &mut Session, mpm: &Mpm, pam: Var) -> Result<Mpm> {
    let suffix = s.g.matmul(mpm.rows, pam)?;
    let rows = s.g.concat_cols(&[mpm.rows, suffix])?;
    Ok(Mpm {
        rows,
        valid: mpm.valid.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::NdArray;

    fn random(rng: &mut SeededRng, r: usize, c: usize) -> NdArray {
        NdArray::new(vec![r, c], (0..r * c).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn setup(k_max: usize, n_max: usize, l: usize, seed: u64) -> (ParamStore, AlignmentWeights) {
        let cfg = ModelConfig {
            max_passages: k_max,
            max_passage_len: n_max,
            pam_width: l,
            ..ModelConfig::desk()
        };
        let mut store = ParamStore::new();
        let w = AlignmentWeights::register(&mut store, &cfg, &mut SeededRng::new(seed));
        (store, w)
    }

    fn mpms(s: &mut Session, arrays: &[NdArray]) -> Vec<Mpm> {
        arrays
            .iter()
            .map(|a| Mpm {
                rows: s.g.constant(a.clone()),
                valid: vec![true; a.rows()],
            })
            .collect()
    }

    /// Explicit stack of the other passages, zero-filled, times W^p.
    fn stack_oracle(arrays: &[NdArray], target: usize, w_p: &NdArray, n_max: usize) -> NdArray {
        let width = arrays[0].cols();
        let slots = w_p.rows() / n_max;
        let mut stack = NdArray::zeros(&[slots * n_max, width]);
        let mut slot = 0;
        for (k, a) in arrays.iter().enumerate() {
            if k == target {
                continue;
            }
            for i in 0..a.rows() {
                let at = (slot * n_max + i) * width;
                stack.data_mut()[at..at + width].copy_from_slice(a.row(i));
            }
            slot += 1;
        }
        let mut out = NdArray::zeros(&[width, w_p.cols()]);
        for r in 0..width {
            for c in 0..w_p.cols() {
                let mut acc = 0.0;
                for j in 0..stack.rows() {
                    acc += stack.get2(j, r) * w_p.get2(j, c);
                }
                out.data_mut()[r * w_p.cols() + c] = acc;
            }
        }
        out
    }

    #[test]
    fn pam_matches_stack_oracle() {
        let (store, w) = setup(3, 2, 2, 5);
        let mut rng = SeededRng::new(6);
        for _ in 0..20 {
            let arrays: Vec<NdArray> = (0..3).map(|_| random(&mut rng, 2, 6)).collect();
            let mut s = Session::new(&store, false);
            let ms = mpms(&mut s, &arrays);
            for target in 0..3 {
                let pam = build_pam(&mut s, target, &ms, &w).unwrap();
                let want = stack_oracle(&arrays, target, store.get(w.w_p), 2);
                assert!(s.g.value(pam).max_abs_diff(&want) <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_mpms_and_single_passage_give_zero_pam() {
        let (store, w) = setup(3, 2, 4, 1);
        let mut s = Session::new(&store, false);
        let ms = mpms(&mut s, &[NdArray::zeros(&[2, 6]), NdArray::zeros(&[1, 6])]);
        let pam = build_pam(&mut s, 0, &ms, &w).unwrap();
        assert!(s.g.value(pam).data().iter().all(|v| *v == 0.0));
        let one = mpms(&mut s, &[random(&mut SeededRng::new(2), 2, 6)]);
        let pam = build_pam(&mut s, 0, &one, &w).unwrap();
        assert_eq!(s.g.shape(pam), &[6, 4]);
        assert!(s.g.value(pam).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn target_never_enters_own_pam() {
        let (store, w) = setup(3, 2, 2, 8);
        let mut rng = SeededRng::new(9);
        let mut arrays: Vec<NdArray> = (0..2).map(|_| random(&mut rng, 2, 4)).collect();
        let mut s = Session::new(&store, false);
        let ms = mpms(&mut s, &arrays);
        let before = build_pam(&mut s, 0, &ms, &w).unwrap();
        arrays[0] = random(&mut rng, 2, 4);
        let ms = mpms(&mut s, &arrays);
        let after = build_pam(&mut s, 0, &ms, &w).unwrap();
        assert_eq!(s.g.value(before), s.g.value(after));
    }

    #[test]
    fn knockout_only_touches_own_slot() {
        // with W^p rows of slot 1 zeroed, passage 2 (slot 1 for target 0)
        // cannot influence passage 0's PAM
        let (mut store, w) = setup(3, 2, 3, 10);
        store.get_mut(w.w_p).data_mut()[2 * 3..].fill(0.0);
        let mut rng = SeededRng::new(11);
        let mut arrays: Vec<NdArray> = (0..3).map(|_| random(&mut rng, 2, 4)).collect();
        let mut s = Session::new(&store, false);
        let ms = mpms(&mut s, &arrays);
        let before = build_pam(&mut s, 0, &ms, &w).unwrap();
        arrays[2] = NdArray::zeros(&[2, 4]);
        let ms = mpms(&mut s, &arrays);
        let after = build_pam(&mut s, 0, &ms, &w).unwrap();
        assert_eq!(s.g.value(before), s.g.value(after));
    }

    #[test]
    fn pam_is_linear_in_mpms() {
        let (store, w) = setup(3, 3, 2, 12);
        let mut rng = SeededRng::new(13);
        let a: Vec<NdArray> = (0..3).map(|_| random(&mut rng, 3, 4)).collect();
        let b: Vec<NdArray> = (0..3).map(|_| random(&mut rng, 3, 4)).collect();
        let (alpha, beta) = (0.7, -1.3);
        let mix: Vec<NdArray> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| {
                let data = x.data().iter().zip(y.data()).map(|(p, q)| alpha * p + beta * q);
                NdArray::new(x.shape().to_vec(), data.collect()).unwrap()
            })
            .collect();
        let mut s = Session::new(&store, false);
        let (ma, mb, mm) = (mpms(&mut s, &a), mpms(&mut s, &b), mpms(&mut s, &mix));
        let pa = build_pam(&mut s, 1, &ma, &w).unwrap();
        let pb = build_pam(&mut s, 1, &mb, &w).unwrap();
        let pm = build_pam(&mut s, 1, &mm, &w).unwrap();
        for i in 0..s.g.value(pm).len() {
            let want = alpha * s.g.value(pa).data()[i] + beta * s.g.value(pb).data()[i];
            assert!((s.g.value(pm).data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_rows_do_not_contribute() {
        let (store, w) = setup(2, 3, 2, 14);
        let mut rng = SeededRng::new(15);
        let other = random(&mut rng, 3, 4);
        let mut s = Session::new(&store, false);
        let target = Mpm {
            rows: s.g.constant(random(&mut rng, 3, 4)),
            valid: vec![true; 3],
        };
        let masked = Mpm {
            rows: s.g.constant(other.clone()),
            valid: vec![true, true, false],
        };
        let mut trimmed = other.clone();
        trimmed.data_mut()[8..].fill(0.0);
        let zeroed = Mpm {
            rows: s.g.constant(trimmed),
            valid: vec![true; 3],
        };
        let a = build_pam(&mut s, 0, &[target.clone(), masked], &w).unwrap();
        let b = build_pam(&mut s, 0, &[target, zeroed], &w).unwrap();
        assert_eq!(s.g.value(a), s.g.value(b));
    }

    #[test]
    fn um_prefix_and_suffix() {
        let (store, _) = setup(2, 2, 4, 1);
        let mut rng = SeededRng::new(16);
        let h = random(&mut rng, 3, 10);
        let pa = random(&mut rng, 10, 4);
        let mut s = Session::new(&store, false);
        let mpm = Mpm {
            rows: s.g.constant(h.clone()),
            valid: vec![true, true, false],
        };
        let pv = s.g.constant(pa.clone());
        let um = build_um(&mut s, &mpm, pv).unwrap();
        let u = s.g.value(um.rows);
        assert_eq!(u.shape(), &[3, 14]);
        assert_eq!(um.valid, mpm.valid);
        for i in 0..3 {
            assert_eq!(&u.row(i)[..10], h.row(i));
            for c in 0..4 {
                let want: f64 = (0..10).map(|r| h.get2(i, r) * pa.get2(r, c)).sum();
                assert!((u.get2(i, 10 + c) - want).abs() < 1e-12);
            }
        }
        let zero = s.g.zeros(&[10, 4]);
        let um = build_um(&mut s, &mpm, zero).unwrap();
        assert!(s.g.value(um.rows).row(0)[10..].iter().all(|v| *v == 0.0));
        let bad = s.g.zeros(&[9, 4]);
        assert!(matches!(build_um(&mut s, &mpm, bad), Err(Error::Dimension { .. })));
    }
}
