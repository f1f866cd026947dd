//! Adam with classical (coupled) L2.

use crate::error::{Error, Result};
use crate::params::{Dirty, GradStore, ParamId, ParameterStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    row_width: usize,
    /// Rows whose moments may be non-zero. Untouched rows have `m = v = 0`
    /// and zero gradient, so their Adam update is exactly zero and they
    /// can be skipped when L2 is off.
    active: Vec<bool>,
    active_rows: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    moments: Vec<Moments>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        let grads = GradStore::new(params);
        let moments = params
            .ids()
            .map(|id| {
                let n = params.get(id).len();
                let w = grads.row_width(id).max(1);
                Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    row_width: w,
                    active: vec![false; n / w],
                    active_rows: Vec::new(),
                }
            })
            .collect();
        Self { moments, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &[f64] {
        &self.moments[id.0].m
    }

    pub fn second_moment(&self, id: ParamId) -> &[f64] {
        &self.moments[id.0].v
    }

    /// One bias-corrected Adam update. With `l2 > 0` the gradient becomes
    /// `g + l2·θ` for every entry before the moment update.
    pub fn step(
        &mut self,
        params: &mut ParameterStore,
        grads: &GradStore,
        lr: f64,
        l2: f64,
    ) -> Result<()> {
        if self.moments.len() != params.len() || grads.num_slots() != params.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        for id in params.ids() {
            let g = grads.grad(id);
            let bad = match grads.dirty(id) {
                Dirty::None => false,
                Dirty::All => g.iter().any(|x| !x.is_finite()),
                Dirty::Rows(rows) => {
                    let w = grads.row_width(id);
                    rows.iter()
                        .any(|&r| g[r * w..(r + 1) * w].iter().any(|x| !x.is_finite()))
                }
            };
            if bad {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {:?}",
                    params.name(id)
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for id in params.ids() {
            let mom = &mut self.moments[id.0];
            let g = grads.grad(id);
            let theta = params.get_mut(id).data_mut();
            let w = mom.row_width;
            let update = |range: std::ops::Range<usize>, mom: &mut Moments, theta: &mut [f64]| {
                for i in range {
                    let gi = g[i] + l2 * theta[i];
                    mom.m[i] = BETA1 * mom.m[i] + (1.0 - BETA1) * gi;
                    mom.v[i] = BETA2 * mom.v[i] + (1.0 - BETA2) * gi * gi;
                    let mh = mom.m[i] / bc1;
                    let vh = mom.v[i] / bc2;
                    theta[i] -= lr * mh / (vh.sqrt() + EPSILON);
                }
            };
            let dense = l2 != 0.0 || matches!(grads.dirty(id), Dirty::All);
            if dense || mom.active_rows.len() == mom.active.len() {
                if mom.active_rows.len() != mom.active.len() {
                    mom.active.iter_mut().for_each(|a| *a = true);
                    mom.active_rows = (0..mom.active.len()).collect();
                }
                update(0..theta.len(), mom, theta);
                continue;
            }
            if let Dirty::Rows(rows) = grads.dirty(id) {
                for &r in rows {
                    if !mom.active[r] {
                        mom.active[r] = true;
                        mom.active_rows.push(r);
                    }
                }
            }
            let rows = std::mem::take(&mut mom.active_rows);
            for &r in &rows {
                update(r * w..(r + 1) * w, mom, theta);
            }
            mom.active_rows = rows;
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, max_norm: f64) -> f64 {
    let norm = grads.squared_norm().sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use proptest::prelude::*;

    fn single(theta: f64) -> (ParameterStore, ParamId) {
        let mut p = ParameterStore::new();
        let id = p.add("w", Tensor::vector(vec![theta]));
        (p, id)
    }

    #[test]
    fn first_step_closed_form() {
        let (mut p, id) = single(0.5);
        let mut g = GradStore::new(&p);
        g.accumulate(id, &[1.0]).unwrap();
        let mut adam = AdamState::new(&p);
        adam.step(&mut p, &g, 0.01, 0.0).unwrap();
        let expect = 0.5 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((p.get(id).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut p, id) = single(0.5);
        let g = GradStore::new(&p);
        let mut adam = AdamState::new(&p);
        adam.step(&mut p, &g, 0.01, 0.0).unwrap();
        assert_eq!(p.get(id).data()[0], 0.5);
    }

    #[test]
    fn l2_shrinks_toward_zero() {
        for theta in [0.5, -0.5] {
            let (mut p, id) = single(theta);
            let g = GradStore::new(&p);
            let mut adam = AdamState::new(&p);
            adam.step(&mut p, &g, 0.01, 0.1).unwrap();
            assert!(p.get(id).data()[0].abs() < theta.abs());
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut p, id) = single(0.5);
        let mut g = GradStore::new(&p);
        g.accumulate(id, &[f64::NAN]).unwrap();
        let mut adam = AdamState::new(&p);
        match adam.step(&mut p, &g, 0.01, 0.0) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("\"w\"")),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.get(id).data()[0], 0.5);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn three_steps_match_hand_computation() {
        let (mut p, id) = single(1.0);
        let mut adam = AdamState::new(&p);
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 1.0f64);
        for (t, gv) in [0.3, -1.2, 2.5].into_iter().enumerate() {
            let mut g = GradStore::new(&p);
            g.accumulate(id, &[gv]).unwrap();
            adam.step(&mut p, &g, 0.05, 0.0).unwrap();
            m = 0.9 * m + 0.1 * gv;
            v = 0.999 * v + 0.001 * gv * gv;
            let k = (t + 1) as i32;
            theta -= 0.05 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
            assert!((p.get(id).data()[0] - theta).abs() < 1e-10);
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut p = ParameterStore::new();
        let a = p.add("a", Tensor::vector(vec![0.0, 0.0]));
        let mut g = GradStore::new(&p);
        g.accumulate(a, &[30.0, 40.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut g, 10.0), 50.0);
        assert!((g.grad(a)[0] - 6.0).abs() < 1e-12);
        assert!((g.squared_norm().sqrt() - 10.0).abs() < 1e-12);
    }

    proptest! {
        // Skipping untouched rows must be exactly the dense update.
        #[test]
        fn sparse_rows_equal_dense_update(
            batches in prop::collection::vec(prop::collection::vec(0usize..6, 1..4), 1..6),
            seed in -1.0f64..1.0,
        ) {
            let init: Vec<f64> = (0..12).map(|i| seed + i as f64 * 0.1).collect();
            let mut sparse = ParameterStore::new();
            let s = sparse.add("t", Tensor::new(&[6, 2], init.clone()).unwrap());
            let mut dense = sparse.clone();
            let mut adam_s = AdamState::new(&sparse);
            let mut adam_d = AdamState::new(&dense);
            for rows in &batches {
                let mut gs = GradStore::new(&sparse);
                {
                    let mut tape = Tape::with_params(&sparse);
                    let t = tape.param(s).unwrap();
                    let x = tape.gather(t, rows).unwrap();
                    let sq = tape.mul(x, x).unwrap();
                    let loss = tape.sum(sq);
                    tape.backward(loss, &mut gs).unwrap();
                }
                let mut gd = GradStore::new(&dense);
                gd.accumulate(s, gs.grad(s)).unwrap();
                adam_s.step(&mut sparse, &gs, 0.1, 0.0).unwrap();
                adam_d.step(&mut dense, &gd, 0.1, 0.0).unwrap();
                prop_assert_eq!(sparse.get(s).data(), dense.get(s).data());
            }
        }
    }
}
