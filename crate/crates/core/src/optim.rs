//! Update rules as pure state transitions.
//!
//! Velocities follow the `u = m·u + η·∇`, `θ ← θ − u` convention, so every
//! emitted update is already scaled by the learning rate. Sparse variants differ
//! only in what happens to the entries that are not sent this step:
//!
//! * [`broken_sparse_momentum_step`] accumulates `η·∇` in a residual and builds
//!   velocity from the sent values only, so unsent mass never sees momentum.
//! * [`dgc_correction_step`] keeps a dense local velocity and accumulates the
//!   velocity itself in the residual.
//! * [`samomentum_step`] keeps no residual at all; unsent velocity entries are
//!   divided by `m` so that the next `m·u` cancels the decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsify::{check_momentum, split_residual, split_samomentum, split_samomentum_masked, SparsifyConfig};
use crate::tensor::{ParamVector, SparseUpdate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    /// `(epoch, factor)`: from `epoch` on, the learning rate is multiplied by `factor`.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
}

impl Hyperparams {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        let hp = Self {
            learning_rate,
            momentum,
            lr_schedule: Vec::new(),
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn with_schedule(mut self, schedule: Vec<(usize, f64)>) -> Result<Self> {
        self.lr_schedule = schedule;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        for pair in self.lr_schedule.windows(2) {
            if pair[0].0 >= pair[1].0 {
                return Err(Error::Config("lr schedule epochs must be strictly increasing".into()));
            }
        }
        if let Some((e, f)) = self.lr_schedule.iter().find(|(_, f)| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::Config(format!(
                "lr schedule factor at epoch {e} must be positive, got {f}"
            )));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.learning_rate, |lr, (_, f)| lr * f)
    }

    /// Copy with the scheduled learning rate for `epoch` baked in.
    pub fn at_epoch(&self, epoch: usize) -> Hyperparams {
        Hyperparams {
            learning_rate: self.lr_at(epoch),
            momentum: self.momentum,
            lr_schedule: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityState {
    pub velocity: ParamVector,
    /// Local step counter.
    pub step: u64,
}

impl VelocityState {
    pub fn zeros_like(model: &ParamVector) -> Self {
        Self {
            velocity: ParamVector::zeros(model.partition().clone()),
            step: 0,
        }
    }

    fn advanced(&self, velocity: ParamVector) -> Self {
        Self {
            velocity,
            step: self.step + 1,
        }
    }
}

/// `θ − η·∇`.
pub fn sgd_step(theta: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    theta.zip_map(grad, |t, g| t - lr * g)
}

fn blend(state: &VelocityState, grad: &ParamVector, hp: &Hyperparams) -> Result<ParamVector> {
    let (m, lr) = (hp.momentum, hp.learning_rate);
    state.velocity.zip_map(grad, |u, g| m * u + lr * g)
}

/// Classical momentum. Returns the new state and the update the caller
/// subtracts from the model (the new velocity).
pub fn momentum_step(
    state: &VelocityState,
    grad: &ParamVector,
    hp: &Hyperparams,
) -> Result<(VelocityState, ParamVector)> {
    let u = blend(state, grad, hp)?;
    Ok((state.advanced(u.clone()), u))
}

/// Momentum applied after gradient dropping: only transmitted values enter the velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct BrokenMomentumState {
    pub velocity: VelocityState,
    pub residual: ParamVector,
}

impl BrokenMomentumState {
    pub fn zeros_like(model: &ParamVector) -> Self {
        Self {
            velocity: VelocityState::zeros_like(model),
            residual: ParamVector::zeros(model.partition().clone()),
        }
    }
}

/// Returns the new state, the sparse message `g`, and the model update built
/// from the sent values only (`m·u + densify(g)`).
pub fn broken_sparse_momentum_step(
    state: &BrokenMomentumState,
    grad: &ParamVector,
    hp: &Hyperparams,
    cfg: &SparsifyConfig,
) -> Result<(BrokenMomentumState, SparseUpdate, ParamVector)> {
    let lr = hp.learning_rate;
    let accumulated = state.residual.zip_map(grad, |r, g| r + lr * g)?;
    let (sent, residual) = split_residual(&accumulated, cfg);
    let m = hp.momentum;
    let mut u = state.velocity.velocity.map(|u| m * u)?;
    u.apply_sparse(&sent, 1.0)?;
    let next = BrokenMomentumState {
        velocity: state.velocity.advanced(u.clone()),
        residual,
    };
    Ok((next, sent, u))
}

/// Local velocity plus local accumulation of the velocity (momentum correction).
/// Returns `(state', residual', g)`.
pub fn dgc_correction_step(
    state: &VelocityState,
    residual: &ParamVector,
    grad: &ParamVector,
    hp: &Hyperparams,
    cfg: &SparsifyConfig,
) -> Result<(VelocityState, ParamVector, SparseUpdate)> {
    let u = blend(state, grad, hp)?;
    let accumulated = residual.zip_map(&u, |r, u| r + u)?;
    let (sent, rest) = split_residual(&accumulated, cfg);
    Ok((state.advanced(u), rest, sent))
}

/// Sparsification-aware momentum with top-k selection.
pub fn samomentum_step(
    state: &VelocityState,
    grad: &ParamVector,
    hp: &Hyperparams,
    cfg: &SparsifyConfig,
) -> Result<(VelocityState, SparseUpdate)> {
    check_momentum(hp.momentum)?;
    let u = blend(state, grad, hp)?;
    let (sent, rescaled) = split_samomentum(&u, cfg, hp.momentum)?;
    Ok((state.advanced(rescaled), sent))
}

/// Same as [`samomentum_step`] with a caller-chosen mask instead of top-k.
pub fn samomentum_step_masked(
    state: &VelocityState,
    grad: &ParamVector,
    hp: &Hyperparams,
    mask: &[u32],
) -> Result<(VelocityState, SparseUpdate)> {
    check_momentum(hp.momentum)?;
    let u = blend(state, grad, hp)?;
    let (sent, rescaled) = split_samomentum_masked(&u, mask, hp.momentum)?;
    Ok((state.advanced(rescaled), sent))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::tensor::LayerPartition;

    fn pv(values: &[f64]) -> ParamVector {
        ParamVector::from_values(values.to_vec(), Arc::new(LayerPartition::single(values.len()).unwrap())).unwrap()
    }

    fn vs(values: &[f64]) -> VelocityState {
        VelocityState {
            velocity: pv(values),
            step: 0,
        }
    }

    fn hp(lr: f64, m: f64) -> Hyperparams {
        Hyperparams::new(lr, m).unwrap()
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn hyperparams_validation() {
        assert!(Hyperparams::new(0.0, 0.5).is_err());
        assert!(Hyperparams::new(0.1, 1.0).is_err());
        assert!(Hyperparams::new(0.1, -0.1).is_err());
        assert!(hp(0.1, 0.0).with_schedule(vec![(5, 0.1), (5, 0.1)]).is_err());
        assert!(hp(0.1, 0.0).with_schedule(vec![(5, 0.0)]).is_err());
    }

    #[test]
    fn schedule_is_multiplicative_at_boundaries() {
        let h = hp(1.0, 0.0).with_schedule(vec![(30, 0.1), (40, 0.1)]).unwrap();
        assert_eq!(h.lr_at(0), 1.0);
        assert_eq!(h.lr_at(29), 1.0);
        assert_eq!(h.lr_at(30), 0.1);
        assert_eq!(h.lr_at(39), 0.1);
        assert!((h.lr_at(40) - 0.01).abs() < 1e-17);
        assert_eq!(h.lr_at(49), h.lr_at(40));
    }

    #[test]
    fn sgd_examples() {
        let theta = pv(&[1.0]);
        assert_eq!(sgd_step(&theta, &pv(&[0.0]), 0.1).unwrap(), theta);
        assert_eq!(sgd_step(&theta, &pv(&[2.0]), 0.1).unwrap().as_slice(), &[0.8]);
        assert!(sgd_step(&pv(&[f64::MAX]), &pv(&[-f64::MAX]), 10.0).is_err());
    }

    #[test]
    fn sgd_quadratic_bowl_closed_form() {
        // θ_t − θ* = (1 − η)^t (θ_0 − θ*)
        let optimum = [1.0, -2.0, 0.5];
        let eta = 0.1;
        let mut theta = pv(&[0.0, 0.0, 0.0]);
        for _ in 0..100 {
            let grad = pv(&std::array::from_fn::<f64, 3, _>(|i| theta.get(i) - optimum[i]));
            theta = sgd_step(&theta, &grad, eta).unwrap();
        }
        for (i, &o) in optimum.iter().enumerate() {
            let expected = o + (1.0f64 - eta).powi(100) * (0.0 - o);
            assert!((theta.get(i) - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn momentum_examples() {
        let (s, u) = momentum_step(&vs(&[1.0]), &pv(&[1.0]), &hp(1.0, 0.5)).unwrap();
        assert_eq!(u.as_slice(), &[1.5]);
        assert_eq!(s.velocity.as_slice(), &[1.5]);
        assert_eq!(s.step, 1);

        // m = 0 degenerates to SGD
        let theta = pv(&[3.0, -1.0]);
        let grad = pv(&[0.25, 4.0]);
        let (_, u) = momentum_step(&vs(&[7.0, 7.0]), &grad, &hp(0.1, 0.0)).unwrap();
        assert_eq!(
            sgd_step(&theta, &grad, 0.1).unwrap(),
            theta.zip_map(&u, |t, u| t - u).unwrap()
        );
    }

    #[test]
    fn momentum_geometric_accumulation() {
        let (eta, m, g, u0) = (0.3, 0.7, 1.25, -0.4);
        let mut s = vs(&[u0]);
        for t in 1..=60 {
            s = momentum_step(&s, &pv(&[g]), &hp(eta, m)).unwrap().0;
            let mt = m.powi(t);
            let expected = eta * g * (1.0 - mt) / (1.0 - m) + mt * u0;
            assert!((s.velocity.get(0) - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn broken_momentum_dense_limit_matches_momentum() {
        let h = hp(0.1, 0.7);
        let mut dense = vs(&[0.0, 0.0, 0.0]);
        let mut broken = BrokenMomentumState::zeros_like(&pv(&[0.0, 0.0, 0.0]));
        for t in 0..20 {
            let x = t as f64;
            let grad = pv(&[x.sin(), -x.cos(), 0.5]);
            let (d, du) = momentum_step(&dense, &grad, &h).unwrap();
            let (b, _, bu) = broken_sparse_momentum_step(&broken, &grad, &h, &SparsifyConfig::dense()).unwrap();
            assert_eq!(du, bu);
            dense = d;
            broken = b;
        }
    }

    #[test]
    fn broken_momentum_zero_gradient_sends_nothing() {
        let h = hp(0.1, 0.7);
        let cfg = SparsifyConfig::new(50.0).unwrap();
        let mut s = BrokenMomentumState::zeros_like(&pv(&[0.0; 4]));
        for _ in 0..10 {
            let (next, g, _) = broken_sparse_momentum_step(&s, &pv(&[0.0; 4]), &h, &cfg).unwrap();
            assert!(g.is_empty());
            s = next;
        }
    }

    #[test]
    fn broken_momentum_loses_the_telescoped_value() {
        // Component 1 is forced below the top-1 cut by a large decoy in component 0
        // for T − 1 steps, then sent. Warm-up step gives it a nonzero velocity.
        let (eta, m, t_gap) = (1.0, 0.5, 4);
        let cfg = SparsifyConfig::new(50.0).unwrap();
        let h = hp(eta, m);
        let warm = pv(&[0.0, 1.0]);
        let mut s = BrokenMomentumState::zeros_like(&warm);
        s = broken_sparse_momentum_step(&s, &warm, &h, &cfg).unwrap().0;
        let u_c = s.velocity.velocity.get(1);
        assert_eq!(u_c, 1.0);
        let grads = [0.1, 0.2, 0.3, 5.0];
        for (i, &g) in grads.iter().enumerate() {
            let decoy = if i + 1 < t_gap { 1e6 } else { 0.0 };
            s = broken_sparse_momentum_step(&s, &pv(&[decoy, g]), &h, &cfg).unwrap().0;
        }
        let telescoped = m * u_c + eta * grads.iter().sum::<f64>();
        let broken = s.velocity.velocity.get(1);
        assert!(broken != telescoped, "broken={broken} telescoped={telescoped}");
    }

    #[test]
    fn dgc_examples() {
        let cfg_keep_all = SparsifyConfig::dense();
        let (s, r, g) =
            dgc_correction_step(&vs(&[0.0]), &pv(&[0.1]), &pv(&[0.1]), &hp(1.0, 0.5), &cfg_keep_all).unwrap();
        assert_eq!(g.values(), &[0.2]);
        assert_eq!(r.as_slice(), &[0.0]);
        assert_eq!(s.velocity.as_slice(), &[0.1]);
    }

    #[test]
    fn dgc_dense_limit_matches_momentum() {
        let h = hp(0.2, 0.6);
        let zero = pv(&[0.0, 0.0]);
        let mut dense = vs(&[0.0, 0.0]);
        let mut dgc = vs(&[0.0, 0.0]);
        let mut residual = zero.clone();
        for t in 0..25 {
            let x = t as f64 * 0.37;
            let grad = pv(&[x.cos(), 1.0 - x]);
            let (d, du) = momentum_step(&dense, &grad, &h).unwrap();
            let (s, r, g) = dgc_correction_step(&dgc, &residual, &grad, &h, &SparsifyConfig::dense()).unwrap();
            assert_eq!(g.densify(zero.partition().clone()).unwrap(), du);
            assert_eq!(r.count_nonzero(), 0);
            dense = d;
            dgc = s;
            residual = r;
        }
    }

    #[test]
    fn dgc_conservation_exact_on_dyadic_grid() {
        // m = 0.5, η = 1 and gradients on a 2^-8 grid keep every sum exact.
        let h = hp(1.0, 0.5);
        let cfg = SparsifyConfig::new(75.0).unwrap();
        let n = 8;
        let mut s = vs(&vec![0.0; n]);
        let mut residual = pv(&vec![0.0; n]);
        let mut sent_total = vec![0.0; n];
        let mut velocity_total = vec![0.0; n];
        for t in 0..40u32 {
            let grad: Vec<f64> = (0..n)
                .map(|i| (((t * 7 + i as u32 * 13) % 17) as f64 - 8.0) / 256.0)
                .collect();
            let (ns, nr, g) = dgc_correction_step(&s, &residual, &pv(&grad), &h, &cfg).unwrap();
            for (i, v) in g.iter() {
                sent_total[i as usize] += v;
            }
            for i in 0..n {
                velocity_total[i] += ns.velocity.get(i);
            }
            s = ns;
            residual = nr;
            for i in 0..n {
                assert_eq!(sent_total[i] + residual.get(i), velocity_total[i]);
            }
        }
    }

    #[test]
    fn samomentum_dense_limit_matches_momentum() {
        let h = hp(0.05, 0.9);
        let mut dense = vs(&[0.0, 0.0, 0.0]);
        let mut sam = vs(&[0.0, 0.0, 0.0]);
        for t in 0..30 {
            let x = t as f64;
            let grad = pv(&[x, -0.5 * x, (x * 0.1).exp()]);
            let (d, du) = momentum_step(&dense, &grad, &h).unwrap();
            let (s, g) = samomentum_step(&sam, &grad, &h, &SparsifyConfig::dense()).unwrap();
            assert_eq!(g.densify(du.partition().clone()).unwrap(), du);
            assert_eq!(s.velocity, d.velocity);
            dense = d;
            sam = s;
        }
    }

    #[test]
    fn samomentum_rejects_zero_momentum() {
        let h = hp(0.1, 0.0);
        assert!(matches!(
            samomentum_step(&vs(&[1.0]), &pv(&[1.0]), &h, &SparsifyConfig::dense()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn samomentum_example_rescales_unsent() {
        let cfg = SparsifyConfig::new(50.0).unwrap();
        let (s, g) = samomentum_step(&vs(&[0.0, 0.0]), &pv(&[2.0, 0.1]), &hp(1.0, 0.5), &cfg).unwrap();
        assert_eq!(g.indices(), &[0]);
        assert_eq!(g.values(), &[2.0]);
        assert_eq!(s.velocity.as_slice(), &[2.0, 0.2]);
    }

    proptest! {
        #[test]
        fn piecewise_velocity_rule(
            prev in prop::collection::vec(-3.0f64..3.0, 1..30),
            grad_seed in prop::collection::vec(-3.0f64..3.0, 30),
            m in 0.1f64..0.9, eta in 0.01f64..1.0, r in 0.0f64..95.0,
        ) {
            let n = prev.len();
            let state = vs(&prev);
            let grad = pv(&grad_seed[..n]);
            let h = hp(eta, m);
            let (next, g) = samomentum_step(&state, &grad, &h, &SparsifyConfig::new(r).unwrap()).unwrap();
            for i in 0..n {
                let blended = m * prev[i] + eta * grad.get(i);
                let expected = if g.get(i as u32).is_some() { blended } else { blended / m };
                prop_assert_eq!(next.velocity.get(i), expected);
            }
        }

        #[test]
        fn telescoping_at_send_time(
            m in 0.1f64..0.9, eta in 0.01f64..1.0, gap in 1usize..10,
            u_c in -2.0f64..2.0, grads in prop::collection::vec(-1.0f64..1.0, 10),
        ) {
            let h = hp(eta, m);
            let mut s = vs(&[u_c]);
            for step in 0..gap {
                let mask: &[u32] = if step + 1 == gap { &[0] } else { &[] };
                s = samomentum_step_masked(&s, &pv(&[grads[step]]), &h, mask).unwrap().0;
            }
            let expected = m * u_c + eta * grads[..gap].iter().sum::<f64>();
            prop_assert!(rel_close(s.velocity.get(0), expected, 1e-12)
                || (s.velocity.get(0) - expected).abs() <= 1e-12);
        }
    }
}
