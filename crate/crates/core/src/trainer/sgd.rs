use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Step schedule: `initial * factor^(number of decay epochs <= epoch)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            decay_epochs: Vec::new(),
            factor: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0) {
            return Err(Error::invalid(format!(
                "lr decay factor must be > 0, got {}",
                self.factor
            )));
        }
        if !(self.initial >= 0.0) || !self.initial.is_finite() {
            return Err(Error::invalid(format!(
                "initial lr must be finite and >= 0, got {}",
                self.initial
            )));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "lr decay epochs must be strictly increasing, got {:?}",
                self.decay_epochs
            )));
        }
        Ok(())
    }
}

pub fn lr_at(epoch: usize, s: &LrSchedule) -> f64 {
    let k = s.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    s.initial * s.factor.powi(k as i32)
}

/// Hyper-parameters of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate (and checkpoint) every this many epochs; 0 disables.
    pub eval_every: usize,
    pub augment: bool,
}

impl TrainConfig {
    /// CIFAR protocol: lr 0.1 divided by 10 at epoch 80, 150 epochs, batch 64.
    pub fn cifar() -> Self {
        TrainConfig {
            schedule: LrSchedule {
                initial: 0.1,
                decay_epochs: vec![80],
                factor: 0.1,
            },
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 150,
            batch_size: 64,
            seed: 0,
            eval_every: 1,
            augment: true,
        }
    }

    /// ImageNet protocol: lr 0.06 divided by 10 at epochs 50 and 70, 90 epochs, batch 128.
    pub fn imagenet() -> Self {
        TrainConfig {
            schedule: LrSchedule {
                initial: 0.06,
                decay_epochs: vec![50, 70],
                factor: 0.1,
            },
            epochs: 90,
            batch_size: 128,
            ..TrainConfig::cifar()
        }
    }

    /// Same protocol on a desk budget.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 20,
            schedule: LrSchedule {
                initial: 0.1,
                decay_epochs: vec![15],
                factor: 0.1,
            },
            ..TrainConfig::cifar()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be >= 0"));
        }
        Ok(())
    }
}

/// `v = momentum * v + (g + wd * p)`, `p -= lr * v` for every parameter,
/// BN scale/shift and biases included. Nothing is modified if any gradient
/// is non-finite.
pub fn sgd_step<T: Scalar>(
    store: &mut ParamStore<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if let Some(p) = store.params().iter().find(|p| !p.grad.all_finite()) {
        let bad = p.grad.data().iter().filter(|v| !v.is_finite()).count();
        return Err(Error::NonFinite(format!(
            "gradient of {} has {bad} non-finite entries; step aborted",
            p.name
        )));
    }
    let (lr, m, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for p in store.params_mut() {
        let value = p.value.data_mut();
        let mom = p.momentum.data_mut();
        for ((w, v), &g) in value.iter_mut().zip(mom.iter_mut()).zip(p.grad.data()) {
            *v = m * *v + (g + wd * *w);
            *w -= lr * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn cifar_and_imagenet_schedules() {
        let c = TrainConfig::cifar().schedule;
        assert_eq!(lr_at(0, &c), 0.1);
        assert!((lr_at(80, &c) - 0.01).abs() < 1e-15);
        assert!((lr_at(149, &c) - 0.01).abs() < 1e-15);
        let i = TrainConfig::imagenet().schedule;
        assert_eq!(lr_at(49, &i), 0.06);
        assert!((lr_at(50, &i) - 0.006).abs() < 1e-15);
        assert!((lr_at(70, &i) - 0.0006).abs() < 1e-15);
        assert_eq!(lr_at(1000, &LrSchedule::constant(0.3)), 0.3);
    }

    #[test]
    fn schedule_validation() {
        let mut s = LrSchedule::constant(0.1);
        s.factor = 0.0;
        assert!(s.validate().is_err());
        s.factor = 0.1;
        s.decay_epochs = vec![5, 5];
        assert!(s.validate().is_err());
    }

    #[test]
    fn plain_sgd_subtracts_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add_param("w", Tensor::full(Shape::vector(3), 2.0))
            .unwrap();
        store.param_mut(id).grad =
            Tensor::from_vec(Shape::vector(3), vec![0.5, -1.0, 3.0]).unwrap();
        sgd_step(&mut store, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(store.param(id).value.data(), &[1.5, 3.0, -1.0]);
    }

    #[test]
    fn momentum_decays_geometrically() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add_param("w", Tensor::zeros(Shape::vector(1)))
            .unwrap();
        store.param_mut(id).momentum.fill(1.0);
        for k in 1..=5 {
            sgd_step(&mut store, 0.1, 0.9, 0.0).unwrap();
            assert!((store.param(id).momentum.data()[0] - 0.9f64.powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::<f32>::new();
        store
            .add_param("ok", Tensor::ones(Shape::vector(2)))
            .unwrap();
        let id = store
            .add_param("stage1.block2.conv1.weight", Tensor::ones(Shape::vector(2)))
            .unwrap();
        store.param_mut(id).grad.data_mut()[1] = f32::NAN;
        let err = sgd_step(&mut store, 0.1, 0.9, 1e-4).unwrap_err();
        assert!(
            err.to_string().contains("stage1.block2.conv1.weight"),
            "{err}"
        );
        assert!(store
            .params()
            .iter()
            .all(|p| p.value.data().iter().all(|&v| v == 1.0)));
    }
}
