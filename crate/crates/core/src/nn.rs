//! Parameterised layers over the tape primitives.

use rand::Rng;

use crate::error::Result;
use crate::params::ParamId;
use crate::params::ParamStore;
use crate::tape::{BatchNormRef, Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Kaiming-uniform (fan-in, ReLU gain) bound.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

/// Construction options for [`Conv2d`].
#[derive(Clone, Copy, Debug)]
pub struct ConvOpts {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvOpts {
    /// Square kernel, "same" padding for odd kernels, stride 1, no bias.
    pub fn k(kernel: usize) -> Self {
        ConvOpts {
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        opts: ConvOpts,
        rng: &mut R,
    ) -> Result<Self> {
        let cin_g = in_c / opts.groups.max(1);
        let fan_in = cin_g * opts.kernel * opts.kernel;
        let w = Tensor::uniform(
            Shape::new(out_c, cin_g, opts.kernel, opts.kernel),
            kaiming_bound(fan_in),
            rng,
        );
        let weight = store.add_param(format!("{name}.weight"), w)?;
        let bias = if opts.bias {
            Some(store.add_param(format!("{name}.bias"), Tensor::zeros(Shape::vector(out_c)))?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            in_c,
            out_c,
            kernel: opts.kernel,
            stride: opts.stride,
            padding: opts.padding,
            groups: opts.groups,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let b = self.bias.map(|b| tape.param(b)).transpose()?;
        tape.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }

    pub fn num_params(&self) -> usize {
        self.out_c * (self.in_c / self.groups) * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_c } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub inner: BatchNormRef,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let v = Shape::vector(channels);
        let gamma = store.add_param(format!("{name}.weight"), Tensor::ones(v))?;
        let beta = store.add_param(format!("{name}.bias"), Tensor::zeros(v))?;
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(v))?;
        let running_var = store.add_buffer(format!("{name}.running_var"), Tensor::ones(v))?;
        Ok(BatchNorm2d {
            inner: BatchNormRef {
                gamma,
                beta,
                running_mean,
                running_var,
                eps: BN_EPS,
                momentum: BN_MOMENTUM,
            },
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        tape.batch_norm(x, &self.inner)
    }

    /// Make the eval-mode transform exactly the identity
    /// (`gamma = 1`, `beta = 0`, `mean = 0`, `var + eps = 1`).
    pub fn set_identity<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.param_mut(self.inner.gamma).value.fill(T::one());
        store.param_mut(self.inner.beta).value.fill(T::zero());
        store
            .buffer_mut(self.inner.running_mean)
            .value
            .fill(T::zero());
        store
            .buffer_mut(self.inner.running_var)
            .value
            .fill(T::lit(1.0 - self.inner.eps));
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = Tensor::uniform(
            Shape::new(out_features, in_features, 1, 1),
            kaiming_bound(in_features),
            rng,
        );
        let weight = store.add_param(format!("{name}.weight"), w)?;
        let bias = if bias {
            Some(store.add_param(
                format!("{name}.bias"),
                Tensor::zeros(Shape::vector(out_features)),
            )?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let b = self.bias.map(|b| tape.param(b)).transpose()?;
        tape.linear(x, w, b)
    }
}
