use ndarray::{Array1, Array4, ArrayD, IxDyn};

use super::init;
use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};

/// Forward-pass context. `frozen` inserts parameters as constants so that a
/// sub-network can be run without receiving weight gradients while gradients
/// still flow through to its inputs.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub frozen: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Self { tape, store, frozen: false }
    }

    pub fn frozen(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Self { tape, store, frozen: true }
    }

    pub fn p(&mut self, id: ParamId) -> NodeId {
        if self.frozen {
            self.tape.constant(self.store.value(id).clone())
        } else {
            self.tape.param(self.store, id)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let mut rng = init::rng_for(seed, name);
        let w = Array4::from_shape_vec(
            (out_c, in_c, kernel, kernel),
            init::he_normal(&mut rng, fan_in, out_c * fan_in),
        )
        .unwrap();
        // small positive bias: keeps pre-activations of fully clamped
        // receptive fields off the exact ReLU kink
        let b = Array1::<f64>::from_elem(out_c, 0.01);
        Self {
            w: store.insert(format!("{name}.weight"), w.into_dyn()),
            b: store.insert(format!("{name}.bias"), b.into_dyn()),
            stride,
            pad,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        ctx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

pub enum LinearInit {
    He,
    /// Weights and bias at zero; the layer starts as the constant zero map.
    Zero,
    /// Normal with the given std, for heads that should start near-identity.
    Scaled(f64),
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        style: LinearInit,
    ) -> Self {
        let mut rng = init::rng_for(seed, name);
        let data = match style {
            LinearInit::He => init::he_normal(&mut rng, in_dim, in_dim * out_dim),
            LinearInit::Zero => vec![0.0; in_dim * out_dim],
            LinearInit::Scaled(std) => init::scaled_normal(&mut rng, std, in_dim * out_dim),
        };
        let w = ArrayD::from_shape_vec(IxDyn(&[out_dim, in_dim]), data).unwrap();
        let b = ArrayD::zeros(IxDyn(&[out_dim]));
        Self {
            w: store.insert(format!("{name}.weight"), w),
            b: store.insert(format!("{name}.bias"), b),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        ctx.tape.linear(x, w, b)
    }
}

/// Stack of fully connected layers with ReLU between them (none after the
/// last layer).
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        dims: &[usize],
        last_init: LinearInit,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let style = if i == dims.len() - 2 {
                match last_init {
                    LinearInit::He => LinearInit::He,
                    LinearInit::Zero => LinearInit::Zero,
                    LinearInit::Scaled(s) => LinearInit::Scaled(s),
                }
            } else {
                LinearInit::He
            };
            layers.push(Linear::new(
                store,
                seed,
                &format!("{name}.fc{i}"),
                dims[i],
                dims[i + 1],
                style,
            ));
        }
        Self { layers }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ctx, h);
            if i + 1 < self.layers.len() {
                h = ctx.tape.relu(h);
            }
        }
        h
    }
}

/// Per-channel instance normalization without learned affine parameters,
/// expressed through the AdaIN op with gamma=1, beta=0.
pub fn instance_norm(ctx: &mut Ctx, x: NodeId, eps: f64) -> NodeId {
    let shape = ctx.tape.value(x).shape();
    let (n, c) = (shape[0], shape[1]);
    let ones = ctx
        .tape
        .constant(ArrayD::from_elem(IxDyn(&[n, c]), 1.0));
    let zeros = ctx.tape.constant(ArrayD::zeros(IxDyn(&[n, c])));
    ctx.tape.adain(x, ones, zeros, eps)
}
