use super::functional;
use super::params::{init_tensor, Bind, Init, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::Result;

/// 2-D convolution with zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self { name: name.into(), in_ch, out_ch, kernel, stride, padding }
    }

    pub fn pointwise(name: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        Self::new(name, in_ch, out_ch, 1, 1, 0)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    pub fn init(&self, seed: u64, store: &mut ParamStore) {
        let fan_in = self.in_ch * self.kernel * self.kernel;
        let wn = self.weight_name();
        let shape = [self.out_ch, self.in_ch, self.kernel, self.kernel];
        store.insert(wn.clone(), init_tensor(seed, &wn, &shape, Init::HeNormal { fan_in }));
        store.insert(self.bias_name(), init_tensor(seed, "", &[self.out_ch], Init::Const(0.0)));
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bind, x: Var) -> Result<Var> {
        let w = p.var(tape, &self.weight_name())?;
        let b = p.var(tape, &self.bias_name())?;
        functional::conv2d(tape, x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupNormLayer {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNormLayer {
    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}.gamma", self.name), init_tensor(0, "", &[self.channels], Init::Const(1.0)));
        store.insert(format!("{}.beta", self.name), init_tensor(0, "", &[self.channels], Init::Const(0.0)));
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bind, x: Var) -> Result<Var> {
        let g = p.var(tape, &format!("{}.gamma", self.name))?;
        let b = p.var(tape, &format!("{}.beta", self.name))?;
        functional::group_norm(tape, x, g, b, self.groups, self.eps)
    }
}

/// Fully connected layer, `y = x W^T + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self { name: name.into(), in_dim, out_dim }
    }

    pub fn init(&self, seed: u64, store: &mut ParamStore) {
        let wn = format!("{}.weight", self.name);
        let w = init_tensor(seed, &wn, &[self.out_dim, self.in_dim], Init::HeNormal { fan_in: self.in_dim });
        store.insert(wn, w);
        store.insert(format!("{}.bias", self.name), init_tensor(0, "", &[self.out_dim], Init::Const(0.0)));
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bind, x: Var) -> Result<Var> {
        let w = p.var(tape, &format!("{}.weight", self.name))?;
        let b = p.var(tape, &format!("{}.bias", self.name))?;
        functional::linear(tape, w, b, x)
    }
}

/// Conv, group norm, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: ConvLayer,
    pub norm: GroupNormLayer,
}

impl ConvBlock {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, groups: usize, eps: f64) -> Self {
        Self {
            conv: ConvLayer::new(format!("{name}.conv"), in_ch, out_ch, 3, stride, 1),
            norm: GroupNormLayer { name: format!("{name}.gn"), channels: out_ch, groups, eps },
        }
    }

    pub fn init(&self, seed: u64, store: &mut ParamStore) {
        self.conv.init(seed, store);
        self.norm.init(store);
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bind, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        let y = self.norm.forward(tape, p, y)?;
        Ok(tape.relu(y))
    }
}
