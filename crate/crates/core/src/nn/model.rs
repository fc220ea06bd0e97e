use serde::{Deserialize, Serialize};

use super::functional;
use super::layers::{ConvBlock, ConvLayer, LinearLayer};
use super::params::{Bind, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ssl::AuxKind;
use crate::tasks::Task;

/// Shape hyperparameters of the shared trunk and the heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub in_channels: usize,
    /// Output channels of the stride-2 encoder stages; the first entry is
    /// also the width of the stem and of the final shared feature map.
    pub widths: Vec<usize>,
    pub groups: usize,
    pub gn_eps: f64,
    /// Add encoder activations onto decoder activations of equal resolution.
    pub skip: bool,
    pub embed_dim: usize,
    /// Side of the pooled grid for local embeddings.
    pub grid: usize,
    /// Hidden width of the projection heads; `None` uses the feature width.
    pub hidden: Option<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64],
            groups: 8,
            gn_eps: 1e-5,
            skip: true,
            embed_dim: 128,
            grid: 4,
            hidden: None,
        }
    }
}

impl ArchConfig {
    pub fn feature_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.unwrap_or_else(|| self.feature_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("arch.widths must be non-empty and positive".into()));
        }
        if self.groups == 0 || self.widths.iter().any(|w| w % self.groups != 0) {
            return Err(Error::Config(format!(
                "arch.groups = {} must divide every width {:?}",
                self.groups, self.widths
            )));
        }
        if self.in_channels == 0 || self.embed_dim == 0 || self.grid == 0 || self.hidden == Some(0) {
            return Err(Error::Config("arch sizes must be positive".into()));
        }
        if !(self.gn_eps >= 0.0) {
            return Err(Error::Config("arch.gn_eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// Encoder of stride-2 conv blocks behind a full-resolution stem, and a
/// decoder that upsamples back to the input size.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    pub stem: ConvBlock,
    pub encoder: Vec<ConvBlock>,
    pub decoder: Vec<ConvBlock>,
    pub skip: bool,
}

impl Trunk {
    pub fn new(arch: &ArchConfig) -> Self {
        let (g, eps) = (arch.groups, arch.gn_eps);
        let w = &arch.widths;
        let stem = ConvBlock::new("trunk.stem", arch.in_channels, w[0], 1, g, eps);
        let mut encoder = Vec::new();
        let mut prev = w[0];
        for (i, &width) in w.iter().enumerate() {
            encoder.push(ConvBlock::new(&format!("trunk.enc{}", i + 1), prev, width, 2, g, eps));
            prev = width;
        }
        // decoder stage i maps back onto the resolution and width of encoder
        // stage i - 1 (the stem for i = 0)
        let mut decoder = Vec::new();
        for i in (0..w.len()).rev() {
            let out = if i == 0 { w[0] } else { w[i - 1] };
            decoder.push(ConvBlock::new(&format!("trunk.dec{}", i + 1), w[i], out, 1, g, eps));
        }
        Self { stem, encoder, decoder, skip: arch.skip }
    }

    pub fn init(&self, seed: u64, store: &mut ParamStore) {
        self.stem.init(seed, store);
        for b in self.encoder.iter().chain(&self.decoder) {
            b.init(seed, store);
        }
    }

    /// Shared feature map at the input resolution.
    pub fn forward(&self, tape: &mut Tape, p: &Bind, x: Var) -> Result<Var> {
        let mut y = self.stem.forward(tape, p, x)?;
        let mut stack = vec![y];
        for block in &self.encoder {
            y = block.forward(tape, p, y)?;
            stack.push(y);
        }
        stack.pop();
        for block in &self.decoder {
            let target = stack.pop().expect("one skip per decoder stage");
            let (th, tw) = {
                let s = tape.shape(target);
                (s[2], s[3])
            };
            let up = functional::bilinear_upsample(tape, y, th, tw)?;
            y = block.forward(tape, p, up)?;
            if self.skip {
                y = tape.add(y, target)?;
            }
        }
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotHead {
    pub fc: LinearLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MocoHead {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

impl MocoHead {
    /// Pooled, projected and not yet normalised embedding `[N, D]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bind, feats: Var) -> Result<Var> {
        let pooled = functional::global_avg_pool(tape, feats)?;
        let h = self.fc1.forward(tape, p, pooled)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, p, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseClHead {
    pub global: MocoHead,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub grid: usize,
}

impl DenseClHead {
    /// Unnormalised local embeddings, one row per grid cell: `[N * S * S, D]`.
    pub fn forward_local(&self, tape: &mut Tape, p: &Bind, feats: Var) -> Result<Var> {
        let pooled = functional::adaptive_avg_pool(tape, feats, self.grid)?;
        let h = self.conv1.forward(tape, p, pooled)?;
        let h = tape.relu(h);
        let z = self.conv2.forward(tape, p, h)?;
        functional::to_rows(tape, z)
    }
}

/// Auxiliary head, used only while training.
#[derive(Clone, Debug, PartialEq)]
pub enum AuxHead {
    None,
    Rot(RotHead),
    Moco(MocoHead),
    DenseCl(DenseClHead),
}

/// Architecture of trunk plus heads. Holds no parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: ArchConfig,
    pub trunk: Trunk,
    pub target_heads: Vec<(Task, ConvLayer)>,
    pub aux: AuxHead,
}

/// Number of target channels for each task given the class count.
pub fn task_channels(task: Task, classes: usize) -> usize {
    match task {
        Task::Depth | Task::Boundary => 1,
        Task::Semseg => classes,
    }
}

impl Model {
    pub fn new(arch: &ArchConfig, tasks: &[Task], classes: usize, aux: AuxKind) -> Result<Self> {
        arch.validate()?;
        let fd = arch.feature_dim();
        let hidden = arch.hidden_dim();
        let target_heads = tasks
            .iter()
            .map(|&t| (t, ConvLayer::pointwise(format!("head.{}", t.name()), fd, task_channels(t, classes))))
            .collect();
        let moco = || MocoHead {
            fc1: LinearLayer::new("aux.global.fc1", fd, hidden),
            fc2: LinearLayer::new("aux.global.fc2", hidden, arch.embed_dim),
        };
        let aux = match aux {
            AuxKind::None => AuxHead::None,
            AuxKind::Rot => AuxHead::Rot(RotHead { fc: LinearLayer::new("aux.rot.fc", fd, 4) }),
            AuxKind::Moco => AuxHead::Moco(moco()),
            AuxKind::DenseCl => AuxHead::DenseCl(DenseClHead {
                global: moco(),
                conv1: ConvLayer::pointwise("aux.local.conv1", fd, hidden),
                conv2: ConvLayer::pointwise("aux.local.conv2", hidden, arch.embed_dim),
                grid: arch.grid,
            }),
        };
        Ok(Self { arch: arch.clone(), trunk: Trunk::new(arch), target_heads, aux })
    }

    /// He-normal weights, zero biases, unit GN scale; deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        self.trunk.init(seed, &mut store);
        for (_, head) in &self.target_heads {
            head.init(seed, &mut store);
        }
        match &self.aux {
            AuxHead::None => {}
            AuxHead::Rot(h) => h.fc.init(seed, &mut store),
            AuxHead::Moco(h) => {
                h.fc1.init(seed, &mut store);
                h.fc2.init(seed, &mut store);
            }
            AuxHead::DenseCl(h) => {
                h.global.fc1.init(seed, &mut store);
                h.global.fc2.init(seed, &mut store);
                h.conv1.init(seed, &mut store);
                h.conv2.init(seed, &mut store);
            }
        }
        store
    }

    pub fn features(&self, tape: &mut Tape, p: &Bind, x: Var) -> Result<Var> {
        self.trunk.forward(tape, p, x)
    }

    pub fn target_head(&self, task: Task) -> Result<&ConvLayer> {
        self.target_heads
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, h)| h)
            .ok_or_else(|| Error::Config(format!("model has no head for task {}", task.name())))
    }

    /// Dense prediction `[N, channels, H, W]` for `task`.
    pub fn predict(&self, tape: &mut Tape, p: &Bind, task: Task, feats: Var) -> Result<Var> {
        self.target_head(task)?.forward(tape, p, feats)
    }

    /// Parameter names the query branch of a momentum encoder uses.
    pub fn is_query_param(name: &str) -> bool {
        name.starts_with("trunk.") || name.starts_with("aux.")
    }
}
