//! Encoders, recurrent cell and prediction head assembled into one model.

use serde::{Deserialize, Serialize};

use crate::cell::{CellConfig, GruCell, LstmCell, ObsHead, ParticleBelief, PfGru, PfLstm};
use crate::error::{shape_err, Error, Result};
use crate::loss::StepOutputs;
use crate::maze::{MazeMap, INPUT_DIM, TARGET_DIM};
use crate::nn::{scoped, BatchNorm, Conv2d, Linear, Mode, Module};
use crate::rng::RngStream;
use crate::tensor::{concat, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    PfLstm,
    PfGru,
    Lstm,
    Gru,
    LstmBnRelu,
    GruBnRelu,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::PfLstm,
        ModelKind::PfGru,
        ModelKind::Lstm,
        ModelKind::Gru,
        ModelKind::LstmBnRelu,
        ModelKind::GruBnRelu,
    ];

    pub fn is_particle(self) -> bool {
        matches!(self, ModelKind::PfLstm | ModelKind::PfGru)
    }

    pub fn is_lstm(self) -> bool {
        matches!(self, ModelKind::PfLstm | ModelKind::Lstm | ModelKind::LstmBnRelu)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::PfLstm => "pf_lstm",
            ModelKind::PfGru => "pf_gru",
            ModelKind::Lstm => "lstm",
            ModelKind::Gru => "gru",
            ModelKind::LstmBnRelu => "lstm_bnrelu",
            ModelKind::GruBnRelu => "gru_bnrelu",
        }
    }

    /// Accepts the snake-case name in any case, with `-` or `_`.
    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

/// Convolutional map encoder: 3×3 stride-1 conv, 3×3 stride-2 conv (both
/// ReLU), flatten, fully connected + ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapEncoderSpec {
    pub map_size: usize,
    pub filters: usize,
    pub out_dim: usize,
}

impl MapEncoderSpec {
    pub const IN_CHANNELS: usize = 3;
    const KERNEL: usize = 3;

    fn spatial_out(&self) -> Result<usize> {
        let k = Self::KERNEL;
        if self.map_size < k + 2 {
            return Err(Error::Config(format!("map of size {} too small for the map encoder", self.map_size)));
        }
        let s1 = self.map_size - k + 1;
        Ok((s1 - k) / 2 + 1)
    }

    pub fn param_count(&self) -> Result<usize> {
        let (c, f, k) = (Self::IN_CHANNELS, self.filters, Self::KERNEL);
        let s = self.spatial_out()?;
        Ok(c * f * k * k + f + f * f * k * k + f + f * s * s * self.out_dim + self.out_dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hidden: usize,
    /// Particle settings; ignored by baseline kinds.
    pub cell: CellConfig,
    /// Widths of the two fully connected input-encoder layers.
    pub encoder_widths: [usize; 2],
    pub map_encoder: Option<MapEncoderSpec>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, hidden: usize) -> Self {
        Self {
            kind,
            hidden,
            cell: CellConfig::default(),
            encoder_widths: [64, 64],
            map_encoder: None,
            input_dim: INPUT_DIM,
            output_dim: TARGET_DIM,
        }
    }

    /// Particle count actually used (1 for baselines).
    pub fn particles(&self) -> usize {
        if self.kind.is_particle() {
            self.cell.particles
        } else {
            1
        }
    }

    pub fn uses_bn(&self) -> bool {
        match self.kind {
            ModelKind::PfLstm | ModelKind::PfGru => self.cell.bn_relu,
            ModelKind::LstmBnRelu | ModelKind::GruBnRelu => true,
            ModelKind::Lstm | ModelKind::Gru => false,
        }
    }

    /// Width of the features fed to the cell.
    pub fn feature_dim(&self) -> usize {
        self.encoder_widths[1] + self.map_encoder.as_ref().map_or(0, |m| m.out_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.encoder_widths.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if let Some(m) = &self.map_encoder {
            if m.filters == 0 || m.out_dim == 0 {
                return Err(Error::Config("map encoder sizes must be positive".into()));
            }
            m.spatial_out()?;
        }
        if self.kind.is_particle() {
            self.cell.validate()?;
        }
        Ok(())
    }

    /// Trainable scalar count from the layer sizes alone.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let (i, [w1, w2], h, d) = (self.input_dim, self.encoder_widths, self.hidden, self.output_dim);
        let f = self.feature_dim();
        let encoder = i * w1 + w1 + w1 * w2 + w2;
        let map = match &self.map_encoder {
            Some(m) => m.param_count()?,
            None => 0,
        };
        let gate = (h + f) * h + h;
        let gates = if self.kind.is_lstm() { 4 } else { 3 } * gate;
        let bn = if self.uses_bn() { 2 * h } else { 0 };
        let particle = if self.kind.is_particle() {
            gate + ObsHead::param_count(h + f, self.cell.obs_hidden)
        } else {
            0
        };
        let head = h * d + d;
        Ok(encoder + map + gates + bn + particle + head)
    }
}

#[derive(Clone, Debug)]
pub struct MapEncoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub fc: Linear,
}

impl MapEncoder {
    fn new(spec: &MapEncoderSpec, rng: &mut RngStream) -> Result<Self> {
        let k = MapEncoderSpec::KERNEL;
        let s = spec.spatial_out()?;
        Ok(Self {
            conv1: Conv2d::new(MapEncoderSpec::IN_CHANNELS, spec.filters, k, 1, rng)?,
            conv2: Conv2d::new(spec.filters, spec.filters, k, 2, rng)?,
            fc: Linear::new(spec.filters * s * s, spec.out_dim, rng)?,
        })
    }

    /// `[3×n×n]` map planes to a `[1×out]` feature row.
    pub fn forward(&self, planes: &Tensor) -> Result<Tensor> {
        let a = self.conv1.forward(planes)?.relu();
        let b = self.conv2.forward(&a)?.relu();
        let flat = b.reshape(&[1, b.numel()])?;
        Ok(self.fc.forward(&flat)?.relu())
    }
}

impl Module for MapEncoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv1.visit_params(&scoped(prefix, "conv1"), f);
        self.conv2.visit_params(&scoped(prefix, "conv2"), f);
        self.fc.visit_params(&scoped(prefix, "fc"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv1.visit_params_mut(&scoped(prefix, "conv1"), f);
        self.conv2.visit_params_mut(&scoped(prefix, "conv2"), f);
        self.fc.visit_params_mut(&scoped(prefix, "fc"), f);
    }
}

/// One-hot planes (free, gray, black) of a map, `[3×n×n]`.
pub fn map_planes(map: &MazeMap) -> Tensor {
    use crate::maze::CellKind;
    let n = map.size();
    let mut data = vec![0.0; 3 * n * n];
    for i in 0..n {
        for j in 0..n {
            let c = match map.cell(i, j) {
                CellKind::Free => 0,
                CellKind::Gray => 1,
                CellKind::Black => 2,
            };
            data[c * n * n + i * n + j] = 1.0;
        }
    }
    Tensor::new(data, &[3, n, n]).expect("plane shape matches data")
}

#[derive(Clone, Debug)]
pub enum Cell {
    PfLstm(PfLstm),
    PfGru(PfGru),
    Lstm(LstmCell),
    Gru(GruCell),
}

impl Module for Cell {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Cell::PfLstm(c) => c.visit_params(prefix, f),
            Cell::PfGru(c) => c.visit_params(prefix, f),
            Cell::Lstm(c) => c.visit_params(prefix, f),
            Cell::Gru(c) => c.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Cell::PfLstm(c) => c.visit_params_mut(prefix, f),
            Cell::PfGru(c) => c.visit_params_mut(prefix, f),
            Cell::Lstm(c) => c.visit_params_mut(prefix, f),
            Cell::Gru(c) => c.visit_params_mut(prefix, f),
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        match self {
            Cell::PfLstm(c) => c.visit_buffers(prefix, f),
            Cell::PfGru(c) => c.visit_buffers(prefix, f),
            Cell::Lstm(c) => c.visit_buffers(prefix, f),
            Cell::Gru(c) => c.visit_buffers(prefix, f),
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        match self {
            Cell::PfLstm(c) => c.visit_buffers_mut(prefix, f),
            Cell::PfGru(c) => c.visit_buffers_mut(prefix, f),
            Cell::Lstm(c) => c.visit_buffers_mut(prefix, f),
            Cell::Gru(c) => c.visit_buffers_mut(prefix, f),
        }
    }
}

/// Recurrent state carried between steps.
#[derive(Clone, Debug)]
pub enum State {
    Particles(ParticleBelief),
    Lstm { h: Tensor, c: Tensor },
    Gru { h: Tensor },
}

impl State {
    /// Same values with the history cut, for truncated backpropagation.
    pub fn detach(&self) -> State {
        match self {
            State::Particles(b) => State::Particles(ParticleBelief {
                hidden: b.hidden.detach(),
                cell: b.cell.as_ref().map(Tensor::detach),
                log_weights: b.log_weights.detach(),
            }),
            State::Lstm { h, c } => State::Lstm {
                h: h.detach(),
                c: c.detach(),
            },
            State::Gru { h } => State::Gru { h: h.detach() },
        }
    }

    pub fn belief(&self) -> Option<&ParticleBelief> {
        match self {
            State::Particles(b) => Some(b),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub enc1: Linear,
    pub enc2: Linear,
    pub map: Option<MapEncoder>,
    pub cell: Cell,
    pub head: Linear,
}

impl Model {
    pub fn new(spec: ModelSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let [w1, w2] = spec.encoder_widths;
        let enc1 = Linear::new(spec.input_dim, w1, rng)?;
        let enc2 = Linear::new(w1, w2, rng)?;
        let map = match &spec.map_encoder {
            Some(m) => Some(MapEncoder::new(m, rng)?),
            None => None,
        };
        let (f, h) = (spec.feature_dim(), spec.hidden);
        let cell = match spec.kind {
            ModelKind::PfLstm => Cell::PfLstm(PfLstm::new(f, h, spec.cell.clone(), rng)?),
            ModelKind::PfGru => Cell::PfGru(PfGru::new(f, h, spec.cell.clone(), rng)?),
            ModelKind::Lstm => Cell::Lstm(LstmCell::new(f, h, false, rng)?),
            ModelKind::LstmBnRelu => Cell::Lstm(LstmCell::new(f, h, true, rng)?),
            ModelKind::Gru => Cell::Gru(GruCell::new(f, h, false, rng)?),
            ModelKind::GruBnRelu => Cell::Gru(GruCell::new(f, h, true, rng)?),
        };
        let head = Linear::new(h, spec.output_dim, rng)?;
        Ok(Self {
            spec,
            enc1,
            enc2,
            map,
            cell,
            head,
        })
    }

    /// Start predictions from `bias` (typically the mean target).
    pub fn set_head_bias(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.spec.output_dim {
            return Err(shape_err("set_head_bias", format!("{} values for {}", bias.len(), self.spec.output_dim)));
        }
        self.head.bias.update_leaf(|b| b.copy_from_slice(bias));
        Ok(())
    }

    /// The candidate's batch normalization, if the cell has one.
    pub fn batchnorm_mut(&mut self) -> Option<&mut BatchNorm> {
        match &mut self.cell {
            Cell::PfLstm(c) => c.gates.bn.as_mut(),
            Cell::PfGru(c) => c.gates.bn.as_mut(),
            Cell::Lstm(c) => c.gates.bn.as_mut(),
            Cell::Gru(c) => c.gates.bn.as_mut(),
        }
    }

    pub fn initial_state(&self, batch: usize) -> State {
        let h = self.spec.hidden;
        match &self.cell {
            Cell::PfLstm(c) => State::Particles(c.initial_belief(batch)),
            Cell::PfGru(c) => State::Particles(c.initial_belief(batch)),
            Cell::Lstm(_) => State::Lstm {
                h: Tensor::zeros(&[batch, h]),
                c: Tensor::zeros(&[batch, h]),
            },
            Cell::Gru(_) => State::Gru {
                h: Tensor::zeros(&[batch, h]),
            },
        }
    }

    /// Map features `[1×M]`, or `None` without a map encoder.
    pub fn encode_map(&self, planes: Option<&Tensor>) -> Result<Option<Tensor>> {
        match (&self.map, planes) {
            (Some(enc), Some(p)) => Ok(Some(enc.forward(p)?)),
            (Some(_), None) => Err(Error::Config("model has a map encoder but no map was given".into())),
            (None, _) => Ok(None),
        }
    }

    /// Encoded step input, with map features appended to every row.
    pub fn features(&self, x: &Tensor, map_feat: Option<&Tensor>) -> Result<Tensor> {
        let e = self.enc2.forward(&self.enc1.forward(x)?.relu())?.relu();
        match map_feat {
            Some(m) => {
                let rows = vec![0; x.shape()[0]];
                concat(&[e, m.gather_rows(&rows)?], 1)
            }
            None => Ok(e),
        }
    }

    pub fn step(
        &mut self,
        state: &State,
        x: &Tensor,
        map_feat: Option<&Tensor>,
        rng: &mut RngStream,
        mode: Mode,
    ) -> Result<(State, StepOutputs)> {
        let feat = self.features(x, map_feat)?;
        match (&mut self.cell, state) {
            (Cell::PfLstm(_) | Cell::PfGru(_), State::Particles(belief)) => {
                let (next, aux) = match &mut self.cell {
                    Cell::PfLstm(c) => c.step(belief, &feat, rng, mode)?,
                    Cell::PfGru(c) => c.step(belief, &feat, rng, mode)?,
                    _ => unreachable!(),
                };
                let out = StepOutputs {
                    mean_pred: self.head.forward(&next.mean_particle()?)?,
                    particle_preds: self.head.forward(&aux.hidden)?,
                    log_weights: aux.log_weights.clone(),
                };
                Ok((State::Particles(next), out))
            }
            (Cell::Lstm(cell), State::Lstm { h, c }) => {
                let (h, c) = cell.step(h, c, &feat, mode)?;
                let out = self.deterministic_outputs(&h)?;
                Ok((State::Lstm { h, c }, out))
            }
            (Cell::Gru(cell), State::Gru { h }) => {
                let h = cell.step(h, &feat, mode)?;
                let out = self.deterministic_outputs(&h)?;
                Ok((State::Gru { h }, out))
            }
            _ => Err(Error::Config("state does not match the model's cell".into())),
        }
    }

    fn deterministic_outputs(&self, h: &Tensor) -> Result<StepOutputs> {
        let pred = self.head.forward(h)?;
        Ok(StepOutputs {
            mean_pred: pred.clone(),
            particle_preds: pred,
            log_weights: Tensor::zeros(&[h.shape()[0], 1]),
        })
    }

    /// Run `xs` (one `[B×input]` tensor per step) from `state`.
    pub fn unroll(
        &mut self,
        state: State,
        xs: &[Tensor],
        planes: Option<&Tensor>,
        rng: &mut RngStream,
        mode: Mode,
    ) -> Result<(State, Vec<StepOutputs>)> {
        let map_feat = self.encode_map(planes)?;
        let mut state = state;
        let mut outs = Vec::with_capacity(xs.len());
        for x in xs {
            let (next, out) = self.step(&state, x, map_feat.as_ref(), rng, mode)?;
            state = next;
            outs.push(out);
        }
        Ok((state, outs))
    }
}

impl Module for Model {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.enc1.visit_params(&scoped(prefix, "enc1"), f);
        self.enc2.visit_params(&scoped(prefix, "enc2"), f);
        if let Some(m) = &self.map {
            m.visit_params(&scoped(prefix, "map"), f);
        }
        self.cell.visit_params(&scoped(prefix, "cell"), f);
        self.head.visit_params(&scoped(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.enc1.visit_params_mut(&scoped(prefix, "enc1"), f);
        self.enc2.visit_params_mut(&scoped(prefix, "enc2"), f);
        if let Some(m) = &mut self.map {
            m.visit_params_mut(&scoped(prefix, "map"), f);
        }
        self.cell.visit_params_mut(&scoped(prefix, "cell"), f);
        self.head.visit_params_mut(&scoped(prefix, "head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.cell.visit_buffers(&scoped(prefix, "cell"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.cell.visit_buffers_mut(&scoped(prefix, "cell"), f);
    }
}
