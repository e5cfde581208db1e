//! The encoder/decoder segmentation network with attention at the
//! bottleneck.

mod checkpoint;

pub use checkpoint::{load_checkpoint, load_into, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionCapture, Csam, DEFAULT_POSITION_BUDGET};
use crate::error::{Error, Result};
use crate::nn::{max_pool, Conv, ConvSpec, ConvTranspose, Forward, Mode, ParamStore, ResidualBlock};
use crate::tensor::{Real, Tensor, Var};

pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of spatial axes: 2 or 3.
    pub dims: usize,
    pub in_channels: usize,
    pub base_width: usize,
    pub levels: usize,
    pub sab: bool,
    pub cab: bool,
    pub capture_attention: bool,
    /// Largest bottleneck position count volumetric spatial attention accepts.
    pub position_budget: usize,
}

impl ModelConfig {
    pub fn planar() -> Self {
        ModelConfig {
            dims: 2,
            in_channels: 1,
            base_width: 32,
            levels: LEVELS,
            sab: true,
            cab: true,
            capture_attention: false,
            position_budget: DEFAULT_POSITION_BUDGET,
        }
    }

    pub fn volumetric() -> Self {
        ModelConfig { dims: 3, base_width: 16, ..Self::planar() }
    }

    pub fn with_base_width(mut self, base: usize) -> Self {
        self.base_width = base;
        self
    }

    pub fn with_attention(mut self, sab: bool, cab: bool) -> Self {
        self.sab = sab;
        self.cab = cab;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::Config(format!("dims must be 2 or 3, got {}", self.dims)));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("in_channels and base_width must be at least 1".into()));
        }
        if self.levels != LEVELS {
            return Err(Error::Config(format!("levels is fixed at {LEVELS}, got {}", self.levels)));
        }
        Ok(())
    }

    /// Encoder width at `level`: `base * 2^level`.
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial extents must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: ConvTranspose,
    block: ResidualBlock,
}

/// Layer structure; parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    encoder: Vec<ResidualBlock>,
    csam: Csam,
    decoder: Vec<DecoderLevel>,
    head: Conv,
}

impl Network {
    pub fn build<T: Real, R: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let r = config.dims;
        let mut encoder = Vec::with_capacity(config.levels);
        let mut cin = config.in_channels;
        for i in 0..config.levels {
            let w = config.width(i);
            encoder.push(ResidualBlock::new(store, &format!("encoder.{i}"), cin, w, r, rng)?);
            cin = w;
        }
        let deepest = config.width(config.levels - 1);
        let csam = Csam::new(store, "csam", deepest, r, config.sab, config.cab, config.position_budget, rng)?;
        let mut decoder: Vec<Option<DecoderLevel>> = vec![None; config.levels];
        let mut below = deepest;
        for i in (0..config.levels).rev() {
            let w = config.width(i);
            let up = ConvTranspose::new(store, &format!("decoder.{i}.up"), ConvSpec::upsample(below, w, r), rng)?;
            let block = ResidualBlock::new(store, &format!("decoder.{i}.block"), 2 * w, w, r, rng)?;
            decoder[i] = Some(DecoderLevel { up, block });
            below = w;
        }
        let head = Conv::new(store, "head", ConvSpec::new(config.width(0), 1, &vec![1; r]), rng)?;
        Ok(Network {
            config: config.clone(),
            encoder,
            csam,
            decoder: decoder.into_iter().map(|d| d.expect("every level built")).collect(),
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        let c = &self.config;
        if dims.len() != c.dims + 2 {
            return Err(Error::dim(format!(
                "expected input [B, {}, {} spatial axes], got {dims:?}",
                c.in_channels, c.dims
            )));
        }
        if dims[1] != c.in_channels {
            return Err(Error::dim(format!("expected {} input channels, got {}", c.in_channels, dims[1])));
        }
        let m = c.required_multiple();
        if let Some(d) = dims[2..].iter().find(|&&d| d % m != 0 || d == 0) {
            return Err(Error::dim(format!(
                "spatial extent {d} in {dims:?} is not a multiple of {m}"
            )));
        }
        Ok(())
    }

    /// Per-pixel foreground probabilities `[B, 1, spatial]`.
    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let logits = self.logits(f, x)?;
        f.tape.sigmoid(logits)
    }

    pub fn logits<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        self.check_input(f.tape.shape(x).dims())?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for block in &self.encoder {
            let e = block.forward(f, h)?;
            skips.push(e);
            h = max_pool(&mut f.tape, e)?;
        }
        h = self.csam.forward(f, h)?;
        for (level, skip) in self.decoder.iter().zip(skips).rev() {
            let up = level.up.forward(f, h)?;
            let cat = f.tape.concat(&[skip, up], 1)?;
            h = level.block.forward(f, cat)?;
        }
        self.head.forward(f, h)
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub net: Network,
    pub store: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Network::build(config, &mut store, &mut rng)?;
        Ok(Model { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { net: self.net.clone(), store: self.store.cast() }
    }

    /// Eval-mode probabilities without recording gradients.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.predict_with_capture(x, None)?.0)
    }

    /// Eval-mode probabilities, optionally capturing up to `max_rows` rows of
    /// each attention matrix.
    pub fn predict_with_capture(
        &mut self,
        x: &Tensor<T>,
        max_rows: Option<usize>,
    ) -> Result<(Tensor<T>, Option<AttentionCapture>)> {
        let mut f = Forward::inference(&mut self.store, Mode::Eval);
        if let Some(rows) = max_rows {
            f.enable_capture(rows);
        }
        let xv = f.input(x.clone());
        let y = self.net.forward(&mut f, xv)?;
        let out = f.tape.tensor(y);
        Ok((out, f.take_capture()))
    }
}
