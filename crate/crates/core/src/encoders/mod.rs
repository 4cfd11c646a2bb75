//! View-specific feature encoders: configurable convolutional (or dense)
//! stacks with exact reverse-mode gradients.
//!
//! The convolutional path follows a VGG-ish pattern of 3×3/pad-1 convolution
//! blocks with batch norm and ELU, 2×2 max pooling between blocks, a final
//! linear 1×1 convolution down to `h` maps (batch-normalized, no activation),
//! and global average pooling. A dense path supports flat inputs for small
//! experiments.

mod layers;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::numerics::Matrix;
use crate::rng::Rng;
use crate::tensor::Tensor;
use layers::{
    elu_backward, elu_forward, ensure_rank, gap_backward, gap_forward, maxpool_backward,
    maxpool_forward, BatchNorm, Conv2d, Dense, LayerCache, LayerGrads,
};

/// One entry of an encoder configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// 3×3 convolution, padding 1.
    Conv { maps: usize },
    /// 1×1 convolution, padding 0, no activation afterwards (the projection
    /// down to the correlation space).
    Conv1x1Linear { maps: usize },
    BatchNorm,
    Elu,
    /// 2×2 max pooling, stride 2; odd trailing rows/columns are dropped.
    MaxPool,
    GlobalAvgPool,
    Dense { units: usize },
}

/// Input geometry of one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputShape {
    Image { channels: usize, height: usize, width: usize },
    Flat { features: usize },
}

impl InputShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            InputShape::Image { channels, height, width } => vec![channels, height, width],
            InputShape::Flat { features } => vec![features],
        }
    }

    pub fn from_dims(dims: &[usize]) -> Result<InputShape> {
        match dims {
            [features] => Ok(InputShape::Flat { features: *features }),
            [c, h, w] => Ok(InputShape::Image { channels: *c, height: *h, width: *w }),
            other => Err(Error::Dimension(format!(
                "input shape must be rank 1 or 3, got {other:?}"
            ))),
        }
    }
}

/// Ordered layer list for one encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: Vec<LayerSpec>,
}

impl EncoderConfig {
    /// Small two-block configuration for fast experiments: conv maps 8 and 16,
    /// linear 1×1 projection to `h`, global average pooling.
    pub fn desk(h: usize) -> Self {
        use LayerSpec::*;
        EncoderConfig {
            layers: vec![
                Conv { maps: 8 },
                BatchNorm,
                Elu,
                MaxPool,
                Conv { maps: 16 },
                BatchNorm,
                Elu,
                MaxPool,
                Conv1x1Linear { maps: h },
                BatchNorm,
                GlobalAvgPool,
            ],
        }
    }

    /// The full retrieval architecture: four double-conv blocks
    /// (16, 32, 64, 64 maps) each followed by max pooling, then a linear 1×1
    /// projection to 32 maps and global average pooling.
    pub fn paper_table1() -> Self {
        use LayerSpec::*;
        let mut layers = Vec::new();
        for maps in [16usize, 32, 64, 64] {
            for _ in 0..2 {
                layers.push(Conv { maps });
                layers.push(BatchNorm);
                layers.push(Elu);
            }
            layers.push(MaxPool);
        }
        layers.push(Conv1x1Linear { maps: 32 });
        layers.push(BatchNorm);
        layers.push(GlobalAvgPool);
        EncoderConfig { layers }
    }

    /// Dense path for flat inputs: `features → hidden (ELU) → h`, linear head.
    pub fn mlp(hidden: usize, h: usize) -> Self {
        use LayerSpec::*;
        EncoderConfig {
            layers: vec![
                Dense { units: hidden },
                Elu,
                Dense { units: h },
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm),
    Elu,
    MaxPool,
    GlobalAvgPool,
    Dense(Dense),
}

impl std::fmt::Debug for Layer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Layer::Conv(c) => write!(f, "Conv({}→{}, k{})", c.in_ch, c.out_ch, c.kernel),
            Layer::BatchNorm(b) => write!(f, "BatchNorm({})", b.size),
            Layer::Elu => write!(f, "Elu"),
            Layer::MaxPool => write!(f, "MaxPool"),
            Layer::GlobalAvgPool => write!(f, "GlobalAvgPool"),
            Layer::Dense(d) => write!(f, "Dense({}→{})", d.in_f, d.out_f),
        }
    }
}

/// Shape flowing between layers during construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flow {
    Spatial { c: usize, h: usize, w: usize },
    Flat { f: usize },
}

/// Intermediates from a train-mode forward, consumed by [`Encoder::backward`].
#[derive(Debug)]
pub struct ForwardCache {
    items: Vec<LayerCache>,
    batch: usize,
    mode: Mode,
    param_version: u64,
}

/// Parameter gradients aligned with [`Encoder::param_slices_mut`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    items: Vec<LayerGrads>,
}

impl ParamGrads {
    /// Flat view over all gradient arrays, layer by layer.
    pub fn slices(&self) -> Vec<&[f64]> {
        self.items.iter().flat_map(|g| g.slices()).collect()
    }
}

/// One view's feature mapping with learned parameters.
#[derive(Debug)]
pub struct Encoder {
    config: EncoderConfig,
    input_shape: InputShape,
    h: usize,
    layers: Vec<Layer>,
    param_version: u64,
}

impl Encoder {
    /// Builds an encoder with He-uniform weights, deterministically from
    /// `seed`.
    pub fn init(config: &EncoderConfig, input_shape: InputShape, h: usize, seed: u64) -> Result<Encoder> {
        let mut rng = Rng::new(seed);
        let layers = build_layers(config, input_shape, h, &mut rng)?;
        Ok(Encoder {
            config: config.clone(),
            input_shape,
            h,
            layers,
            param_version: 0,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn input_shape(&self) -> InputShape {
        self.input_shape
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.param_count(),
                Layer::BatchNorm(b) => b.param_count(),
                Layer::Dense(d) => d.param_count(),
                _ => 0,
            })
            .sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let expect = self.input_shape.dims();
        if batch.shape().len() != expect.len() + 1 || batch.shape()[1..] != expect[..] {
            return Err(Error::Dimension(format!(
                "batch shape {:?} does not match encoder input {:?}",
                batch.shape(),
                expect
            )));
        }
        match self.input_shape {
            InputShape::Image { .. } => ensure_rank(batch, 4, "encoder batch")?,
            InputShape::Flat { .. } => ensure_rank(batch, 2, "encoder batch")?,
        }
        Ok(())
    }

    /// Runs the network. Train mode uses batch statistics in batch norm
    /// (updating running stats) and returns a cache for [`Self::backward`];
    /// eval mode is a deterministic per-sample map.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<(Matrix, ForwardCache)> {
        self.check_batch(batch)?;
        if mode == Mode::Train && batch.batch() < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: batch.batch() });
        }
        let b = batch.batch();
        let mut items = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        for layer in &mut self.layers {
            let (next, cache) = match layer {
                Layer::Conv(conv) => {
                    let out = conv.forward(&current);
                    (out, LayerCache::Conv { input: current })
                }
                Layer::BatchNorm(bn) => match mode {
                    Mode::Train => bn.forward_train(&current),
                    Mode::Eval => {
                        let out = bn.forward_eval(&current);
                        // Placeholder; eval caches are rejected by backward.
                        (out, LayerCache::GlobalAvgPool { input_shape: Vec::new() })
                    }
                },
                Layer::Elu => {
                    let out = elu_forward(&current);
                    (out, LayerCache::Elu { input: current })
                }
                Layer::MaxPool => {
                    let (out, argmax) = maxpool_forward(&current);
                    (out, LayerCache::MaxPool { input_shape: current.shape().to_vec(), argmax })
                }
                Layer::GlobalAvgPool => {
                    let out = gap_forward(&current);
                    (out, LayerCache::GlobalAvgPool { input_shape: current.shape().to_vec() })
                }
                Layer::Dense(dense) => {
                    let out = dense.forward(&current);
                    (out, LayerCache::Dense { input: current })
                }
            };
            items.push(cache);
            current = next;
        }
        debug_assert_eq!(current.shape(), &[b, self.h]);
        let out = Matrix::from_vec(b, self.h, current.data().to_vec())?;
        out.ensure_finite("encoder forward output")?;
        Ok((out, ForwardCache { items, batch: b, mode, param_version: self.param_version }))
    }

    /// Eval-mode forward without mutating running statistics.
    pub fn forward_eval(&self, batch: &Tensor) -> Result<Matrix> {
        self.check_batch(batch)?;
        let b = batch.batch();
        let mut current = batch.clone();
        for layer in &self.layers {
            current = match layer {
                Layer::Conv(conv) => conv.forward(&current),
                Layer::BatchNorm(bn) => bn.forward_eval(&current),
                Layer::Elu => elu_forward(&current),
                Layer::MaxPool => maxpool_forward(&current).0,
                Layer::GlobalAvgPool => gap_forward(&current),
                Layer::Dense(dense) => dense.forward(&current),
            };
        }
        let out = Matrix::from_vec(b, self.h, current.data().to_vec())?;
        out.ensure_finite("encoder forward output")?;
        Ok(out)
    }

    /// Exact gradients of every parameter for the train-mode forward captured
    /// in `cache`, seeded with `∂loss/∂output`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix) -> Result<ParamGrads> {
        if cache.mode != Mode::Train {
            return Err(Error::State("backward requires a train-mode forward cache".into()));
        }
        if cache.param_version != self.param_version {
            return Err(Error::State(
                "stale forward cache: encoder parameters changed since forward".into(),
            ));
        }
        if cache.items.len() != self.layers.len() {
            return Err(Error::State("forward cache does not match encoder layers".into()));
        }
        if grad_out.rows() != cache.batch || grad_out.cols() != self.h {
            return Err(Error::Dimension(format!(
                "grad_out is {}x{}, expected {}x{}",
                grad_out.rows(),
                grad_out.cols(),
                cache.batch,
                self.h
            )));
        }

        let mut grad = Tensor::from_vec(&[cache.batch, self.h], grad_out.data().to_vec())?;
        let mut grads: Vec<LayerGrads> = vec![LayerGrads::None; self.layers.len()];
        for (idx, (layer, lc)) in self.layers.iter().zip(cache.items.iter()).enumerate().rev() {
            grad = match (layer, lc) {
                (Layer::Conv(conv), LayerCache::Conv { input }) => {
                    let (gin, dw, db) = conv.backward(input, &grad);
                    grads[idx] = LayerGrads::Conv { dw, db };
                    gin
                }
                (Layer::BatchNorm(bn), LayerCache::BatchNorm { xhat, inv_std }) => {
                    let (gin, dgamma, dbeta) = bn.backward(xhat, inv_std, &grad);
                    grads[idx] = LayerGrads::BatchNorm { dgamma, dbeta };
                    gin
                }
                (Layer::Elu, LayerCache::Elu { input }) => elu_backward(input, &grad),
                (Layer::MaxPool, LayerCache::MaxPool { input_shape, argmax }) => {
                    maxpool_backward(input_shape, argmax, &grad)
                }
                (Layer::GlobalAvgPool, LayerCache::GlobalAvgPool { input_shape }) => {
                    gap_backward(input_shape, &grad)
                }
                (Layer::Dense(dense), LayerCache::Dense { input }) => {
                    let (gin, dw, db) = dense.backward(input, &grad);
                    grads[idx] = LayerGrads::Dense { dw, db };
                    gin
                }
                _ => return Err(Error::State("forward cache does not match encoder layers".into())),
            };
        }
        Ok(ParamGrads { items: grads })
    }

    /// Mutable views of every parameter array, in the order matching
    /// [`ParamGrads::slices`]. Callers must [`Self::bump_version`] after
    /// updating.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| -> Vec<&mut [f64]> {
                match l {
                    Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
                    Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
                    Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
                    _ => Vec::new(),
                }
            })
            .collect()
    }

    /// Invalidates outstanding forward caches after a parameter update.
    pub fn bump_version(&mut self) {
        self.param_version += 1;
    }

    // ── Serialization ───────────────────────────────────────────────

    pub fn write_to(&self, w: &mut ByteWriter) {
        w.put_u32(self.config.layers.len() as u32);
        for spec in &self.config.layers {
            match spec {
                LayerSpec::Conv { maps } => {
                    w.put_u8(0);
                    w.put_u32(*maps as u32);
                }
                LayerSpec::Conv1x1Linear { maps } => {
                    w.put_u8(1);
                    w.put_u32(*maps as u32);
                }
                LayerSpec::BatchNorm => w.put_u8(2),
                LayerSpec::Elu => w.put_u8(3),
                LayerSpec::MaxPool => w.put_u8(4),
                LayerSpec::GlobalAvgPool => w.put_u8(5),
                LayerSpec::Dense { units } => {
                    w.put_u8(6);
                    w.put_u32(*units as u32);
                }
            }
        }
        match self.input_shape {
            InputShape::Image { channels, height, width } => {
                w.put_u8(0);
                w.put_shape(&[channels, height, width]);
            }
            InputShape::Flat { features } => {
                w.put_u8(1);
                w.put_shape(&[features]);
            }
        }
        w.put_u32(self.h as u32);
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    w.put_shape(&[c.out_ch, c.in_ch, c.kernel, c.kernel]);
                    w.put_f64_slice(&c.weight);
                    w.put_shape(&[c.out_ch]);
                    w.put_f64_slice(&c.bias);
                }
                Layer::BatchNorm(b) => {
                    w.put_shape(&[b.size]);
                    w.put_f64_slice(&b.gamma);
                    w.put_f64_slice(&b.beta);
                    w.put_f64_slice(&b.running_mean);
                    w.put_f64_slice(&b.running_var);
                }
                Layer::Dense(d) => {
                    w.put_shape(&[d.in_f, d.out_f]);
                    w.put_f64_slice(&d.weight);
                    w.put_shape(&[d.out_f]);
                    w.put_f64_slice(&d.bias);
                }
                _ => {}
            }
        }
    }

    pub fn read_from(r: &mut ByteReader) -> Result<Encoder> {
        let n_specs = r.take_u32()? as usize;
        let mut specs = Vec::with_capacity(n_specs);
        for _ in 0..n_specs {
            let spec = match r.take_u8()? {
                0 => LayerSpec::Conv { maps: r.take_u32()? as usize },
                1 => LayerSpec::Conv1x1Linear { maps: r.take_u32()? as usize },
                2 => LayerSpec::BatchNorm,
                3 => LayerSpec::Elu,
                4 => LayerSpec::MaxPool,
                5 => LayerSpec::GlobalAvgPool,
                6 => LayerSpec::Dense { units: r.take_u32()? as usize },
                t => return Err(Error::Format(format!("unknown layer tag {t}"))),
            };
            specs.push(spec);
        }
        let input_shape = match r.take_u8()? {
            0 => {
                let dims = r.take_shape()?;
                if dims.len() != 3 {
                    return Err(Error::Format("image input shape must be rank 3".into()));
                }
                InputShape::Image { channels: dims[0], height: dims[1], width: dims[2] }
            }
            1 => {
                let dims = r.take_shape()?;
                if dims.len() != 1 {
                    return Err(Error::Format("flat input shape must be rank 1".into()));
                }
                InputShape::Flat { features: dims[0] }
            }
            t => return Err(Error::Format(format!("unknown input shape tag {t}"))),
        };
        let h = r.take_u32()? as usize;

        let config = EncoderConfig { layers: specs };
        let mut enc = Encoder::init(&config, input_shape, h, 0)?;
        for layer in &mut enc.layers {
            match layer {
                Layer::Conv(c) => {
                    expect_shape(r, &[c.out_ch, c.in_ch, c.kernel, c.kernel])?;
                    c.weight = r.take_f64_vec(c.weight.len())?;
                    expect_shape(r, &[c.out_ch])?;
                    c.bias = r.take_f64_vec(c.bias.len())?;
                }
                Layer::BatchNorm(b) => {
                    expect_shape(r, &[b.size])?;
                    b.gamma = r.take_f64_vec(b.size)?;
                    b.beta = r.take_f64_vec(b.size)?;
                    b.running_mean = r.take_f64_vec(b.size)?;
                    b.running_var = r.take_f64_vec(b.size)?;
                }
                Layer::Dense(d) => {
                    expect_shape(r, &[d.in_f, d.out_f])?;
                    d.weight = r.take_f64_vec(d.weight.len())?;
                    expect_shape(r, &[d.out_f])?;
                    d.bias = r.take_f64_vec(d.bias.len())?;
                }
                _ => {}
            }
        }
        Ok(enc)
    }
}

fn expect_shape(r: &mut ByteReader, expect: &[usize]) -> Result<()> {
    let got = r.take_shape()?;
    if got != expect {
        return Err(Error::Format(format!(
            "parameter shape mismatch: stored {got:?}, expected {expect:?}"
        )));
    }
    Ok(())
}

fn build_layers(
    config: &EncoderConfig,
    input_shape: InputShape,
    h: usize,
    rng: &mut Rng,
) -> Result<Vec<Layer>> {
    if config.layers.is_empty() {
        return Err(Error::InvalidConfig("encoder needs at least one layer".into()));
    }

    // No activation may follow the final projection layer.
    let last_proj = config.layers.iter().rposition(|s| {
        matches!(s, LayerSpec::Conv1x1Linear { .. } | LayerSpec::Dense { .. })
    });
    if let Some(idx) = last_proj {
        if config.layers[idx + 1..].iter().any(|s| matches!(s, LayerSpec::Elu)) {
            return Err(Error::InvalidConfig(
                "activation after the final projection layer".into(),
            ));
        }
    }
    match config.layers.last().unwrap() {
        LayerSpec::GlobalAvgPool | LayerSpec::Dense { .. } => {}
        other => {
            return Err(Error::InvalidConfig(format!(
                "encoder must end with GlobalAvgPool or Dense, found {other:?}"
            )))
        }
    }

    let mut flow = match input_shape {
        InputShape::Image { channels, height, width } => Flow::Spatial { c: channels, h: height, w: width },
        InputShape::Flat { features } => Flow::Flat { f: features },
    };
    let mut layers = Vec::with_capacity(config.layers.len());
    for spec in &config.layers {
        let (layer, next) = match (spec, flow) {
            (LayerSpec::Conv { maps }, Flow::Spatial { c, h: fh, w: fw }) => {
                let conv = Conv2d::init(c, *maps, 3, 1, rng);
                let (oh, ow) = conv.out_spatial(fh, fw);
                (Layer::Conv(conv), Flow::Spatial { c: *maps, h: oh, w: ow })
            }
            (LayerSpec::Conv1x1Linear { maps }, Flow::Spatial { c, h: fh, w: fw }) => {
                let conv = Conv2d::init(c, *maps, 1, 0, rng);
                (Layer::Conv(conv), Flow::Spatial { c: *maps, h: fh, w: fw })
            }
            (LayerSpec::BatchNorm, Flow::Spatial { c, .. }) => {
                (Layer::BatchNorm(BatchNorm::init(c)), flow)
            }
            (LayerSpec::BatchNorm, Flow::Flat { f }) => {
                (Layer::BatchNorm(BatchNorm::init(f)), flow)
            }
            (LayerSpec::Elu, _) => (Layer::Elu, flow),
            (LayerSpec::MaxPool, Flow::Spatial { c, h: fh, w: fw }) => {
                let (oh, ow) = (fh / 2, fw / 2);
                if oh == 0 || ow == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "max pooling reduces {fh}x{fw} to {oh}x{ow}"
                    )));
                }
                (Layer::MaxPool, Flow::Spatial { c, h: oh, w: ow })
            }
            (LayerSpec::GlobalAvgPool, Flow::Spatial { c, .. }) => {
                (Layer::GlobalAvgPool, Flow::Flat { f: c })
            }
            (LayerSpec::Dense { units }, Flow::Flat { f }) => {
                (Layer::Dense(Dense::init(f, *units, rng)), Flow::Flat { f: *units })
            }
            (spec, flow) => {
                return Err(Error::InvalidConfig(format!(
                    "layer {spec:?} cannot follow {flow:?}"
                )))
            }
        };
        layers.push(layer);
        flow = next;
    }
    match flow {
        Flow::Flat { f } if f == h => Ok(layers),
        Flow::Flat { f } => Err(Error::InvalidConfig(format!(
            "encoder produces {f} outputs, expected h = {h}"
        ))),
        Flow::Spatial { .. } => Err(Error::InvalidConfig(
            "encoder output is still spatial; end with GlobalAvgPool".into(),
        )),
    }
}

/// Spatial trace of a config on an input shape, for shape-arithmetic checks.
pub fn spatial_trace(config: &EncoderConfig, input_shape: InputShape) -> Result<Vec<(usize, usize)>> {
    let mut trace = Vec::new();
    let mut flow = match input_shape {
        InputShape::Image { channels, height, width } => Flow::Spatial { c: channels, h: height, w: width },
        InputShape::Flat { features } => Flow::Flat { f: features },
    };
    if let Flow::Spatial { h, w, .. } = flow {
        trace.push((h, w));
    }
    for spec in &config.layers {
        flow = match (spec, flow) {
            (LayerSpec::MaxPool, Flow::Spatial { c, h, w }) => {
                let next = Flow::Spatial { c, h: h / 2, w: w / 2 };
                trace.push((h / 2, w / 2));
                next
            }
            (LayerSpec::Conv { maps }, Flow::Spatial { h, w, .. }) => {
                Flow::Spatial { c: *maps, h, w }
            }
            (LayerSpec::Conv1x1Linear { maps }, Flow::Spatial { h, w, .. }) => {
                Flow::Spatial { c: *maps, h, w }
            }
            (LayerSpec::GlobalAvgPool, Flow::Spatial { c, .. }) => Flow::Flat { f: c },
            (LayerSpec::Dense { units }, Flow::Flat { .. }) => Flow::Flat { f: *units },
            (_, f) => f,
        };
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dcca::dcca_loss;

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn table1_image_column_shape_trace() {
        let cfg = EncoderConfig::paper_table1();
        let shape = InputShape::Image { channels: 1, height: 40, width: 100 };
        let trace = spatial_trace(&cfg, shape).unwrap();
        assert_eq!(trace, vec![(40, 100), (20, 50), (10, 25), (5, 12), (2, 6)]);
        let enc = Encoder::init(&cfg, shape, 32, 1).unwrap();
        assert_eq!(enc.h(), 32);
    }

    #[test]
    fn table1_audio_column_shape_trace() {
        let cfg = EncoderConfig::paper_table1();
        let shape = InputShape::Image { channels: 1, height: 136, width: 100 };
        let trace = spatial_trace(&cfg, shape).unwrap();
        assert_eq!(trace, vec![(136, 100), (68, 50), (34, 25), (17, 12), (8, 6)]);
        let enc = Encoder::init(&cfg, shape, 32, 2).unwrap();
        let input = random_input(&[2, 1, 136, 100], 3);
        let out = enc.forward_eval(&input).unwrap();
        assert_eq!((out.rows(), out.cols()), (2, 32));
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = EncoderConfig::desk(8);
        let shape = InputShape::Image { channels: 1, height: 16, width: 20 };
        let a = Encoder::init(&cfg, shape, 8, 99).unwrap();
        let b = Encoder::init(&cfg, shape, 8, 99).unwrap();
        let mut wa = ByteWriter::new();
        let mut wb = ByteWriter::new();
        a.write_to(&mut wa);
        b.write_to(&mut wb);
        assert_eq!(wa.as_slice(), wb.as_slice());
    }

    #[test]
    fn param_count_stable_across_seeds() {
        let cfg = EncoderConfig::desk(8);
        let shape = InputShape::Image { channels: 1, height: 16, width: 20 };
        let a = Encoder::init(&cfg, shape, 8, 1).unwrap();
        let b = Encoder::init(&cfg, shape, 8, 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert!(a.param_count() > 0);
    }

    #[test]
    fn over_pooling_rejected() {
        use LayerSpec::*;
        let cfg = EncoderConfig {
            layers: vec![
                MaxPool,
                MaxPool,
                MaxPool,
                Conv1x1Linear { maps: 4 },
                GlobalAvgPool,
            ],
        };
        let shape = InputShape::Image { channels: 1, height: 4, width: 4 };
        assert!(matches!(
            Encoder::init(&cfg, shape, 4, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn activation_after_projection_rejected() {
        use LayerSpec::*;
        let cfg = EncoderConfig {
            layers: vec![Conv1x1Linear { maps: 4 }, Elu, GlobalAvgPool],
        };
        let shape = InputShape::Image { channels: 1, height: 4, width: 4 };
        assert!(matches!(
            Encoder::init(&cfg, shape, 4, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn wrong_h_rejected() {
        let cfg = EncoderConfig::desk(8);
        let shape = InputShape::Image { channels: 1, height: 16, width: 20 };
        assert!(matches!(
            Encoder::init(&cfg, shape, 16, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let cfg = EncoderConfig::desk(4);
        let shape = InputShape::Image { channels: 1, height: 16, width: 20 };
        let mut enc = Encoder::init(&cfg, shape, 4, 0).unwrap();
        let bad = Tensor::zeros(&[2, 1, 16, 21]);
        assert!(matches!(enc.forward(&bad, Mode::Train), Err(Error::Dimension(_))));
    }

    #[test]
    fn eval_forward_is_per_sample() {
        let cfg = EncoderConfig::desk(4);
        let shape = InputShape::Image { channels: 1, height: 12, width: 16 };
        let enc = Encoder::init(&cfg, shape, 4, 5).unwrap();
        let batch = random_input(&[3, 1, 12, 16], 7);
        let together = enc.forward_eval(&batch).unwrap();
        for i in 0..3 {
            let single = Tensor::from_vec(&[1, 1, 12, 16], batch.sample(i).to_vec()).unwrap();
            let alone = enc.forward_eval(&single).unwrap();
            for j in 0..4 {
                assert!(
                    (together.get(i, j) - alone.get(0, j)).abs() < 1e-12,
                    "sample {i} dim {j}"
                );
            }
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_param_grads() {
        let cfg = EncoderConfig::desk(4);
        let shape = InputShape::Image { channels: 1, height: 12, width: 16 };
        let mut enc = Encoder::init(&cfg, shape, 4, 5).unwrap();
        let batch = random_input(&[4, 1, 12, 16], 8);
        let (_, cache) = enc.forward(&batch, Mode::Train).unwrap();
        let grads = enc.backward(&cache, &Matrix::zeros(4, 4)).unwrap();
        for slice in grads.slices() {
            assert!(slice.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let cfg = EncoderConfig::desk(4);
        let shape = InputShape::Image { channels: 1, height: 12, width: 16 };
        let mut enc = Encoder::init(&cfg, shape, 4, 5).unwrap();
        let batch = random_input(&[4, 1, 12, 16], 8);
        let (_, cache) = enc.forward(&batch, Mode::Train).unwrap();
        enc.bump_version();
        let err = enc.backward(&cache, &Matrix::zeros(4, 4));
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn eval_cache_rejected_by_backward() {
        let cfg = EncoderConfig::desk(4);
        let shape = InputShape::Image { channels: 1, height: 12, width: 16 };
        let mut enc = Encoder::init(&cfg, shape, 4, 5).unwrap();
        let batch = random_input(&[4, 1, 12, 16], 8);
        let (_, cache) = enc.forward(&batch, Mode::Eval).unwrap();
        assert!(matches!(
            enc.backward(&cache, &Matrix::zeros(4, 4)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn linear_dense_gradient_matches_analytic_form() {
        use LayerSpec::*;
        let cfg = EncoderConfig { layers: vec![Dense { units: 3 }] };
        let shape = InputShape::Flat { features: 5 };
        let mut enc = Encoder::init(&cfg, shape, 3, 1).unwrap();
        let batch = random_input(&[6, 5], 2);
        let (_, cache) = enc.forward(&batch, Mode::Train).unwrap();
        let grad_out = Matrix::from_fn(6, 3, |i, j| (i + j) as f64 * 0.1 - 0.4);
        let grads = enc.backward(&cache, &grad_out).unwrap();
        let slices = grads.slices();
        // dW = batchᵀ · grad_out
        for i in 0..5 {
            for j in 0..3 {
                let expect: f64 = (0..6)
                    .map(|b| batch.data()[b * 5 + i] * grad_out.get(b, j))
                    .sum();
                assert!((slices[0][i * 3 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_path_runs() {
        let cfg = EncoderConfig::mlp(16, 4);
        let shape = InputShape::Flat { features: 10 };
        let mut enc = Encoder::init(&cfg, shape, 4, 3).unwrap();
        let batch = random_input(&[8, 10], 4);
        let (out, cache) = enc.forward(&batch, Mode::Train).unwrap();
        assert_eq!((out.rows(), out.cols()), (8, 4));
        let grads = enc.backward(&cache, &Matrix::from_fn(8, 4, |_, _| 0.1)).unwrap();
        assert!(!grads.slices().is_empty());
    }

    #[test]
    fn serialization_round_trip_preserves_eval_outputs() {
        let cfg = EncoderConfig::desk(4);
        let shape = InputShape::Image { channels: 1, height: 12, width: 16 };
        let mut enc = Encoder::init(&cfg, shape, 4, 17).unwrap();
        // Push the running stats away from init so they are exercised too.
        let batch = random_input(&[8, 1, 12, 16], 18);
        enc.forward(&batch, Mode::Train).unwrap();

        let mut w = ByteWriter::new();
        enc.write_to(&mut w);
        let bytes = w.into_bytes();
        let mut r = ByteReader::new(&bytes);
        let back = Encoder::read_from(&mut r).unwrap();

        let probe = random_input(&[3, 1, 12, 16], 19);
        let a = enc.forward_eval(&probe).unwrap();
        let b = back.forward_eval(&probe).unwrap();
        assert_eq!(a.data(), b.data());
    }

    /// End-to-end gradient check: encoder parameters through the DCCA loss,
    /// against central finite differences. Guards the whole training path.
    #[test]
    fn parameter_gradients_match_finite_differences() {
        use LayerSpec::*;
        let cfg = EncoderConfig {
            layers: vec![
                Conv { maps: 2 },
                BatchNorm,
                Elu,
                MaxPool,
                Conv1x1Linear { maps: 4 },
                BatchNorm,
                GlobalAvgPool,
            ],
        };
        let shape = InputShape::Image { channels: 1, height: 6, width: 8 };
        let mut enc_x = Encoder::init(&cfg, shape, 4, 11).unwrap();
        let mut enc_y = Encoder::init(&cfg, shape, 4, 12).unwrap();
        let bx = random_input(&[16, 1, 6, 8], 13);
        let by = random_input(&[16, 1, 6, 8], 14);
        let eps = 1e-3;

        let (fx, cache_x) = enc_x.forward(&bx, Mode::Train).unwrap();
        let (gy, cache_y) = enc_y.forward(&by, Mode::Train).unwrap();
        let res = dcca_loss(&fx, &gy, eps).unwrap();
        let gx = enc_x.backward(&cache_x, &res.grad_fx).unwrap();
        let gy_grads = enc_y.backward(&cache_y, &res.grad_gy).unwrap();

        let loss_of = |ex: &mut Encoder, ey: &mut Encoder| -> f64 {
            // Running-stat updates do not feed the loss; batch statistics do.
            let (fx, _) = ex.forward(&bx, Mode::Train).unwrap();
            let (gy, _) = ey.forward(&by, Mode::Train).unwrap();
            dcca_loss(&fx, &gy, eps).unwrap().loss
        };

        let step = 1e-5;
        for (which, grads) in [(0, &gx), (1, &gy_grads)] {
            let analytic: Vec<f64> = grads.slices().iter().flat_map(|s| s.iter().copied()).collect();
            let mut numeric = Vec::with_capacity(analytic.len());
            let n_params: usize = analytic.len();
            for p in 0..n_params {
                let (lp, lm) = {
                    let perturb = |enc_x: &mut Encoder, enc_y: &mut Encoder, delta: f64| {
                        let target = if which == 0 { &mut *enc_x } else { &mut *enc_y };
                        let mut slices = target.param_slices_mut();
                        let mut idx = p;
                        for s in slices.iter_mut() {
                            if idx < s.len() {
                                s[idx] += delta;
                                break;
                            }
                            idx -= s.len();
                        }
                    };
                    perturb(&mut enc_x, &mut enc_y, step);
                    let lp = loss_of(&mut enc_x, &mut enc_y);
                    perturb(&mut enc_x, &mut enc_y, -2.0 * step);
                    let lm = loss_of(&mut enc_x, &mut enc_y);
                    perturb(&mut enc_x, &mut enc_y, step);
                    (lp, lm)
                };
                numeric.push((lp - lm) / (2.0 * step));
            }
            // rtol + atol: conv biases feeding batch norm have structurally
            // zero gradients, where a pure relative test only measures FD noise.
            let mut worst = 0.0f64;
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                let err = (a - n).abs() / (a.abs().max(n.abs()) + 1e-3);
                worst = worst.max(err);
            }
            assert!(worst < 1e-3, "view {which}: worst gradient error {worst}");
        }
    }
}
