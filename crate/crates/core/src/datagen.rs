//! Synthetic paired-view datasets with analytically known structure, and the
//! MVDS on-disk format.
//!
//! Two generators: a linear-Gaussian pair whose population canonical
//! correlations are constructed in closed form (the oracle for CCA fitting),
//! and a nonlinear snippet generator that emulates the real retrieval setting
//! — per piece, a smooth latent curve over positions, rendered into two
//! heterogeneous view geometries by fixed random nonlinear maps. The nonlinear
//! generator stands in for a full score-rendering/audio-synthesis pipeline,
//! which is out of scope; positions and piece ids play the role of snippet
//! provenance.
//!
//! View data is quantized to f32 precision at generation time so the on-disk
//! f32 encoding round-trips bit-exactly.

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::numerics::Matrix;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"MVDS";
pub const DATASET_VERSION: u16 = 1;
pub const SAMPLE_MAGIC: &[u8; 4] = b"MVSN";
pub const SAMPLE_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Split> {
        match tag {
            0 => Ok(Split::Train),
            1 => Ok(Split::Valid),
            2 => Ok(Split::Test),
            t => Err(Error::Format(format!("unknown split tag {t}"))),
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Range(format!("unknown split '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMeta {
    pub piece_id: u64,
    pub position: u64,
    pub split: Split,
}

/// Per-view scalar normalization statistics (train split).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean_x: f64,
    pub std_x: f64,
    pub mean_y: f64,
    pub std_y: f64,
}

impl NormStats {
    fn identity() -> Self {
        NormStats { mean_x: 0.0, std_x: 1.0, mean_y: 0.0, std_y: 1.0 }
    }
}

/// N aligned sample pairs over two views, with piece/position metadata and
/// split tags. Immutable after generation.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub shape_x: Vec<usize>,
    pub shape_y: Vec<usize>,
    view_x: Vec<f64>,
    view_y: Vec<f64>,
    meta: Vec<SampleMeta>,
    pub norm: NormStats,
    pub descriptor: String,
}

impl MultiViewDataset {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn meta(&self, i: usize) -> &SampleMeta {
        &self.meta[i]
    }

    pub fn sample_len(&self, view: View) -> usize {
        match view {
            View::X => self.shape_x.iter().product(),
            View::Y => self.shape_y.iter().product(),
        }
    }

    pub fn shape(&self, view: View) -> &[usize] {
        match view {
            View::X => &self.shape_x,
            View::Y => &self.shape_y,
        }
    }

    pub fn sample(&self, view: View, i: usize) -> &[f64] {
        let len = self.sample_len(view);
        match view {
            View::X => &self.view_x[i * len..(i + 1) * len],
            View::Y => &self.view_y[i * len..(i + 1) * len],
        }
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.meta
            .iter()
            .enumerate()
            .filter(|(_, m)| m.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Batch tensor `[B, ...view shape]` gathered from sample indices.
    pub fn gather(&self, view: View, indices: &[usize]) -> Tensor {
        let sample_len = self.sample_len(view);
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.shape(view));
        let mut data = Vec::with_capacity(indices.len() * sample_len);
        for &i in indices {
            data.extend_from_slice(self.sample(view, i));
        }
        Tensor::from_vec(&shape, data).expect("gather shape accounting")
    }

    /// Flat matrix (samples × features) over one split of one view.
    pub fn view_matrix(&self, split: Split, view: View) -> Result<Matrix> {
        let indices = self.split_indices(split);
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let len = self.sample_len(view);
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in &indices {
            data.extend_from_slice(self.sample(view, i));
        }
        Matrix::from_vec(indices.len(), len, data)
    }

    /// Copy with view-Y rows permuted, destroying the pairing. Used to verify
    /// that correlation genuinely comes from the alignment.
    pub fn shuffle_pairing(&self, seed: u64) -> MultiViewDataset {
        let n = self.len();
        let mut perm: Vec<usize> = (0..n).collect();
        Rng::stream(seed, 0xee1).shuffle(&mut perm);
        let len_y = self.sample_len(View::Y);
        let mut view_y = Vec::with_capacity(self.view_y.len());
        for &src in &perm {
            view_y.extend_from_slice(&self.view_y[src * len_y..(src + 1) * len_y]);
        }
        MultiViewDataset {
            shape_x: self.shape_x.clone(),
            shape_y: self.shape_y.clone(),
            view_x: self.view_x.clone(),
            view_y,
            meta: self.meta.clone(),
            norm: self.norm,
            descriptor: format!("{} (pairing shuffled)", self.descriptor),
        }
    }

    // ── MVDS file format ────────────────────────────────────────────

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = ByteWriter::new();
        out.put_bytes(DATASET_MAGIC);
        out.put_u16(DATASET_VERSION);

        let mut header = ByteWriter::new();
        header.put_u32(self.len() as u32);
        header.put_shape(&self.shape_x);
        header.put_shape(&self.shape_y);
        header.put_f64(self.norm.mean_x);
        header.put_f64(self.norm.std_x);
        header.put_f64(self.norm.mean_y);
        header.put_f64(self.norm.std_y);
        header.put_str(&self.descriptor);
        header.put_trailing_crc();
        out.put_bytes(header.as_slice());

        for view in [&self.view_x, &self.view_y] {
            let mut block = ByteWriter::new();
            for &v in view.iter() {
                block.put_f32(v as f32);
            }
            block.put_trailing_crc();
            out.put_bytes(block.as_slice());
        }

        let mut meta = ByteWriter::new();
        for m in &self.meta {
            meta.put_u64(m.piece_id);
            meta.put_u64(m.position);
            meta.put_u8(m.split.tag());
        }
        meta.put_trailing_crc();
        out.put_bytes(meta.as_slice());
        out.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<MultiViewDataset> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(DATASET_MAGIC, "dataset")?;
        r.expect_version(DATASET_VERSION, "dataset")?;

        // Each block carries a trailing CRC over its own bytes, so every
        // block gets a fresh sub-reader.
        let header_start = r.position();
        let n;
        let shape_x;
        let shape_y;
        let norm;
        let descriptor;
        {
            let mut hr = ByteReader::new(&bytes[header_start..]);
            n = hr.take_u32()? as usize;
            shape_x = hr.take_shape()?;
            shape_y = hr.take_shape()?;
            norm = NormStats {
                mean_x: hr.take_f64()?,
                std_x: hr.take_f64()?,
                mean_y: hr.take_f64()?,
                std_y: hr.take_f64()?,
            };
            descriptor = hr.take_str()?;
            hr.check_trailing_crc()?;
            let consumed = hr.position();
            r.take_bytes(consumed)?;
        }

        let len_x: usize = shape_x.iter().product();
        let len_y: usize = shape_y.iter().product();
        let mut views: Vec<Vec<f64>> = Vec::with_capacity(2);
        for len in [len_x, len_y] {
            let block_start = r.position();
            let mut br = ByteReader::new(&bytes[block_start..]);
            let mut data = Vec::with_capacity(n * len);
            for _ in 0..n * len {
                data.push(br.take_f32()? as f64);
            }
            br.check_trailing_crc()?;
            let consumed = br.position();
            r.take_bytes(consumed)?;
            views.push(data);
        }
        let view_y = views.pop().unwrap();
        let view_x = views.pop().unwrap();

        let meta_start = r.position();
        let mut mr = ByteReader::new(&bytes[meta_start..]);
        let mut meta = Vec::with_capacity(n);
        for _ in 0..n {
            meta.push(SampleMeta {
                piece_id: mr.take_u64()?,
                position: mr.take_u64()?,
                split: Split::from_tag(mr.take_u8()?)?,
            });
        }
        mr.check_trailing_crc()?;
        let consumed = mr.position();
        r.take_bytes(consumed)?;
        if r.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after dataset",
                r.remaining()
            )));
        }

        Ok(MultiViewDataset { shape_x, shape_y, view_x, view_y, meta, norm, descriptor })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<MultiViewDataset> {
        let bytes = std::fs::read(path)?;
        MultiViewDataset::from_bytes(&bytes)
    }
}

/// Rounds through f32 so in-memory values match the on-disk encoding exactly.
fn quantize(data: &mut [f64]) {
    for v in data.iter_mut() {
        *v = *v as f32 as f64;
    }
}

// ── Linear-Gaussian generator ───────────────────────────────────────

/// Samples `n` pairs from a joint Gaussian whose population canonical
/// correlations equal `corrs` exactly: channel i of both views shares a latent
/// `z_i` with mixing weight √corrs[i], remaining channels are independent
/// noise, and each view is rotated by a random orthonormal map. All samples
/// land in the train split; piece ids are sample indices.
pub fn gen_linear_gaussian(
    n: usize,
    corrs: &[f64],
    d_x: usize,
    d_y: usize,
    seed: u64,
) -> Result<MultiViewDataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if corrs.iter().any(|&c| !(0.0..1.0).contains(&c)) {
        return Err(Error::Range(format!("corrs must lie in [0, 1), got {corrs:?}")));
    }
    if corrs.is_empty() || corrs.len() > d_x.min(d_y) {
        return Err(Error::Range(format!(
            "{} correlations do not fit into views of dims {d_x}/{d_y}",
            corrs.len()
        )));
    }

    let h = corrs.len();
    let mut map_rng = Rng::stream(seed, 1);
    let q_x = random_orthonormal(d_x, &mut map_rng);
    let q_y = random_orthonormal(d_y, &mut map_rng);
    let weights: Vec<f64> = corrs.iter().map(|&c| c.sqrt()).collect();

    let mut sample_rng = Rng::stream(seed, 2);
    let mut view_x = Vec::with_capacity(n * d_x);
    let mut view_y = Vec::with_capacity(n * d_y);
    let mut sx = vec![0.0; d_x];
    let mut sy = vec![0.0; d_y];
    for _ in 0..n {
        for i in 0..h {
            let z = sample_rng.normal();
            let residual = (1.0 - corrs[i]).sqrt();
            sx[i] = weights[i] * z + residual * sample_rng.normal();
            sy[i] = weights[i] * z + residual * sample_rng.normal();
        }
        for s in sx.iter_mut().skip(h) {
            *s = sample_rng.normal();
        }
        for s in sy.iter_mut().skip(h) {
            *s = sample_rng.normal();
        }
        for r in 0..d_x {
            view_x.push(dot(q_x.row(r), &sx));
        }
        for r in 0..d_y {
            view_y.push(dot(q_y.row(r), &sy));
        }
    }
    quantize(&mut view_x);
    quantize(&mut view_y);

    let meta = (0..n)
        .map(|i| SampleMeta { piece_id: i as u64, position: 0, split: Split::Train })
        .collect();
    let descriptor = format!(
        "{{\"kind\":\"linear_gaussian\",\"n\":{n},\"corrs\":{corrs:?},\"d_x\":{d_x},\"d_y\":{d_y},\"seed\":{seed}}}"
    );
    Ok(MultiViewDataset {
        shape_x: vec![d_x],
        shape_y: vec![d_y],
        view_x,
        view_y,
        meta,
        norm: NormStats::identity(),
        descriptor,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Random orthonormal matrix via Gram-Schmidt on Gaussian columns.
fn random_orthonormal(n: usize, rng: &mut Rng) -> Matrix {
    let mut q = Matrix::zeros(n, n);
    for j in 0..n {
        loop {
            let mut col: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            for prev in 0..j {
                let proj: f64 = (0..n).map(|i| col[i] * q.get(i, prev)).sum();
                for (i, c) in col.iter_mut().enumerate() {
                    *c -= proj * q.get(i, prev);
                }
            }
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for (i, c) in col.iter().enumerate() {
                    q.set(i, j, c / norm);
                }
                break;
            }
        }
    }
    q
}

// ── Nonlinear snippet generator ─────────────────────────────────────

/// Parameters for [`gen_nonlinear_snippets`].
#[derive(Debug, Clone)]
pub struct NonlinearConfig {
    pub pieces: usize,
    pub snippets_per_piece: usize,
    pub latent_dim: usize,
    pub noise: f64,
    pub seed: u64,
    pub shape_x: Vec<usize>,
    pub shape_y: Vec<usize>,
    /// Use the same map and geometry for both views (view_x == view_y when
    /// noise is zero). Test hook for degenerate constructions.
    pub identical_views: bool,
}

impl Default for NonlinearConfig {
    fn default() -> Self {
        NonlinearConfig {
            pieces: 100,
            snippets_per_piece: 50,
            latent_dim: 4,
            noise: 0.1,
            seed: 0,
            shape_x: vec![1, 40, 100],
            shape_y: vec![1, 136, 100],
            identical_views: false,
        }
    }
}

/// Fixed random nonlinear map latent → view: projection to a hidden layer,
/// tanh, projection to the pixel grid.
struct ViewMap {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
}

impl ViewMap {
    fn init(latent_dim: usize, hidden: usize, pixels: usize, rng: &mut Rng) -> ViewMap {
        let s1 = 1.0 / (latent_dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        ViewMap {
            w1: Matrix::from_fn(hidden, latent_dim, |_, _| rng.normal() * s1),
            b1: (0..hidden).map(|_| rng.normal() * 0.5).collect(),
            w2: Matrix::from_fn(pixels, hidden, |_, _| rng.normal() * s2),
        }
    }

    fn apply(&self, z: &[f64], out: &mut [f64]) {
        let hidden: Vec<f64> = (0..self.w1.rows())
            .map(|r| (dot(self.w1.row(r), z) + self.b1[r]).tanh())
            .collect();
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.w2.row(r), &hidden);
        }
    }
}

/// Generates paired snippets: per piece, a smooth latent curve over positions
/// (a sum of random sinusoids plus a piece offset); both views render the same
/// latent through fixed random nonlinear maps, plus i.i.d. noise. Views are
/// normalized to zero mean / unit variance over the train split. Pieces are
/// split 60/20/20 into train/valid/test; pieces never straddle splits.
pub fn gen_nonlinear_snippets(cfg: &NonlinearConfig) -> Result<MultiViewDataset> {
    if cfg.pieces == 0 || cfg.snippets_per_piece == 0 {
        return Err(Error::EmptyDataset);
    }
    if cfg.latent_dim == 0 {
        return Err(Error::Range("latent_dim must be at least 1".into()));
    }
    if cfg.noise < 0.0 {
        return Err(Error::Range(format!("noise must be >= 0, got {}", cfg.noise)));
    }
    let shape_y = if cfg.identical_views { cfg.shape_x.clone() } else { cfg.shape_y.clone() };
    let pix_x: usize = cfg.shape_x.iter().product();
    let pix_y: usize = shape_y.iter().product();
    if pix_x == 0 || pix_y == 0 {
        return Err(Error::Range("view shapes must be non-empty".into()));
    }

    let hidden = 32;
    let mut map_rng = Rng::stream(cfg.seed, 10);
    let map_x = ViewMap::init(cfg.latent_dim, hidden, pix_x, &mut map_rng);
    let map_y = if cfg.identical_views {
        None // reuse map_x
    } else {
        Some(ViewMap::init(cfg.latent_dim, hidden, pix_y, &mut map_rng))
    };

    let n = cfg.pieces * cfg.snippets_per_piece;
    let mut curve_rng = Rng::stream(cfg.seed, 11);
    let mut noise_rng = Rng::stream(cfg.seed, 12);
    let mut view_x = vec![0.0; n * pix_x];
    let mut view_y = vec![0.0; n * pix_y];
    let mut meta = Vec::with_capacity(n);

    let n_train_pieces = (cfg.pieces * 6).div_euclid(10).max(1);
    let n_valid_pieces = (cfg.pieces * 2).div_euclid(10);

    const HARMONICS: usize = 3;
    let mut z = vec![0.0; cfg.latent_dim];
    let mut sample_idx = 0;
    for piece in 0..cfg.pieces {
        let split = if piece < n_train_pieces {
            Split::Train
        } else if piece < n_train_pieces + n_valid_pieces {
            Split::Valid
        } else {
            Split::Test
        };
        // Smooth latent curve: offset + Σ_k a_k sin(ω_k t + φ_k) per dim.
        let offsets: Vec<f64> = (0..cfg.latent_dim).map(|_| curve_rng.normal()).collect();
        let amps: Vec<f64> = (0..cfg.latent_dim * HARMONICS)
            .map(|_| curve_rng.normal() / (HARMONICS as f64).sqrt())
            .collect();
        let freqs: Vec<f64> = (0..cfg.latent_dim * HARMONICS)
            .map(|_| curve_rng.uniform_in(0.2, 1.2))
            .collect();
        let phases: Vec<f64> = (0..cfg.latent_dim * HARMONICS)
            .map(|_| curve_rng.uniform_in(0.0, 2.0 * std::f64::consts::PI))
            .collect();

        for t in 0..cfg.snippets_per_piece {
            for (dim, zd) in z.iter_mut().enumerate() {
                let mut v = offsets[dim];
                for k in 0..HARMONICS {
                    let idx = dim * HARMONICS + k;
                    v += amps[idx] * (freqs[idx] * t as f64 + phases[idx]).sin();
                }
                *zd = v;
            }
            let out_x = &mut view_x[sample_idx * pix_x..(sample_idx + 1) * pix_x];
            map_x.apply(&z, out_x);
            let out_y = &mut view_y[sample_idx * pix_y..(sample_idx + 1) * pix_y];
            match &map_y {
                Some(m) => m.apply(&z, out_y),
                None => map_x.apply(&z, out_y),
            }
            if cfg.noise > 0.0 {
                for v in out_x.iter_mut() {
                    *v += cfg.noise * noise_rng.normal();
                }
                for v in out_y.iter_mut() {
                    *v += cfg.noise * noise_rng.normal();
                }
            }
            meta.push(SampleMeta { piece_id: piece as u64, position: t as u64, split });
            sample_idx += 1;
        }
    }

    // Normalize each view to zero mean / unit variance over the train split.
    let train: Vec<usize> = meta
        .iter()
        .enumerate()
        .filter(|(_, m)| m.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    let (mean_x, std_x) = scalar_stats(&view_x, &train, pix_x);
    let (mean_y, std_y) = scalar_stats(&view_y, &train, pix_y);
    apply_norm(&mut view_x, mean_x, std_x);
    apply_norm(&mut view_y, mean_y, std_y);
    quantize(&mut view_x);
    quantize(&mut view_y);

    let descriptor = format!(
        "{{\"kind\":\"nonlinear_snippets\",\"pieces\":{},\"snippets_per_piece\":{},\"latent_dim\":{},\"noise\":{},\"seed\":{},\"identical_views\":{}}}",
        cfg.pieces, cfg.snippets_per_piece, cfg.latent_dim, cfg.noise, cfg.seed, cfg.identical_views
    );
    Ok(MultiViewDataset {
        shape_x: cfg.shape_x.clone(),
        shape_y,
        view_x,
        view_y,
        meta,
        norm: NormStats { mean_x, std_x, mean_y, std_y },
        descriptor,
    })
}

fn scalar_stats(data: &[f64], train_indices: &[usize], sample_len: usize) -> (f64, f64) {
    let count = (train_indices.len() * sample_len) as f64;
    let mut sum = 0.0;
    for &i in train_indices {
        sum += data[i * sample_len..(i + 1) * sample_len].iter().sum::<f64>();
    }
    let mean = sum / count;
    let mut var = 0.0;
    for &i in train_indices {
        var += data[i * sample_len..(i + 1) * sample_len]
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>();
    }
    let std = (var / count).sqrt().max(1e-12);
    (mean, std)
}

fn apply_norm(data: &mut [f64], mean: f64, std: f64) {
    let inv = 1.0 / std;
    for v in data.iter_mut() {
        *v = (*v - mean) * inv;
    }
}

// ── Single-sample file (query input) ────────────────────────────────

/// Writes one snippet as an MVSN file: magic, version, shape, f64 data,
/// trailing CRC32.
pub fn save_sample(path: &std::path::Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if data.len() != expected {
        return Err(Error::Dimension(format!(
            "sample data length {} does not match shape {shape:?}",
            data.len()
        )));
    }
    let mut w = ByteWriter::new();
    w.put_bytes(SAMPLE_MAGIC);
    w.put_u16(SAMPLE_VERSION);
    w.put_shape(shape);
    w.put_f64_slice(data);
    w.put_trailing_crc();
    std::fs::write(path, w.as_slice())?;
    Ok(())
}

pub fn load_sample(path: &std::path::Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    r.expect_magic(SAMPLE_MAGIC, "sample")?;
    r.expect_version(SAMPLE_VERSION, "sample")?;
    let shape = r.take_shape()?;
    let n: usize = shape.iter().product();
    let data = r.take_f64_vec(n)?;
    r.check_trailing_crc()?;
    if r.remaining() != 0 {
        return Err(Error::Format("trailing bytes after sample".into()));
    }
    Ok((shape, data))
}
