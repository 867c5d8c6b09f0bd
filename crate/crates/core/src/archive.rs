//! Binary container for models and per-utterance features.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SVARCHV\0" | version u32 | n_sections u32
//! per section: name_len u32, name utf8, kind u32, n_dims u32, dims u64…,
//!              n_values u64, values f64…
//! sha256 of everything above (32 bytes)
//! ```
//!
//! Every parameter is stored as its exact f64 bit pattern, so a load after a
//! save reproduces models bit for bit. Derived caches are recomputed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::attack::{Extractor, ScoringPipeline};
use crate::audio::{FeatureConfig, FeatureKind, FeatureMatrix, PhaseMatrix, WindowKind};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, read_text, write_text};
use crate::gmm::{CovarianceKind, GmmUbm};
use crate::ivector::TotalVariabilityModel;
use crate::numerics::{Matrix, Vector};
use crate::plda::{LdaProjection, PldaModel};
use crate::store::{FeatureStore, Utterance};
use crate::xvector::{DenseLayer, FrameLayer, XvectorModel};

pub const MAGIC: &[u8; 8] = b"SVARCHV\0";
pub const FORMAT_VERSION: u32 = 1;
/// File extension used for per-utterance feature archives.
pub const FEATURE_EXT: &str = "svf";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SectionKind {
    GmmUbm,
    TotalVariabilityModel,
    PldaModel,
    XvectorModel,
    LdaProjection,
    FeatureConfig,
    CenteringMean,
    FeatureMatrix,
    PhaseMatrix,
}

impl SectionKind {
    const ALL: [SectionKind; 9] = [
        SectionKind::GmmUbm,
        SectionKind::TotalVariabilityModel,
        SectionKind::PldaModel,
        SectionKind::XvectorModel,
        SectionKind::LdaProjection,
        SectionKind::FeatureConfig,
        SectionKind::CenteringMean,
        SectionKind::FeatureMatrix,
        SectionKind::PhaseMatrix,
    ];

    pub fn tag(self) -> u32 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u32 + 1
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        (tag as usize).checked_sub(1).and_then(|i| Self::ALL.get(i).copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub kind: SectionKind,
    pub dims: Vec<u64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelArchive {
    pub sections: Vec<Section>,
}

impl ModelArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, section: Section) -> &mut Self {
        self.sections.push(section);
        self
    }

    pub fn find(&self, kind: SectionKind) -> Option<&Section> {
        self.sections.iter().find(|s| s.kind == kind)
    }

    pub fn require(&self, kind: SectionKind) -> Result<&Section> {
        self.find(kind)
            .ok_or_else(|| Error::arg(format!("archive has no {kind:?} section")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&s.kind.tag().to_le_bytes());
            out.extend_from_slice(&(s.dims.len() as u32).to_le_bytes());
            for d in &s.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&(s.values.len() as u64).to_le_bytes());
            for v in &s.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::CorruptArchive("missing header or too short".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "archive format version {version}, this build reads version {FORMAT_VERSION}; \
                 re-export it with a matching release"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::CorruptArchive("checksum mismatch (truncated or modified file)".into()));
        }
        let mut r = ByteReader { bytes: body, pos: 12 };
        let n = r.u32()? as usize;
        let mut sections = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::CorruptArchive("section name is not utf-8".into()))?;
            let tag = r.u32()?;
            let kind = SectionKind::from_tag(tag).ok_or_else(|| {
                Error::Version(format!(
                    "section {name:?} has unknown kind tag {tag}; it was written by a newer format version \
                     than {FORMAT_VERSION}"
                ))
            })?;
            let n_dims = r.u32()? as usize;
            let dims = (0..n_dims).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let n_values = r.u64()? as usize;
            if n_values > r.remaining() / 8 {
                return Err(Error::CorruptArchive(format!("section {name:?} overruns the file")));
            }
            let values = (0..n_values).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            sections.push(Section {
                name,
                kind,
                dims,
                values,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::CorruptArchive("trailing bytes after the last section".into()));
        }
        Ok(ModelArchive { sections })
    }

    /// Atomic write; readers never see a partial archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        atomic_write(path, |w| w.write_all(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::CorruptArchive(m) => Error::CorruptArchive(format!("{}: {m}", path.display())),
            Error::Version(m) => Error::Version(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::CorruptArchive("unexpected end of data".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Sequential reader over a section payload.
struct Values<'a> {
    section: &'a Section,
    pos: usize,
}

impl<'a> Values<'a> {
    fn new(section: &'a Section, kind: SectionKind, n_dims: Option<usize>) -> Result<Self> {
        if section.kind != kind {
            return Err(Error::arg(format!(
                "section {:?} is {:?}, expected {kind:?}",
                section.name, section.kind
            )));
        }
        if n_dims.is_some_and(|n| section.dims.len() != n) {
            return Err(Error::CorruptArchive(format!("section {:?} has a malformed header", section.name)));
        }
        Ok(Values { section, pos: 0 })
    }

    fn dim(&self, i: usize) -> Result<usize> {
        self.section
            .dims
            .get(i)
            .map(|&d| d as usize)
            .ok_or_else(|| self.corrupt("header too short"))
    }

    fn corrupt(&self, what: &str) -> Error {
        Error::CorruptArchive(format!("section {:?}: {what}", self.section.name))
    }

    fn take(&mut self, n: usize) -> Result<&'a [f64]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.section.values.len());
        let end = end.ok_or_else(|| self.corrupt("payload shorter than its header"))?;
        let s = &self.section.values[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn scalar(&mut self) -> Result<f64> {
        Ok(self.take(1)?[0])
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows.checked_mul(cols).ok_or_else(|| self.corrupt("dimension overflow"))?;
        Ok(Matrix::from_column_slice(rows, cols, self.take(n)?))
    }

    fn vector(&mut self, n: usize) -> Result<Vector> {
        Ok(Vector::from_column_slice(self.take(n)?))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.section.values.len() {
            return Err(self.corrupt("payload longer than its header"));
        }
        Ok(())
    }
}

fn section(name: &str, kind: SectionKind, dims: Vec<u64>, values: Vec<f64>) -> Section {
    Section {
        name: name.to_string(),
        kind,
        dims,
        values,
    }
}

fn put_matrix(out: &mut Vec<f64>, m: &Matrix) {
    out.extend_from_slice(m.as_slice());
}

pub fn encode_ubm(name: &str, ubm: &GmmUbm) -> Section {
    let mut v = ubm.weights().to_vec();
    put_matrix(&mut v, ubm.means());
    for c in 0..ubm.n_mix() {
        put_matrix(&mut v, ubm.covariance(c).matrix());
    }
    let full = matches!(ubm.covariance_kind(), CovarianceKind::Full) as u64;
    section(name, SectionKind::GmmUbm, vec![ubm.n_mix() as u64, ubm.dim() as u64, full], v)
}

pub fn decode_ubm(s: &Section) -> Result<GmmUbm> {
    let mut r = Values::new(s, SectionKind::GmmUbm, Some(3))?;
    let (n_mix, dim) = (r.dim(0)?, r.dim(1)?);
    let kind = match r.dim(2)? {
        0 => CovarianceKind::Diagonal,
        1 => CovarianceKind::Full,
        _ => return Err(r.corrupt("bad covariance kind")),
    };
    let weights = r.take(n_mix)?.to_vec();
    let means = r.matrix(dim, n_mix)?;
    let covs = (0..n_mix).map(|_| r.matrix(dim, dim)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    GmmUbm::new(weights, means, covs, kind)
}

/// The UBM fingerprint is stored so a T matrix cannot be rebound silently.
pub fn encode_tv(name: &str, tv: &TotalVariabilityModel) -> Section {
    let t = tv.t_matrix();
    let mut v = Vec::new();
    put_matrix(&mut v, t);
    section(
        name,
        SectionKind::TotalVariabilityModel,
        vec![t.nrows() as u64, t.ncols() as u64, tv.ubm_fingerprint()],
        v,
    )
}

pub fn decode_tv(s: &Section, ubm: &GmmUbm) -> Result<TotalVariabilityModel> {
    let mut r = Values::new(s, SectionKind::TotalVariabilityModel, Some(3))?;
    let t = r.matrix(r.dim(0)?, r.dim(1)?)?;
    r.finish()?;
    if s.dims[2] != ubm.fingerprint() {
        return Err(Error::Binding("T matrix was trained on a different UBM".into()));
    }
    TotalVariabilityModel::new(t, ubm)
}

pub fn encode_plda(name: &str, plda: &PldaModel) -> Section {
    let mut v = plda.mean().as_slice().to_vec();
    put_matrix(&mut v, plda.phi());
    put_matrix(&mut v, plda.sigma());
    section(name, SectionKind::PldaModel, vec![plda.dim() as u64, plda.n_factors() as u64], v)
}

pub fn decode_plda(s: &Section) -> Result<PldaModel> {
    let mut r = Values::new(s, SectionKind::PldaModel, Some(2))?;
    let (d, q) = (r.dim(0)?, r.dim(1)?);
    let mean = r.vector(d)?;
    let phi = r.matrix(d, q)?;
    let sigma = r.matrix(d, d)?;
    r.finish()?;
    PldaModel::new(mean, phi, sigma)
}

pub fn encode_lda(name: &str, lda: &LdaProjection) -> Section {
    let m = &lda.matrix;
    section(
        name,
        SectionKind::LdaProjection,
        vec![m.nrows() as u64, m.ncols() as u64],
        m.as_slice().to_vec(),
    )
}

pub fn decode_lda(s: &Section) -> Result<LdaProjection> {
    let mut r = Values::new(s, SectionKind::LdaProjection, Some(2))?;
    let matrix = r.matrix(r.dim(0)?, r.dim(1)?)?;
    r.finish()?;
    Ok(LdaProjection { matrix })
}

pub fn encode_mean(name: &str, mean: &Vector) -> Section {
    section(name, SectionKind::CenteringMean, vec![mean.len() as u64], mean.as_slice().to_vec())
}

pub fn decode_mean(s: &Section) -> Result<Vector> {
    let mut r = Values::new(s, SectionKind::CenteringMean, Some(1))?;
    let v = r.vector(r.dim(0)?)?;
    r.finish()?;
    Ok(v)
}

/// Dims: frame-layer count, segment-layer count, embedding layer, then each
/// frame layer's context length. Payload: contexts, then every weight and
/// bias in forward order with shapes given by the following dims.
pub fn encode_xvector(name: &str, net: &XvectorModel) -> Section {
    let mut dims = vec![
        net.frame_layers.len() as u64,
        net.segment_layers.len() as u64,
        net.embedding_layer as u64,
    ];
    dims.extend(net.frame_layers.iter().map(|l| l.context.len() as u64));
    let mut v: Vec<f64> = net
        .frame_layers
        .iter()
        .flat_map(|l| l.context.iter().map(|&c| c as f64))
        .collect();
    let mut layer = |w: &Matrix, b: &Vector, dims: &mut Vec<u64>| {
        dims.extend([w.nrows() as u64, w.ncols() as u64]);
        put_matrix(&mut v, w);
        v.extend_from_slice(b.as_slice());
    };
    for l in &net.frame_layers {
        layer(&l.weight, &l.bias, &mut dims);
    }
    for l in &net.segment_layers {
        layer(&l.weight, &l.bias, &mut dims);
    }
    layer(&net.output.weight, &net.output.bias, &mut dims);
    section(name, SectionKind::XvectorModel, dims, v)
}

pub fn decode_xvector(s: &Section) -> Result<XvectorModel> {
    let mut r = Values::new(s, SectionKind::XvectorModel, None)?;
    let (n_frame, n_seg, emb) = (r.dim(0)?, r.dim(1)?, r.dim(2)?);
    let mut d = 3;
    let ctx_lens = (0..n_frame)
        .map(|i| r.dim(3 + i))
        .collect::<Result<Vec<_>>>()?;
    d += n_frame;
    let mut contexts = Vec::with_capacity(n_frame);
    for &n in &ctx_lens {
        let c = r.take(n)?;
        if c.iter().any(|x| x.fract() != 0.0 || x.abs() > 1e6) {
            return Err(r.corrupt("non-integer context offset"));
        }
        contexts.push(c.iter().map(|&x| x as i64).collect::<Vec<_>>());
    }
    let dense = |r: &mut Values<'_>, d: &mut usize| -> Result<DenseLayer> {
        let (rows, cols) = (r.dim(*d)?, r.dim(*d + 1)?);
        *d += 2;
        let weight = r.matrix(rows, cols)?;
        let bias = r.vector(rows)?;
        Ok(DenseLayer { weight, bias })
    };
    let mut frame_layers = Vec::with_capacity(n_frame);
    for context in contexts {
        let DenseLayer { weight, bias } = dense(&mut r, &mut d)?;
        frame_layers.push(FrameLayer { context, weight, bias });
    }
    let segment_layers = (0..n_seg).map(|_| dense(&mut r, &mut d)).collect::<Result<Vec<_>>>()?;
    let output = dense(&mut r, &mut d)?;
    if d != s.dims.len() {
        return Err(r.corrupt("header longer than the layer list"));
    }
    r.finish()?;
    XvectorModel::new(frame_layers, segment_layers, emb, output)
}

fn opt(v: Option<f64>) -> [f64; 2] {
    match v {
        Some(x) => [1.0, x],
        None => [0.0, 0.0],
    }
}

pub fn encode_feature_config(name: &str, cfg: &FeatureConfig) -> Section {
    let mut v = vec![
        match cfg.kind {
            FeatureKind::Mfcc => 0.0,
            FeatureKind::Lpms => 1.0,
        },
        match cfg.window {
            WindowKind::Hamming => 0.0,
            WindowKind::Blackman => 1.0,
        },
        cfg.win_len_s,
        cfg.hop_s,
    ];
    v.extend(opt(cfg.pre_emphasis));
    v.extend([cfg.n_mels as f64, cfg.n_ceps as f64]);
    v.extend(opt(cfg.n_fft.map(|n| n as f64)));
    v.extend([cfg.log_floor, cfg.low_freq_hz]);
    section(name, SectionKind::FeatureConfig, Vec::new(), v)
}

pub fn decode_feature_config(s: &Section) -> Result<FeatureConfig> {
    let mut r = Values::new(s, SectionKind::FeatureConfig, Some(0))?;
    let flag = |r: &mut Values<'_>| -> Result<Option<f64>> {
        let (has, x) = (r.scalar()?, r.scalar()?);
        Ok((has != 0.0).then_some(x))
    };
    let kind = feature_kind(r.scalar()?).ok_or_else(|| r.corrupt("bad feature kind"))?;
    let window = match r.scalar()? {
        0.0 => WindowKind::Hamming,
        1.0 => WindowKind::Blackman,
        _ => return Err(r.corrupt("bad window kind")),
    };
    let win_len_s = r.scalar()?;
    let hop_s = r.scalar()?;
    let pre_emphasis = flag(&mut r)?;
    let n_mels = r.scalar()? as usize;
    let n_ceps = r.scalar()? as usize;
    let n_fft = flag(&mut r)?.map(|n| n as usize);
    let log_floor = r.scalar()?;
    let low_freq_hz = r.scalar()?;
    r.finish()?;
    Ok(FeatureConfig {
        kind,
        window,
        win_len_s,
        hop_s,
        pre_emphasis,
        n_mels,
        n_ceps,
        n_fft,
        log_floor,
        low_freq_hz,
    })
}

fn feature_kind(x: f64) -> Option<FeatureKind> {
    match x {
        0.0 => Some(FeatureKind::Mfcc),
        1.0 => Some(FeatureKind::Lpms),
        _ => None,
    }
}

pub fn encode_features(name: &str, f: &FeatureMatrix) -> Section {
    let mut v = vec![f.frame_hop_s];
    put_matrix(&mut v, &f.values);
    if let Some(mask) = &f.vad_mask {
        v.extend(mask.iter().map(|&k| k as u8 as f64));
    }
    let kind = matches!(f.kind, FeatureKind::Lpms) as u64;
    section(
        name,
        SectionKind::FeatureMatrix,
        vec![
            kind,
            f.dim() as u64,
            f.frames() as u64,
            f.sample_rate as u64,
            f.vad_mask.is_some() as u64,
        ],
        v,
    )
}

pub fn decode_features(s: &Section) -> Result<FeatureMatrix> {
    let mut r = Values::new(s, SectionKind::FeatureMatrix, Some(5))?;
    let kind = feature_kind(r.dim(0)? as f64).ok_or_else(|| r.corrupt("bad feature kind"))?;
    let (rows, cols) = (r.dim(1)?, r.dim(2)?);
    let sample_rate = u32::try_from(r.dim(3)?).map_err(|_| r.corrupt("bad sample rate"))?;
    let hop = r.scalar()?;
    let values = r.matrix(rows, cols)?;
    let vad_mask = match r.dim(4)? {
        0 => None,
        _ => Some(r.take(cols)?.iter().map(|&k| k != 0.0).collect()),
    };
    r.finish()?;
    Ok(FeatureMatrix {
        kind,
        values,
        frame_hop_s: hop,
        sample_rate,
        vad_mask,
    })
}

pub fn encode_phase(name: &str, p: &PhaseMatrix) -> Section {
    section(
        name,
        SectionKind::PhaseMatrix,
        vec![p.dim() as u64, p.frames() as u64],
        p.values.as_slice().to_vec(),
    )
}

pub fn decode_phase(s: &Section) -> Result<PhaseMatrix> {
    let mut r = Values::new(s, SectionKind::PhaseMatrix, Some(2))?;
    let values = r.matrix(r.dim(0)?, r.dim(1)?)?;
    r.finish()?;
    Ok(PhaseMatrix { values })
}

/// Every section a scoring pipeline needs.
pub fn pipeline_archive(p: &ScoringPipeline) -> ModelArchive {
    let mut a = ModelArchive::new();
    a.push(encode_feature_config("features", &p.features));
    match &p.extractor {
        Extractor::Ivector { ubm, tv } => {
            a.push(encode_ubm("ubm", ubm)).push(encode_tv("tv", tv));
        }
        Extractor::Xvector { net, lda } => {
            a.push(encode_xvector("xvector", net)).push(encode_lda("lda", lda));
        }
    }
    a.push(encode_mean("center", &p.center)).push(encode_plda("plda", &p.plda));
    a
}

/// Rebuilds a pipeline; the extractor type follows from the sections present.
pub fn pipeline_from_archive(a: &ModelArchive, vad_margin: f64) -> Result<ScoringPipeline> {
    let features = decode_feature_config(a.require(SectionKind::FeatureConfig)?)?;
    let center = decode_mean(a.require(SectionKind::CenteringMean)?)?;
    let plda = decode_plda(a.require(SectionKind::PldaModel)?)?;
    let mut p = if let Some(s) = a.find(SectionKind::GmmUbm) {
        let ubm = decode_ubm(s)?;
        let tv = decode_tv(a.require(SectionKind::TotalVariabilityModel)?, &ubm)?;
        ScoringPipeline::ivector(features, ubm, tv, center, plda)?
    } else {
        let net = decode_xvector(a.require(SectionKind::XvectorModel)?)?;
        let lda = decode_lda(a.require(SectionKind::LdaProjection)?)?;
        ScoringPipeline::xvector(features, net, lda, center, plda)?
    };
    p.vad_margin = vad_margin;
    Ok(p)
}

pub fn save_pipeline(path: &Path, p: &ScoringPipeline) -> Result<()> {
    pipeline_archive(p).save(path)
}

pub fn load_pipeline(path: &Path, vad_margin: f64) -> Result<ScoringPipeline> {
    pipeline_from_archive(&ModelArchive::load(path)?, vad_margin)
}

pub fn utterance_archive(utt: &Utterance) -> ModelArchive {
    let mut a = ModelArchive::new();
    for f in [&utt.mfcc, &utt.lpms].into_iter().flatten() {
        let name = match f.kind {
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::Lpms => "lpms",
        };
        a.push(encode_features(name, f));
    }
    if let Some(p) = &utt.phase {
        a.push(encode_phase("phase", p));
    }
    a
}

pub fn utterance_from_archive(a: &ModelArchive, speaker: Option<String>) -> Result<Utterance> {
    let mut utt = Utterance {
        speaker,
        ..Utterance::default()
    };
    for s in &a.sections {
        match s.kind {
            SectionKind::FeatureMatrix => utt.set_features(decode_features(s)?),
            SectionKind::PhaseMatrix => utt.phase = Some(decode_phase(s)?),
            other => return Err(Error::arg(format!("unexpected {other:?} section in a feature archive"))),
        }
    }
    Ok(utt)
}

const SPEAKERS_FILE: &str = "speakers.txt";

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(Error::arg(format!("utterance id {id:?} is not usable as a file name")))
    }
}

pub fn feature_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.{FEATURE_EXT}"))
}

/// One archive per utterance plus `speakers.txt` (`utt speaker` lines).
pub fn save_store(dir: &Path, store: &FeatureStore) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut speakers = String::new();
    for (id, utt) in &store.utterances {
        check_id(id)?;
        utterance_archive(utt).save(&feature_path(dir, id))?;
        if let Some(s) = &utt.speaker {
            speakers.push_str(&format!("{id} {s}\n"));
        }
    }
    write_text(&dir.join(SPEAKERS_FILE), &speakers)
}

pub fn load_store(dir: &Path) -> Result<FeatureStore> {
    let speakers: BTreeMap<String, String> = match dir.join(SPEAKERS_FILE) {
        p if p.exists() => parse_speakers(&read_text(&p)?)?,
        _ => BTreeMap::new(),
    };
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = entries
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == FEATURE_EXT));
    paths.sort();
    let mut store = FeatureStore::default();
    for path in paths {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let utt = utterance_from_archive(&ModelArchive::load(&path)?, speakers.get(&id).cloned())?;
        store.insert(id, utt);
    }
    if store.is_empty() {
        return Err(Error::EmptyInput(format!("no .{FEATURE_EXT} archives in {}", dir.display())));
    }
    Ok(store)
}

/// Parses `utterance speaker` lines; `#` starts a comment.
pub fn parse_speakers(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [utt, spk] = parts[..] else {
            return Err(Error::arg(format!("speaker list line {}: expected `utterance speaker`", i + 1)));
        };
        if out.insert(utt.to_string(), spk.to_string()).is_some() {
            return Err(Error::arg(format!("speaker list line {}: duplicate utterance {utt}", i + 1)));
        }
    }
    Ok(out)
}
