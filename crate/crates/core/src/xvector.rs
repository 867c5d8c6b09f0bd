//! Small TDNN x-vector network: spliced frame layers, mean+stddev pooling,
//! two segment layers and a softmax speaker classifier trained with SGD.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::ivector::{EmbeddingKind, SpeakerEmbedding};
use crate::numerics::{all_finite, logsumexp_unchecked, Matrix, Vector};

pub const POOL_VARIANCE_FLOOR: f64 = 1e-8;

/// Affine + ReLU over frames spliced at `context` offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLayer {
    pub context: Vec<i64>,
    /// `out × (in · context.len())`, column blocks in context order.
    pub weight: Matrix,
    pub bias: Vector,
}

impl FrameLayer {
    fn min_offset(&self) -> i64 {
        *self.context.iter().min().expect("non-empty context")
    }

    fn span(&self) -> usize {
        (self.context.iter().max().unwrap() - self.min_offset()) as usize
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols() / self.context.len()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn splice(&self, h: &Matrix) -> Matrix {
        let ch = h.nrows();
        let t_out = h.ncols() - self.span();
        let shift = -self.min_offset();
        let mut s = Matrix::zeros(ch * self.context.len(), t_out);
        for t in 0..t_out {
            for (k, &o) in self.context.iter().enumerate() {
                let src = (t as i64 + shift + o) as usize;
                s.view_mut((k * ch, t), (ch, 1)).copy_from(&h.column(src));
            }
        }
        s
    }

    fn unsplice(&self, ds: &Matrix, t_in: usize) -> Matrix {
        let ch = self.in_dim();
        let shift = -self.min_offset();
        let mut dh = Matrix::zeros(ch, t_in);
        for t in 0..ds.ncols() {
            for (k, &o) in self.context.iter().enumerate() {
                let dst = (t as i64 + shift + o) as usize;
                let mut col = dh.column_mut(dst);
                col += ds.view((k * ch, t), (ch, 1));
            }
        }
        dh
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct XvectorModel {
    pub frame_layers: Vec<FrameLayer>,
    /// Affine + ReLU layers after pooling.
    pub segment_layers: Vec<DenseLayer>,
    /// Which segment layer's pre-activation is the x-vector.
    pub embedding_layer: usize,
    pub output: DenseLayer,
}

impl XvectorModel {
    pub fn new(
        frame_layers: Vec<FrameLayer>,
        segment_layers: Vec<DenseLayer>,
        embedding_layer: usize,
        output: DenseLayer,
    ) -> Result<Self> {
        let model = XvectorModel {
            frame_layers,
            segment_layers,
            embedding_layer,
            output,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_layers.is_empty() || self.segment_layers.is_empty() {
            return Err(Error::arg("x-vector model needs frame and segment layers"));
        }
        if self.embedding_layer >= self.segment_layers.len() {
            return Err(Error::arg("embedding layer index out of range"));
        }
        let mut width = self.frame_layers[0].in_dim();
        for (i, l) in self.frame_layers.iter().enumerate() {
            if l.context.is_empty() {
                return Err(Error::arg(format!("frame layer {i} has an empty context")));
            }
            let mut neg: Vec<i64> = l.context.iter().map(|o| -o).collect();
            let mut pos = l.context.clone();
            neg.sort_unstable();
            pos.sort_unstable();
            if neg != pos {
                return Err(Error::arg(format!("frame layer {i} context is not symmetric around 0")));
            }
            if l.weight.ncols() != width * l.context.len() || l.bias.len() != l.out_dim() {
                return Err(Error::arg(format!("frame layer {i} has inconsistent shapes")));
            }
            width = l.out_dim();
        }
        width *= 2;
        for (i, l) in self.segment_layers.iter().chain(std::iter::once(&self.output)).enumerate() {
            if l.weight.ncols() != width || l.bias.len() != l.weight.nrows() {
                return Err(Error::arg(format!("dense layer {i} has inconsistent shapes")));
            }
            width = l.weight.nrows();
        }
        if !self.parameters().iter().all(|v| v.is_finite()) {
            return Err(Error::arg("x-vector weights must be finite"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.frame_layers[0].in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.segment_layers[self.embedding_layer].weight.nrows()
    }

    pub fn n_speakers(&self) -> usize {
        self.output.weight.nrows()
    }

    /// Minimum number of input frames for one pooled frame.
    pub fn receptive_field(&self) -> usize {
        1 + self.frame_layers.iter().map(FrameLayer::span).sum::<usize>()
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.frame_layers {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        for l in self.segment_layers.iter().chain(std::iter::once(&self.output)) {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.frame_layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        for l in self.segment_layers.iter_mut().chain(std::iter::once(&mut self.output)) {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    /// All weights and biases, flattened in a fixed order.
    pub fn parameters(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameters().len() {
            return Err(Error::arg("parameter vector has the wrong length"));
        }
        let mut rest = values;
        for s in self.slices_mut() {
            let (head, tail) = rest.split_at(s.len());
            s.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.slices_mut().into_iter().for_each(|s| s.fill(0.0));
        z
    }

    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += alpha * y);
        }
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.nrows() != self.input_dim() {
            return Err(Error::arg(format!(
                "x-vector expects {}-dimensional features, got {}",
                self.input_dim(),
                x.nrows()
            )));
        }
        if x.ncols() < self.receptive_field() {
            return Err(Error::ReceptiveField {
                frames: x.ncols(),
                required: self.receptive_field(),
            });
        }
        Ok(())
    }

    fn forward(&self, x: &Matrix) -> Result<Trace> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut spliced = Vec::with_capacity(self.frame_layers.len());
        let mut pre = Vec::with_capacity(self.frame_layers.len());
        for l in &self.frame_layers {
            let s = l.splice(&h);
            let mut z = &l.weight * &s;
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            h = z.map(relu);
            spliced.push(s);
            pre.push(z);
        }
        let n = h.ncols() as f64;
        let mean = h.column_sum() / n;
        let mut var = Vector::zeros(h.nrows());
        for col in h.column_iter() {
            let d = col - &mean;
            var += d.component_mul(&d);
        }
        var /= n;
        let std = var.map(|v| v.max(POOL_VARIANCE_FLOOR).sqrt());
        let mut pooled = Vector::zeros(2 * h.nrows());
        pooled.rows_mut(0, h.nrows()).copy_from(&mean);
        pooled.rows_mut(h.nrows(), h.nrows()).copy_from(&std);

        let mut seg_pre = Vec::with_capacity(self.segment_layers.len());
        let mut seg_in = Vec::with_capacity(self.segment_layers.len());
        let mut a = pooled;
        for l in &self.segment_layers {
            let z = &l.weight * &a + &l.bias;
            seg_in.push(std::mem::replace(&mut a, z.map(relu)));
            seg_pre.push(z);
        }
        let logits = &self.output.weight * &a + &self.output.bias;
        Ok(Trace {
            spliced,
            pre,
            last: h,
            mean,
            var,
            std,
            seg_in,
            seg_pre,
            top: a,
            logits,
        })
    }

    /// Cross-entropy loss and parameter gradient for one labelled example.
    fn loss_and_gradient(&self, x: &Matrix, label: usize) -> Result<(f64, XvectorModel)> {
        let tr = self.forward(x)?;
        let lse = logsumexp_unchecked(tr.logits.as_slice());
        let loss = lse - tr.logits[label];
        let mut g = self.zeros_like();

        let mut d_logits = tr.logits.map(|v| (v - lse).exp());
        d_logits[label] -= 1.0;
        g.output.weight = &d_logits * tr.top.transpose();
        g.output.bias = d_logits.clone();
        let mut da = self.output.weight.transpose() * d_logits;
        for i in (0..self.segment_layers.len()).rev() {
            let dz = da.zip_map(&tr.seg_pre[i], |d, z| if z > 0.0 { d } else { 0.0 });
            g.segment_layers[i].weight = &dz * tr.seg_in[i].transpose();
            da = self.segment_layers[i].weight.transpose() * &dz;
            g.segment_layers[i].bias = dz;
        }

        let ch = tr.mean.len();
        let n = tr.last.ncols() as f64;
        let d_mean = da.rows(0, ch).into_owned();
        let d_std = da.rows(ch, ch).into_owned();
        let mut dh = Matrix::zeros(ch, tr.last.ncols());
        for (t, col) in tr.last.column_iter().enumerate() {
            for c in 0..ch {
                let mut v = d_mean[c] / n;
                if tr.var[c] > POOL_VARIANCE_FLOOR {
                    v += d_std[c] * (col[c] - tr.mean[c]) / (n * tr.std[c]);
                }
                dh[(c, t)] = v;
            }
        }
        for i in (0..self.frame_layers.len()).rev() {
            let l = &self.frame_layers[i];
            let dz = dh.zip_map(&tr.pre[i], |d, z| if z > 0.0 { d } else { 0.0 });
            g.frame_layers[i].weight = &dz * tr.spliced[i].transpose();
            g.frame_layers[i].bias = dz.column_sum();
            if i > 0 {
                let t_in = tr.pre[i - 1].ncols();
                dh = l.unsplice(&(l.weight.transpose() * &dz), t_in);
            }
        }
        Ok((loss, g))
    }

    fn log_probs(&self, x: &Matrix) -> Result<Vector> {
        let tr = self.forward(x)?;
        let lse = logsumexp_unchecked(tr.logits.as_slice());
        Ok(tr.logits.map(|v| v - lse))
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

struct Trace {
    spliced: Vec<Matrix>,
    pre: Vec<Matrix>,
    last: Matrix,
    mean: Vector,
    var: Vector,
    std: Vector,
    seg_in: Vec<Vector>,
    seg_pre: Vec<Vector>,
    top: Vector,
    logits: Vector,
}

/// X-vector of the retained frames (VAD-dropped frames are removed before
/// splicing).
pub fn forward_embed(model: &XvectorModel, feat: &FeatureMatrix) -> Result<SpeakerEmbedding> {
    let tr = model.forward(&feat.retained_values())?;
    Ok(SpeakerEmbedding::new(
        EmbeddingKind::Xvector,
        tr.seg_pre[model.embedding_layer].clone(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub features: FeatureMatrix,
    pub speaker: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XvectorConfig {
    pub contexts: Vec<Vec<i64>>,
    pub hidden: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Random training chunk length in frames; 0 trains on whole utterances.
    pub chunk_frames: usize,
    pub seed: u64,
}

impl Default for XvectorConfig {
    fn default() -> Self {
        XvectorConfig {
            contexts: vec![vec![-2, -1, 0, 1, 2], vec![-2, 0, 2], vec![-3, 0, 3], vec![0], vec![0]],
            hidden: 64,
            embed_dim: 32,
            epochs: 30,
            lr: 0.01,
            batch_size: 16,
            chunk_frames: 100,
            seed: 0,
        }
    }
}

/// He-initialised network for the configured architecture.
pub fn init_xvector(cfg: &XvectorConfig, input_dim: usize, n_speakers: usize) -> Result<XvectorModel> {
    if cfg.contexts.is_empty() || cfg.hidden == 0 || cfg.embed_dim == 0 || input_dim == 0 {
        return Err(Error::Config("x-vector architecture has an empty layer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dense = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        let n = Normal::new(0.0, (2.0 / cols as f64).sqrt()).unwrap();
        Matrix::from_fn(rows, cols, |_, _| n.sample(rng))
    };
    let mut width = input_dim;
    let mut frame_layers = Vec::new();
    for ctx in &cfg.contexts {
        frame_layers.push(FrameLayer {
            context: ctx.clone(),
            weight: dense(cfg.hidden, width * ctx.len(), &mut rng),
            bias: Vector::zeros(cfg.hidden),
        });
        width = cfg.hidden;
    }
    let segment_layers = vec![
        DenseLayer {
            weight: dense(cfg.embed_dim, 2 * cfg.hidden, &mut rng),
            bias: Vector::zeros(cfg.embed_dim),
        },
        DenseLayer {
            weight: dense(cfg.embed_dim, cfg.embed_dim, &mut rng),
            bias: Vector::zeros(cfg.embed_dim),
        },
    ];
    let output = DenseLayer {
        weight: dense(n_speakers, cfg.embed_dim, &mut rng),
        bias: Vector::zeros(n_speakers),
    };
    XvectorModel::new(frame_layers, segment_layers, 0, output)
}

#[derive(Debug, Clone)]
pub struct XvectorTraining {
    pub model: XvectorModel,
    /// Mean whole-utterance cross-entropy before training and after each epoch.
    pub epoch_losses: Vec<f64>,
    pub accuracy: f64,
}

fn dataset_loss(model: &XvectorModel, records: &[TrainRecord]) -> Result<(f64, f64)> {
    let per: Vec<(f64, bool)> = records
        .par_iter()
        .map(|r| {
            let lp = model.log_probs(&r.features.retained_values())?;
            Ok((-lp[r.speaker], lp.argmax().0 == r.speaker))
        })
        .collect::<Result<_>>()?;
    let n = records.len() as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = per.iter().filter(|p| p.1).count() as f64 / n;
    Ok((loss, acc))
}

pub fn train_xvector(records: &[TrainRecord], cfg: &XvectorConfig) -> Result<XvectorTraining> {
    let first = records
        .first()
        .ok_or_else(|| Error::EmptyInput("no x-vector training records".into()))?;
    let n_speakers = records.iter().map(|r| r.speaker).max().unwrap() + 1;
    let distinct: std::collections::BTreeSet<usize> = records.iter().map(|r| r.speaker).collect();
    if distinct.len() < 2 {
        return Err(Error::Training("x-vector training needs at least two speakers".into()));
    }
    if !(cfg.lr >= 0.0) || cfg.batch_size == 0 {
        return Err(Error::Config("x-vector lr must be >= 0 and batch_size > 0".into()));
    }
    let model = init_xvector(cfg, first.features.dim(), n_speakers)?;
    train_from(model, records, cfg)
}

/// SGD from a given starting model.
pub fn train_from(mut model: XvectorModel, records: &[TrainRecord], cfg: &XvectorConfig) -> Result<XvectorTraining> {
    let inputs: Vec<Matrix> = records.iter().map(|r| r.features.retained_values()).collect();
    for (r, x) in records.iter().zip(&inputs) {
        if r.speaker >= model.n_speakers() {
            return Err(Error::arg(format!("speaker label {} out of range", r.speaker)));
        }
        model.check_input(x)?;
    }
    let rf = model.receptive_field();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut losses = vec![dataset_loss(&model, records)?.0];
    let mut order: Vec<usize> = (0..records.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let chunks: Vec<(usize, usize, usize)> = batch
                .iter()
                .map(|&i| {
                    let total = inputs[i].ncols();
                    let len = if cfg.chunk_frames == 0 { total } else { cfg.chunk_frames.max(rf).min(total) };
                    (i, rng.random_range(0..=total - len), len)
                })
                .collect();
            let grads: Vec<XvectorModel> = chunks
                .par_iter()
                .map(|&(i, start, len)| {
                    let x = inputs[i].columns(start, len).into_owned();
                    model.loss_and_gradient(&x, records[i].speaker).map(|(_, g)| g)
                })
                .collect::<Result<_>>()?;
            let mut total = model.zeros_like();
            for g in &grads {
                total.add_scaled(1.0, g);
            }
            model.add_scaled(-cfg.lr / batch.len() as f64, &total);
        }
        let (loss, _) = dataset_loss(&model, records)?;
        if !loss.is_finite() || !model.parameters().iter().all(|v| v.is_finite()) {
            return Err(Error::Training(format!(
                "x-vector loss diverged at epoch {}; try a lower learning rate than {}",
                epoch + 1,
                cfg.lr
            )));
        }
        log::debug!("x-vector epoch {} loss {loss:.4}", epoch + 1);
        losses.push(loss);
    }
    let (_, accuracy) = dataset_loss(&model, records)?;
    debug_assert!(model.frame_layers.iter().all(|l| all_finite(&l.weight)));
    Ok(XvectorTraining {
        model,
        epoch_losses: losses,
        accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::FeatureKind;

    fn feat(x: Matrix) -> FeatureMatrix {
        FeatureMatrix::new(FeatureKind::Mfcc, x, 0.01, 16000)
    }

    fn small_cfg(contexts: Vec<Vec<i64>>, hidden: usize, embed: usize) -> XvectorConfig {
        XvectorConfig {
            contexts,
            hidden,
            embed_dim: embed,
            epochs: 20,
            lr: 0.05,
            batch_size: 4,
            chunk_frames: 0,
            seed: 3,
        }
    }

    fn random_input(dim: usize, frames: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(dim, frames, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Per-frame loops with explicit indexing, no splicing matrices.
    fn naive_embed(m: &XvectorModel, x: &Matrix) -> Vector {
        let mut h: Vec<Vec<f64>> = (0..x.ncols()).map(|t| x.column(t).iter().copied().collect()).collect();
        for l in &m.frame_layers {
            let lo = *l.context.iter().min().unwrap();
            let hi = *l.context.iter().max().unwrap();
            let mut next = Vec::new();
            for t in (-lo)..(h.len() as i64 - hi) {
                let mut out = vec![0.0; l.out_dim()];
                for (o, out_v) in out.iter_mut().enumerate() {
                    let mut acc = l.bias[o];
                    for (k, &off) in l.context.iter().enumerate() {
                        let src = &h[(t + off) as usize];
                        for (c, v) in src.iter().enumerate() {
                            acc += l.weight[(o, k * src.len() + c)] * v;
                        }
                    }
                    *out_v = acc.max(0.0);
                }
                next.push(out);
            }
            h = next;
        }
        let ch = h[0].len();
        let n = h.len() as f64;
        let mut pooled = vec![0.0; 2 * ch];
        for c in 0..ch {
            let mean = h.iter().map(|f| f[c]).sum::<f64>() / n;
            let var = h.iter().map(|f| (f[c] - mean).powi(2)).sum::<f64>() / n;
            pooled[c] = mean;
            pooled[ch + c] = var.max(POOL_VARIANCE_FLOOR).sqrt();
        }
        let mut a = pooled;
        let mut emb = Vec::new();
        for (i, l) in m.segment_layers.iter().enumerate() {
            let z: Vec<f64> = (0..l.weight.nrows())
                .map(|r| l.bias[r] + (0..a.len()).map(|c| l.weight[(r, c)] * a[c]).sum::<f64>())
                .collect();
            if i == m.embedding_layer {
                emb = z.clone();
            }
            a = z.iter().map(|v| v.max(0.0)).collect();
        }
        Vector::from_vec(emb)
    }

    #[test]
    fn matches_naive_loop() {
        let cfg = small_cfg(vec![vec![-1, 0, 1], vec![-2, 0, 2], vec![0]], 6, 5);
        let mut m = init_xvector(&cfg, 4, 3).unwrap();
        // nonzero biases so every path is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for l in &mut m.frame_layers {
            l.bias = Vector::from_fn(l.bias.len(), |_, _| rng.random_range(-0.2..0.2));
        }
        let x = random_input(4, 10, 1);
        let got = forward_embed(&m, &feat(x.clone())).unwrap();
        let want = naive_embed(&m, &x);
        assert!((got.values - want).amax() < 1e-10);
    }

    #[test]
    fn constant_frames_floor_the_stddev() {
        let cfg = small_cfg(vec![vec![0]], 3, 2);
        let m = init_xvector(&cfg, 2, 2).unwrap();
        let x = Matrix::from_fn(2, 6, |d, _| 0.3 + d as f64);
        let tr = m.forward(&x).unwrap();
        assert!(tr.std.iter().all(|&s| s == POOL_VARIANCE_FLOOR.sqrt()));
        // embedding = W·[mean; floor] + b
        let h = tr.last.column(0).into_owned();
        let mut pooled = Vector::from_element(6, POOL_VARIANCE_FLOOR.sqrt());
        pooled.rows_mut(0, 3).copy_from(&h);
        let want = &m.segment_layers[0].weight * pooled + &m.segment_layers[0].bias;
        assert!((forward_embed(&m, &feat(x)).unwrap().values - want).amax() < 1e-14);
    }

    #[test]
    fn identity_frame_layer_pools_raw_features() {
        let layer = FrameLayer {
            context: vec![0],
            weight: Matrix::identity(3, 3),
            bias: Vector::zeros(3),
        };
        let seg = DenseLayer {
            weight: Matrix::identity(6, 6),
            bias: Vector::zeros(6),
        };
        let out = DenseLayer {
            weight: Matrix::zeros(2, 6),
            bias: Vector::zeros(2),
        };
        let m = XvectorModel::new(vec![layer], vec![seg], 0, out).unwrap();
        let x = random_input(3, 8, 2).map(|v| v.abs() + 0.1);
        let e = forward_embed(&m, &feat(x.clone())).unwrap().values;
        let mean = x.column_mean();
        for c in 0..3 {
            assert!((e[c] - mean[c]).abs() < 1e-14);
            let var = x.row(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / 8.0;
            assert!((e[3 + c] - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn pointwise_model_is_permutation_invariant() {
        let cfg = small_cfg(vec![vec![0], vec![0]], 5, 4);
        let m = init_xvector(&cfg, 3, 2).unwrap();
        let x = random_input(3, 12, 4);
        let perm: Vec<usize> = (0..12).rev().collect();
        let y = x.select_columns(perm.iter());
        let a = forward_embed(&m, &feat(x)).unwrap().values;
        let b = forward_embed(&m, &feat(y)).unwrap().values;
        // pooled sums are order-dependent only in rounding
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn too_few_frames_reports_minimum() {
        let m = init_xvector(&XvectorConfig::default(), 4, 2).unwrap();
        assert_eq!(m.receptive_field(), 15);
        match forward_embed(&m, &feat(random_input(4, 14, 1))) {
            Err(Error::ReceptiveField { frames: 14, required: 15 }) => {}
            other => panic!("{other:?}"),
        }
        assert!(forward_embed(&m, &feat(random_input(4, 15, 1))).is_ok());
    }

    #[test]
    fn asymmetric_context_rejected() {
        let layer = FrameLayer {
            context: vec![0, 1],
            weight: Matrix::zeros(2, 4),
            bias: Vector::zeros(2),
        };
        let seg = DenseLayer {
            weight: Matrix::zeros(2, 4),
            bias: Vector::zeros(2),
        };
        let out = DenseLayer {
            weight: Matrix::zeros(2, 2),
            bias: Vector::zeros(2),
        };
        assert!(XvectorModel::new(vec![layer], vec![seg], 0, out).is_err());
    }

    #[test]
    fn training_gradient_matches_finite_differences() {
        let cfg = small_cfg(vec![vec![-1, 0, 1], vec![0]], 4, 3);
        let m = init_xvector(&cfg, 3, 3).unwrap();
        let x = random_input(3, 9, 5);
        let (_, g) = m.loss_and_gradient(&x, 1).unwrap();
        let theta = m.parameters();
        let analytic = g.parameters();
        let h = 1e-6;
        let mut probe = m.clone();
        let mut checked = 0;
        for k in 0..theta.len() {
            let mut p = theta.clone();
            p[k] += h;
            probe.set_parameters(&p).unwrap();
            let up = -probe.log_probs(&x).unwrap()[1];
            p[k] -= 2.0 * h;
            probe.set_parameters(&p).unwrap();
            let down = -probe.log_probs(&x).unwrap()[1];
            let fd = (up - down) / (2.0 * h);
            if analytic[k].abs() > 1e-6 {
                assert!((fd - analytic[k]).abs() <= 1e-4 * analytic[k].abs(), "param {k}: {fd} vs {}", analytic[k]);
                checked += 1;
            } else {
                assert!(fd.abs() < 1e-6);
            }
        }
        assert!(checked > theta.len() / 3);
    }

    fn separable_records(n_per: usize, seed: u64) -> Vec<TrainRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for s in 0..2 {
            for _ in 0..n_per {
                let offset = if s == 0 { -1.0 } else { 1.0 };
                let x = Matrix::from_fn(4, 30, |_, _| offset + 0.5 * rng.random_range(-1.0..1.0));
                out.push(TrainRecord { features: feat(x), speaker: s });
            }
        }
        out
    }

    #[test]
    fn separable_speakers_are_learned() {
        let records = separable_records(10, 6);
        let cfg = small_cfg(vec![vec![-1, 0, 1], vec![0]], 8, 4);
        let out = train_xvector(&records, &cfg).unwrap();
        assert_eq!(out.epoch_losses.len(), cfg.epochs + 1);
        assert!(out.accuracy >= 0.95);
        let (l0, l1) = (out.epoch_losses[0], *out.epoch_losses.last().unwrap());
        assert!(l1 <= 0.8 * l0, "{l0} -> {l1}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let records = separable_records(3, 7);
        let mut cfg = small_cfg(vec![vec![0]], 4, 3);
        cfg.lr = 0.0;
        cfg.epochs = 2;
        let init = init_xvector(&cfg, 4, 2).unwrap();
        let out = train_xvector(&records, &cfg).unwrap();
        assert_eq!(out.model, init);
    }

    #[test]
    fn one_small_step_does_not_increase_loss() {
        let records = separable_records(3, 8);
        let mut cfg = small_cfg(vec![vec![-1, 0, 1]], 4, 3);
        cfg.lr = 1e-3;
        cfg.epochs = 1;
        cfg.batch_size = records.len();
        let out = train_xvector(&records, &cfg).unwrap();
        assert!(out.epoch_losses[1] <= out.epoch_losses[0]);
    }

    #[test]
    fn divergence_is_reported() {
        let records = separable_records(3, 9);
        let mut cfg = small_cfg(vec![vec![0]], 4, 3);
        cfg.lr = 1e300;
        match train_xvector(&records, &cfg) {
            Err(Error::Training(msg)) => assert!(msg.contains("lower learning rate")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_speaker_rejected() {
        let mut records = separable_records(2, 10);
        records.retain(|r| r.speaker == 0);
        assert!(matches!(
            train_xvector(&records, &small_cfg(vec![vec![0]], 2, 2)),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let records = separable_records(4, 11);
        let mut cfg = small_cfg(vec![vec![-1, 0, 1]], 4, 3);
        cfg.chunk_frames = 10;
        cfg.epochs = 3;
        let a = train_xvector(&records, &cfg).unwrap();
        let b = train_xvector(&records, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }
}
