//! Siamese training: both candidates of a triplet are scored against the
//! shared reference with the same weights and the BCE of their preference
//! probability drives AdamW.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vfiqa_tensor::{AdamW, AdamWConfig, Element, Tape};

use crate::clip::{snap_extent, VideoClip};
use crate::config::TrainConfig;
use crate::dataset::{load_triplet, read_manifest, Triplet};
use crate::error::{Error, Result};
use crate::model::{siamese_loss, MetricModel};

/// A loaded training triplet; `h` is the preference for B.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub a: VideoClip,
    pub b: VideoClip,
    pub reference: VideoClip,
    pub h: f64,
}

impl Sample {
    /// The same judgment with the candidates exchanged.
    pub fn swapped(&self) -> Sample {
        Sample { id: self.id.clone(), a: self.b.clone(), b: self.a.clone(), reference: self.reference.clone(), h: 1.0 - self.h }
    }

    fn resized(&self, scale: f64) -> Result<Sample> {
        let (h, w) = (snap_extent(self.reference.height() as f64 * scale), snap_extent(self.reference.width() as f64 * scale));
        Ok(Sample {
            id: self.id.clone(),
            a: self.a.resized(h, w)?,
            b: self.b.resized(h, w)?,
            reference: self.reference.resized(h, w)?,
            h: self.h,
        })
    }
}

pub trait TripletSource {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<Sample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TripletSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn load(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

impl TripletSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn load(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

/// Labeled triplets of a manifest, loaded from disk on demand.
pub struct ManifestSource {
    path: PathBuf,
    triplets: Vec<Triplet>,
}

impl ManifestSource {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let all = read_manifest(&path)?;
        let total = all.len();
        let triplets: Vec<_> = all.into_iter().filter(Triplet::is_labeled).collect();
        if triplets.len() < total {
            log::warn!("{}: skipping {} unlabeled triplet(s)", path.display(), total - triplets.len());
        }
        if triplets.is_empty() {
            return Err(Error::Invalid(format!("{} holds no labeled triplets", path.display())));
        }
        Ok(Self { path, triplets })
    }
}

impl TripletSource for ManifestSource {
    fn len(&self) -> usize {
        self.triplets.len()
    }

    fn load(&self, index: usize) -> Result<Sample> {
        let t = &self.triplets[index];
        let (a, b, reference) = load_triplet(&self.path, t)?;
        Ok(Sample { id: t.id.clone(), a, b, reference, h: t.h.unwrap_or_default() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub samples: usize,
    pub skipped: usize,
}

pub struct Trainer<'m, T: Element = f32> {
    model: &'m mut MetricModel<T>,
    optimizer: AdamW<T>,
    rng: ChaCha8Rng,
    config: TrainConfig,
}

impl<'m, T: Element> Trainer<'m, T> {
    pub fn new(model: &'m mut MetricModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        });
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { model, optimizer, rng, config })
    }

    pub fn steps_taken(&self) -> u64 {
        self.optimizer.steps_taken()
    }

    pub fn model(&self) -> &MetricModel<T> {
        self.model
    }

    /// One optimizer step on `batch` after a joint random resize. Returns
    /// the mean loss before the update.
    pub fn step(&mut self, batch: &[Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let scale = self.rng.random_range(self.config.scale_min..=self.config.scale_max);
        let resized = batch.iter().map(|s| s.resized(scale)).collect::<Result<Vec<_>>>()?;

        self.model.params.zero_grads();
        let mut loss = 0.0;
        for group in shape_groups(&resized) {
            let weight = group.len() as f64 / batch.len() as f64;
            let tape = Tape::new();
            let bound = self.model.bind(&tape, true);
            let group_loss = group_loss(self.model, &tape, &bound, &group)?;
            let scaled = tape.scale(&group_loss, T::from_f64_lossy(weight));
            loss += scaled.item().as_f64();
            let grads = tape.backward(&scaled)?;
            self.model.params.accumulate(&bound, &grads)?;
        }
        self.model.params.fill_missing_grads()?;
        self.optimizer.step(self.model.params.iter_mut())?;
        Ok(loss)
    }

    /// One pass over `source` in a seeded random order. Triplets that fail
    /// to load are skipped with a warning.
    pub fn epoch(&mut self, source: &dyn TripletSource, epoch: usize) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut total, mut steps, mut samples, mut skipped) = (0.0, 0, 0, 0);
        for chunk in order.chunks(self.config.batch) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                match source.load(i) {
                    Ok(s) => batch.push(s),
                    Err(e) => {
                        log::warn!("skipping triplet {i}: {e}");
                        skipped += 1;
                    }
                }
            }
            if batch.is_empty() {
                continue;
            }
            total += self.step(&batch)? * batch.len() as f64;
            samples += batch.len();
            steps += 1;
        }
        if samples == 0 {
            return Err(Error::Invalid(format!("epoch {epoch} had no loadable triplets")));
        }
        Ok(EpochStats { epoch, mean_loss: total / samples as f64, steps, samples, skipped })
    }
}

/// Mean siamese loss of equally shaped samples on `tape`.
fn group_loss<T: Element>(
    model: &MetricModel<T>,
    tape: &Tape<T>,
    bound: &crate::params::Bound<T>,
    group: &[&Sample],
) -> Result<vfiqa_tensor::Var<T>> {
    let n = group.len();
    let clips: Vec<&VideoClip> = group
        .iter()
        .map(|s| &s.a)
        .chain(group.iter().map(|s| &s.b))
        .chain(group.iter().map(|s| &s.reference))
        .collect();
    for s in group {
        s.a.check_same_shape(&s.reference)?;
        s.b.check_same_shape(&s.reference)?;
        if !(0.0..=1.0).contains(&s.h) {
            return Err(Error::Invalid(format!("triplet `{}`: h = {} outside [0, 1]", s.id, s.h)));
        }
    }
    let frames = tape.constant(VideoClip::stack(&clips)?);
    let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, 2 * n + i)).chain((0..n).map(|i| (n + i, 2 * n + i))).collect();
    let d = model.forward(tape, bound, &frames, &pairs)?.d;
    let h: Vec<T> = group.iter().map(|s| T::from_f64_lossy(s.h)).collect();
    siamese_loss(tape, &d, &h)
}

/// Samples split by clip shape, keeping batch order inside each group.
fn shape_groups(samples: &[Sample]) -> Vec<Vec<&Sample>> {
    let mut groups: Vec<Vec<&Sample>> = Vec::new();
    for s in samples {
        match groups.iter_mut().find(|g| g[0].reference.same_shape(&s.reference)) {
            Some(g) => g.push(s),
            None => groups.push(vec![s]),
        }
    }
    groups
}

/// Mean loss of `batch` under the current weights, without resizing or
/// updating anything.
pub fn batch_loss<T: Element>(model: &MetricModel<T>, batch: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for group in shape_groups(batch) {
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        total += group_loss(model, &tape, &bound, &group)?.item().as_f64() * group.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Trains for `config.epochs` epochs, reporting each epoch to `on_epoch`.
pub fn train<T: Element>(
    model: &mut MetricModel<T>,
    source: &dyn TripletSource,
    config: TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    if source.is_empty() {
        return Err(Error::Invalid("no training triplets".into()));
    }
    let epochs = config.epochs;
    let mut trainer = Trainer::new(model, config)?;
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let stats = trainer.epoch(source, epoch)?;
        on_epoch(&stats);
        log.push(stats);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn sample(seed: usize, h: f64) -> Sample {
        let clip = |k: usize| {
            VideoClip::from_fn(format!("c{k}"), [2, 32, 32], move |t, c, y, x| {
                (((x * 7 + y * 3 + c * 5 + t + k * 11) % 13) as f32 / 6.5 - 1.0) * 0.9
            })
            .unwrap()
        };
        Sample { id: format!("s{seed}"), a: clip(seed), b: clip(seed + 1), reference: clip(seed + 2), h }
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let mut model = MetricModel::<f32>::new(ModelConfig::with_frames(2), 1).unwrap();
        let before = model.clone();
        let data = vec![sample(0, 1.0), sample(3, 0.0), sample(6, 0.66)];
        let cfg = TrainConfig { lr: 0.0, batch: 2, epochs: 1, ..Default::default() };
        train(&mut model, &data, cfg, |_| {}).unwrap();
        for ((_, a), (_, b)) in before.params.iter().zip(model.params.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn a_step_moves_the_weights_and_consumes_grads() {
        let mut model = MetricModel::<f32>::new(ModelConfig::with_frames(2), 1).unwrap();
        let before = model.clone();
        let mut trainer = Trainer::new(&mut model, TrainConfig::default()).unwrap();
        let loss = trainer.step(&[sample(0, 1.0), sample(1, 0.0)]).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(trainer.steps_taken(), 1);
        let changed = before.params.iter().zip(model.params.iter()).filter(|((_, a), (_, b))| a.data() != b.data()).count();
        assert!(changed > model.params.len() / 2);
        assert!(model.params.iter().all(|(_, t)| t.grad().is_none()));
    }

    #[test]
    fn swapping_candidates_mirrors_the_loss() {
        let model = MetricModel::<f64>::new(ModelConfig::with_frames(2), 5).unwrap();
        let batch = [sample(0, 0.66), sample(4, 1.0)];
        let swapped: Vec<_> = batch.iter().map(Sample::swapped).collect();
        let (l1, l2) = (batch_loss(&model, &batch).unwrap(), batch_loss(&model, &swapped).unwrap());
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn unloadable_triplets_are_skipped_and_empty_epochs_fail() {
        struct Broken;
        impl TripletSource for Broken {
            fn len(&self) -> usize {
                2
            }
            fn load(&self, _: usize) -> Result<Sample> {
                Err(Error::Invalid("gone".into()))
            }
        }
        let mut model = MetricModel::<f32>::new(ModelConfig::with_frames(2), 1).unwrap();
        let mut trainer = Trainer::new(&mut model, TrainConfig::default()).unwrap();
        assert!(trainer.epoch(&Broken, 0).is_err());
    }

    #[test]
    fn mixed_sizes_in_one_batch_are_grouped() {
        let mut model = MetricModel::<f32>::new(ModelConfig::with_frames(2), 1).unwrap();
        let mut big = sample(0, 1.0);
        big.a = big.a.resized(64, 32).unwrap();
        big.b = big.b.resized(64, 32).unwrap();
        big.reference = big.reference.resized(64, 32).unwrap();
        let cfg = TrainConfig { scale_min: 1.0, ..Default::default() };
        let mut trainer = Trainer::new(&mut model, cfg).unwrap();
        assert!(trainer.step(&[big, sample(1, 0.0)]).unwrap().is_finite());
    }
}
