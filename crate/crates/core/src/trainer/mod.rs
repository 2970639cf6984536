//! Mini-batch training, evaluation, checkpoints and metrics.

mod checkpoint;
mod config;
mod variants;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{Dataset, WindowRef};
use crate::lstm::{model_backward_into, model_forward, Gradients, Mode, ModelError, ModelParams, Weights};
use crate::numerics::{self, adam_step, argmax, derive_indexed_seed, derive_seed, sgd_step, AdamState, Rng};

pub use checkpoint::{Checkpoint, CheckpointError, MAGIC, VERSION};
pub use config::{parse_config_text, OptimizerKind, TrainConfig, CONFIG_KEYS};
pub use variants::{run_variants, song_file_name, Variant, VariantOutput, VariantsOutcome, VARIANTS_MANIFEST};

pub const METRICS_HEADER: &str = "epoch,loss,note_acc,dur_acc,note_ppl";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no training windows")]
    EmptyDataset,
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Generate(#[from] crate::generator::GenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Mean `CE_note + CE_dur` per window.
    pub loss: f64,
    pub note_acc: f64,
    pub dur_acc: f64,
    /// `exp` of the mean note cross-entropy.
    pub note_ppl: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.loss, self.note_acc, self.dur_acc, self.note_ppl)
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    windows: usize,
    loss: f64,
    note_ce: f64,
    note_hits: usize,
    dur_hits: usize,
}

impl Tally {
    fn add(&mut self, s: &WindowStats) {
        self.windows += 1;
        self.loss += s.loss;
        self.note_ce += s.note_ce;
        self.note_hits += usize::from(s.note_hit);
        self.dur_hits += usize::from(s.dur_hit);
    }

    fn row(&self, epoch: usize) -> MetricsRow {
        let n = self.windows.max(1) as f64;
        MetricsRow {
            epoch,
            loss: self.loss / n,
            note_acc: self.note_hits as f64 / n,
            dur_acc: self.dur_hits as f64 / n,
            note_ppl: (self.note_ce / n).exp(),
        }
    }
}

struct WindowStats {
    loss: f64,
    note_ce: f64,
    note_hit: bool,
    dur_hit: bool,
}

fn window_pass(
    params: &ModelParams,
    dataset: &Dataset,
    r: WindowRef,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(WindowStats, Option<Gradients>), ModelError> {
    let w = dataset.window(r);
    let out = model_forward(params, w.notes, w.durations, mode, rng)?;
    let note_ce = numerics::cross_entropy(&out.note_probs, w.target_note)?;
    let dur_ce = numerics::cross_entropy(&out.dur_probs, w.target_duration)?;
    let stats = WindowStats {
        loss: note_ce + dur_ce,
        note_ce,
        note_hit: argmax(out.note_probs.as_slice()) == w.target_note,
        dur_hit: argmax(out.dur_probs.as_slice()) == w.target_duration,
    };
    let grads = match out.cache {
        Some(cache) => {
            let mut g = params.weights().zeros_like();
            model_backward_into(params, &cache, w.target_note, w.target_duration, &mut g)?;
            Some(g)
        }
        None => None,
    };
    Ok((stats, grads))
}

fn check_dataset(params: &ModelParams, dataset: &Dataset) -> Result<(), TrainError> {
    let c = params.config();
    if c.note_vocab_size != dataset.note_vocab.len() || c.dur_vocab_size != dataset.dur_vocab.len() {
        return Err(TrainError::VocabMismatch(format!(
            "model vocabularies {}/{}, dataset {}/{}",
            c.note_vocab_size,
            c.dur_vocab_size,
            dataset.note_vocab.len(),
            dataset.dur_vocab.len()
        )));
    }
    if c.window_len != dataset.window_len {
        return Err(TrainError::VocabMismatch(format!(
            "model window length {}, dataset {}",
            c.window_len, dataset.window_len
        )));
    }
    Ok(())
}

/// Teacher-forced metrics over `windows` in infer mode.
pub fn evaluate_windows(params: &ModelParams, dataset: &Dataset, windows: &[WindowRef]) -> Result<MetricsRow, TrainError> {
    check_dataset(params, dataset)?;
    let stats = windows
        .par_iter()
        .map(|&r| window_pass(params, dataset, r, Mode::Infer, &mut Rng::new(0)).map(|(s, _)| s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut tally = Tally::default();
    stats.iter().for_each(|s| tally.add(s));
    Ok(tally.row(0))
}

/// Teacher-forced metrics over every window of `dataset`.
pub fn evaluate(params: &ModelParams, dataset: &Dataset) -> Result<MetricsRow, TrainError> {
    evaluate_windows(params, dataset, &dataset.windows().windows)
}

/// Splits windows into training and held-out sets: the last
/// `floor(holdout * n)` windows of each song are held out.
pub fn split_windows(dataset: &Dataset, holdout: f64) -> (Vec<WindowRef>, Vec<WindowRef>) {
    let all = dataset.windows().windows;
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for song in 0..dataset.songs.len() {
        let mine: Vec<_> = all.iter().copied().filter(|w| w.song == song).collect();
        let h = (mine.len() as f64 * holdout).floor() as usize;
        let cut = mine.len() - h;
        train.extend_from_slice(&mine[..cut]);
        held.extend_from_slice(&mine[cut..]);
    }
    (train, held)
}

/// Parameter update rule with its per-matrix state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    adam: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weights: &Weights) -> Self {
        let adam = match kind {
            OptimizerKind::Adam => weights.matrices().into_iter().map(AdamState::for_param).collect(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Optimizer { kind, lr, adam }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<(), ModelError> {
        let lr = self.lr;
        let grads = grads.matrices();
        let mut mats = params.weights_mut().matrices_mut();
        if mats.len() != grads.len() {
            return Err(ModelError::ShapeMismatch("gradient does not match parameters".into()));
        }
        for (i, (p, g)) in mats.iter_mut().zip(grads).enumerate() {
            match self.kind {
                OptimizerKind::Adam => adam_step(p, g, &mut self.adam[i], lr)?,
                OptimizerKind::Sgd => sgd_step(p, g, lr)?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<MetricsRow>,
    /// One row per epoch when a holdout fraction is set.
    pub holdout_metrics: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Checkpoint,
    pub skipped_songs: usize,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// [`train_with`] without a progress callback.
pub fn train(dataset: &Dataset, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    train_with(dataset, config, out_dir, |_| {})
}

/// Trains a fresh model on `dataset`.
///
/// Each epoch shuffles the training windows with a seed derived from
/// `config.seed` and the epoch, then walks them in batches. Windows in a batch
/// run forward and backward in parallel, but their gradients are summed in
/// ascending batch position, so results do not depend on the thread count.
/// The summed gradient is divided by the batch size, clipped to
/// `config.clip_norm` and handed to the optimizer.
///
/// With `out_dir` set, checkpoints are written every `checkpoint_every`
/// epochs and as `final.ckpt`. `on_epoch` sees each training row.
pub fn train_with(
    dataset: &Dataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if config.window_len != dataset.window_len {
        return Err(TrainError::VocabMismatch(format!(
            "config window length {}, dataset {}",
            config.window_len, dataset.window_len
        )));
    }
    let window_set = dataset.windows();
    let (train_windows, held_windows) = split_windows(dataset, config.holdout);
    if train_windows.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let model = config.model_config(dataset.note_vocab.len(), dataset.dur_vocab.len());
    let mut params = ModelParams::init(&model, &mut Rng::new(derive_seed(config.seed, "init")))?;
    let mut optimizer = Optimizer::new(config.optimizer, config.lr, params.weights());
    let shuffle_seed = derive_seed(config.seed, "shuffle");
    let dropout_seed = derive_seed(config.seed, "dropout");
    let batch_size = config.batch_size.min(train_windows.len());
    let group = rayon::current_num_threads().max(1);

    let mut metrics = Vec::with_capacity(config.epochs);
    let mut holdout_metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut order = train_windows;
    let mut final_checkpoint = None;

    for epoch in 1..=config.epochs {
        order.sort_unstable_by_key(|w| (w.song, w.offset));
        Rng::new(derive_indexed_seed(shuffle_seed, &[epoch as u64])).shuffle(&mut order);
        let mut tally = Tally::default();
        for (b, batch) in order.chunks(batch_size).enumerate() {
            let mut acc = params.weights().zeros_like();
            for (g, chunk) in batch.chunks(group).enumerate() {
                let results = chunk
                    .par_iter()
                    .enumerate()
                    .map(|(i, &r)| {
                        let index = (g * group + i) as u64;
                        let mut rng = Rng::new(derive_indexed_seed(dropout_seed, &[epoch as u64, b as u64, index]));
                        window_pass(&params, dataset, r, Mode::Train, &mut rng)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                for (stats, grads) in results {
                    tally.add(&stats);
                    acc.add_assign(&grads.expect("train mode yields gradients"))?;
                }
            }
            acc.scale(1.0 / batch.len() as f64);
            acc.clip_global_norm(config.clip_norm);
            optimizer.step(&mut params, &acc)?;
        }
        let row = tally.row(epoch);
        on_epoch(&row);
        metrics.push(row);
        if !held_windows.is_empty() {
            let mut h = evaluate_windows(&params, dataset, &held_windows)?;
            h.epoch = epoch;
            holdout_metrics.push(h);
        }

        let is_final = epoch == config.epochs;
        if epoch % config.checkpoint_every == 0 || is_final {
            let ckpt = Checkpoint {
                config: config.clone(),
                note_vocab: dataset.note_vocab.clone(),
                dur_vocab: dataset.dur_vocab.clone(),
                params: params.clone(),
                epoch: epoch as u32,
                final_loss: row.loss,
            };
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(dir)?;
                if epoch % config.checkpoint_every == 0 {
                    let path = dir.join(checkpoint_name(epoch));
                    ckpt.save(&path)?;
                    checkpoints.push(path);
                }
                if is_final {
                    let path = dir.join(FINAL_CHECKPOINT);
                    ckpt.save(&path)?;
                    checkpoints.push(path);
                }
            }
            if is_final {
                final_checkpoint = Some(ckpt);
            }
        }
    }
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
        if !holdout_metrics.is_empty() {
            std::fs::write(dir.join("holdout_metrics.csv"), metrics_csv(&holdout_metrics))?;
        }
    }
    Ok(TrainOutcome {
        params,
        metrics,
        holdout_metrics,
        checkpoints,
        final_checkpoint: final_checkpoint.expect("epochs is positive"),
        skipped_songs: window_set.skipped_songs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthetic_song, Song};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            lr: 1e-2,
            epochs: 2,
            hidden: vec![8, 8],
            dropout: 0.2,
            window_len: 6,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset() -> Dataset {
        let songs = [synthetic_song(30, 6, 1), synthetic_song(20, 6, 2), synthetic_song(4, 6, 3)];
        Dataset::from_songs(&songs, 6).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let ds = tiny_dataset();
        for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let config = TrainConfig { lr: 0.0, epochs: 1, dropout: 0.0, optimizer, ..tiny_config() };
            let model = config.model_config(ds.note_vocab.len(), ds.dur_vocab.len());
            let initial = ModelParams::init(&model, &mut Rng::new(derive_seed(config.seed, "init"))).unwrap();
            let before = evaluate(&initial, &ds).unwrap();
            let out = train(&ds, &config, None).unwrap();
            assert_eq!(out.params.weights(), initial.weights());
            assert!((out.metrics[0].loss - before.loss).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_runs_give_identical_checkpoints() {
        let ds = tiny_dataset();
        let a = train(&ds, &tiny_config(), None).unwrap().final_checkpoint.to_bytes();
        let b = train(&ds, &tiny_config(), None).unwrap().final_checkpoint.to_bytes();
        assert_eq!(a, b);
        let other = TrainConfig { seed: 12, ..tiny_config() };
        assert_ne!(a, train(&ds, &other, None).unwrap().final_checkpoint.to_bytes());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let ds = tiny_dataset();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| train(&ds, &tiny_config(), None).unwrap().final_checkpoint.to_bytes())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let ds = tiny_dataset();
        let ckpt = train(&ds, &tiny_config(), None).unwrap().final_checkpoint;
        let bytes = ckpt.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.params.weights(), ckpt.params.weights());
        assert_eq!((&back.config, &back.note_vocab, &back.dur_vocab), (&ckpt.config, &ckpt.note_vocab, &ckpt.dur_vocab));
        assert_eq!((back.epoch, back.final_loss.to_bits()), (ckpt.epoch, ckpt.final_loss.to_bits()));
        assert_eq!(back.to_bytes(), bytes);

        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated)));
        assert!(matches!(Checkpoint::from_bytes(b"MThd"), Err(CheckpointError::BadMagic)));
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(CheckpointError::UnsupportedVersion(9))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn writes_checkpoints_on_cadence_and_metrics_csv() {
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig { epochs: 5, checkpoint_every: 2, ..tiny_config() };
        let out = train(&tiny_dataset(), &config, Some(dir.path())).unwrap();
        let names: Vec<_> = out.checkpoints.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_owned()).collect();
        assert_eq!(names, ["epoch_0002.ckpt", "epoch_0004.ckpt", "final.ckpt"]);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 6);
        assert!(lines[5].starts_with("5,"));
        let last = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
        assert_eq!(last.epoch, 5);
        assert_eq!(last.final_loss, out.metrics[4].loss);
    }

    #[test]
    fn metrics_stay_in_range() {
        let out = train(&tiny_dataset(), &tiny_config(), None).unwrap();
        for r in &out.metrics {
            assert!((0.0..=1.0).contains(&r.note_acc) && (0.0..=1.0).contains(&r.dur_acc));
            assert!(r.note_ppl >= 1.0 && r.loss >= 0.0);
        }
    }

    #[test]
    fn untrained_perplexity_is_near_vocabulary_size() {
        let ds = Dataset::from_songs(&[synthetic_song(120, 24, 5)], 10).unwrap();
        let model = TrainConfig { hidden: vec![32, 32], window_len: 10, ..TrainConfig::default() }
            .model_config(ds.note_vocab.len(), ds.dur_vocab.len());
        let params = ModelParams::init(&model, &mut Rng::new(3)).unwrap();
        let row = evaluate(&params, &ds).unwrap();
        let n = ds.note_vocab.len() as f64;
        assert!((row.note_ppl - n).abs() < 0.2 * n, "ppl {} for vocab {n}", row.note_ppl);
        assert_eq!(evaluate(&params, &ds).unwrap(), row);
    }

    #[test]
    fn single_window_accuracy_is_zero_or_one() {
        let ds = Dataset::from_songs(&[synthetic_song(7, 5, 9)], 6).unwrap();
        assert_eq!(ds.windows().windows.len(), 1);
        let params = ModelParams::init(&tiny_config().model_config(ds.note_vocab.len(), ds.dur_vocab.len()), &mut Rng::new(1)).unwrap();
        let row = evaluate(&params, &ds).unwrap();
        assert!(row.note_acc == 0.0 || row.note_acc == 1.0);
        assert!(row.dur_acc == 0.0 || row.dur_acc == 1.0);
    }

    #[test]
    fn rejects_empty_and_mismatched_data() {
        let short = Dataset::from_songs(&[synthetic_song(6, 3, 1)], 6).unwrap();
        assert!(matches!(train(&short, &tiny_config(), None), Err(TrainError::EmptyDataset)));
        let ds = tiny_dataset();
        let config = TrainConfig { window_len: 5, ..tiny_config() };
        assert!(matches!(train(&ds, &config, None), Err(TrainError::VocabMismatch(_))));
        let model = tiny_config().model_config(ds.note_vocab.len() + 1, ds.dur_vocab.len());
        let params = ModelParams::init(&model, &mut Rng::new(1)).unwrap();
        assert!(matches!(evaluate(&params, &ds), Err(TrainError::VocabMismatch(_))));
    }

    #[test]
    fn holdout_takes_trailing_windows_per_song() {
        let ds = tiny_dataset();
        let (train_w, held) = split_windows(&ds, 0.25);
        // 24 and 14 windows: 6 and 3 held out.
        assert_eq!((train_w.len(), held.len()), (29, 9));
        assert!(held.iter().filter(|w| w.song == 0).all(|w| w.offset >= 18));
        let config = TrainConfig { holdout: 0.25, ..tiny_config() };
        let out = train(&ds, &config, None).unwrap();
        assert_eq!(out.holdout_metrics.len(), config.epochs);
        assert_eq!(out.skipped_songs, 1);
    }

    fn overfit_song() -> Song {
        let phrases = synthetic_song(32, 10, 21);
        let mut s = Song::default();
        for p in [0usize, 1, 0, 2, 0, 3, 1, 2] {
            s.notes.extend_from_slice(&phrases.notes[p * 8..p * 8 + 8]);
            s.durations.extend_from_slice(&phrases.durations[p * 8..p * 8 + 8]);
        }
        s
    }

    #[test]
    fn early_training_loss_mostly_decreases() {
        let ds = Dataset::from_songs(&[overfit_song()], 16).unwrap();
        let config = TrainConfig { hidden: vec![32], batch_size: 8, epochs: 6, window_len: 16, ..TrainConfig::default() };
        let out = train(&ds, &config, None).unwrap();
        let losses: Vec<f64> = out.metrics.iter().map(|m| m.loss).collect();
        let drops = losses.windows(2).take(5).filter(|w| w[1] <= w[0]).count();
        assert!(drops >= 4, "{losses:?}");
    }

    #[test]
    fn small_model_memorizes_a_short_song() {
        let ds = Dataset::from_songs(&[overfit_song()], 16).unwrap();
        let config = TrainConfig { hidden: vec![32], batch_size: 8, epochs: 150, window_len: 16, lr: 3e-3, ..TrainConfig::default() };
        let out = train(&ds, &config, None).unwrap();
        let row = evaluate(&out.params, &ds).unwrap();
        assert!(row.note_acc >= 0.95 && row.dur_acc >= 0.95, "{row:?}");
    }
}
