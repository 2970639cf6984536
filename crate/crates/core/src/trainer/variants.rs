//! Train several configurations and generate comparable songs from each.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::corpus::Dataset;
use crate::generator::{generate, resolve_seed, song_to_midi_bytes, GenConfig, SeedWindow};
use crate::midi::DEFAULT_TEMPO;
use crate::numerics::{derive_indexed_seed, derive_seed, Rng};

use super::{train, MetricsRow, TrainConfig, TrainError};

/// A named set of config overrides applied on top of the base config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantOutput {
    pub name: String,
    pub config: TrainConfig,
    pub checkpoint: PathBuf,
    pub songs: Vec<PathBuf>,
    pub metrics: Vec<MetricsRow>,
    pub guard_saturations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantsOutcome {
    pub seed_window: SeedWindow,
    /// Sampling seed of song `i`, shared by every variant.
    pub song_seeds: Vec<u64>,
    pub variants: Vec<VariantOutput>,
    pub manifest: PathBuf,
}

pub const VARIANTS_MANIFEST: &str = "variants.tsv";

pub fn song_file_name(index: usize) -> String {
    format!("out_{index:03}.mid")
}

fn check_name(name: &str) -> Result<(), TrainError> {
    let ok = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(TrainError::Config(format!("variant name {name:?} must be non-empty [A-Za-z0-9_-]")))
    }
}

/// Trains every variant on `dataset` and generates `n_songs` songs from each.
///
/// One seed window is chosen from `gen.seed_source` with a sub-seed of
/// `gen.seed` and shared by all songs of all variants; song `i` of every
/// variant uses the same sampling seed. Each variant writes into
/// `out_dir/<name>/`, and a tab-separated manifest lists every file.
pub fn run_variants(
    base: &TrainConfig,
    variants: &[Variant],
    dataset: &Dataset,
    gen: &GenConfig,
    n_songs: usize,
    out_dir: &Path,
) -> Result<VariantsOutcome, TrainError> {
    if variants.is_empty() {
        return Err(TrainError::Config("no variants given".into()));
    }
    for (i, v) in variants.iter().enumerate() {
        check_name(&v.name)?;
        if variants[..i].iter().any(|w| w.name == v.name) {
            return Err(TrainError::Config(format!("duplicate variant name {:?}", v.name)));
        }
    }
    let configs = variants
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.apply(&v.overrides)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>, TrainError>>()?;

    let seed_window = resolve_seed(Some(dataset), &gen.seed_source, &mut Rng::new(derive_seed(gen.seed, "seed-window")))?;
    let sampling = derive_seed(gen.seed, "sampling");
    let song_seeds: Vec<u64> = (0..n_songs as u64).map(|i| derive_indexed_seed(sampling, &[i])).collect();

    let mut outputs = Vec::new();
    let mut manifest = String::from("variant\tkind\tfile\n");
    for (v, config) in variants.iter().zip(configs) {
        let dir = out_dir.join(&v.name);
        let outcome = train(dataset, &config, Some(&dir))?;
        let checkpoint = dir.join(super::FINAL_CHECKPOINT);
        let _ = writeln!(manifest, "{}\tcheckpoint\t{}/{}", v.name, v.name, super::FINAL_CHECKPOINT);
        let mut songs = Vec::new();
        let mut guard_saturations = 0;
        for (i, &seed) in song_seeds.iter().enumerate() {
            let g = GenConfig { seed, ..gen.clone() };
            let out = generate(&outcome.params, &dataset.note_vocab, &dataset.dur_vocab, &seed_window, &g)?;
            guard_saturations += out.guard_saturations;
            let path = dir.join(song_file_name(i));
            std::fs::write(&path, song_to_midi_bytes(&out.tokens, config.grid, DEFAULT_TEMPO)?)?;
            let _ = writeln!(manifest, "{}\tsong\t{}/{}", v.name, v.name, song_file_name(i));
            songs.push(path);
        }
        outputs.push(VariantOutput {
            name: v.name.clone(),
            config,
            checkpoint,
            songs,
            metrics: outcome.metrics,
            guard_saturations,
        });
    }
    let manifest_path = out_dir.join(VARIANTS_MANIFEST);
    std::fs::write(&manifest_path, manifest)?;
    Ok(VariantsOutcome { seed_window, song_seeds, variants: outputs, manifest: manifest_path })
}
