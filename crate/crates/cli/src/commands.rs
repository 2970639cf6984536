use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use melody_lstm::corpus::{song_to_line, tokenize, CorpusFile, Dataset};
use melody_lstm::generator::{generate, resolve_seed, song_to_midi_bytes, GenConfig, SampleMode, SeedSource, SeedWindow};
use melody_lstm::lstm::{grad_check, ModelConfig};
use melody_lstm::midi::{parse_midi, write_midi, DEFAULT_TEMPO};
use melody_lstm::numerics::{derive_indexed_seed, derive_seed, Rng};
use melody_lstm::score::events_to_piece;
use melody_lstm::trainer::{
    evaluate, metrics_csv, parse_config_text, run_variants, song_file_name, train_with, Checkpoint, TrainConfig,
    TrainError, Variant, METRICS_HEADER, VARIANTS_MANIFEST,
};

use crate::args::*;
use crate::manifest::RunManifest;

/// Bad command-line input discovered after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn load_corpus(path: &Path, manifest: &mut RunManifest) -> Result<CorpusFile> {
    let bytes = read(path)?;
    manifest.input(path, &bytes);
    let text = String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", path.display()))?;
    CorpusFile::parse(&text).with_context(|| format!("bad corpus {}", path.display()))
}

fn load_checkpoint(path: &Path, manifest: &mut RunManifest) -> Result<Checkpoint> {
    let bytes = read(path)?;
    manifest.input(path, &bytes);
    Checkpoint::from_bytes(&bytes).with_context(|| format!("bad checkpoint {}", path.display()))
}

/// Defaults, then the config file, then flags. Returns the keys that were set
/// explicitly.
fn resolve_config(
    shared: &Shared,
    flags: &TrainFlags,
    manifest: &mut RunManifest,
) -> Result<(TrainConfig, BTreeSet<String>)> {
    let mut pairs = Vec::new();
    if let Some(path) = &shared.config {
        let bytes = read(path)?;
        manifest.input(path, &bytes);
        let text = String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", path.display()))?;
        pairs = parse_config_text(&text)?;
    }
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    push("epochs", flags.epochs.map(|v| v.to_string()));
    push("batch_size", flags.batch_size.map(|v| v.to_string()));
    push("lr", flags.lr.map(|v| format!("{v:?}")));
    push("optimizer", flags.optimizer.map(|o| format!("{o:?}").to_lowercase()));
    push("hidden", flags.hidden.clone());
    push("dropout", flags.dropout.map(|v| format!("{v:?}")));
    push("clip_norm", flags.clip_norm.map(|v| format!("{v:?}")));
    push("checkpoint_every", flags.checkpoint_every.map(|v| v.to_string()));
    push("holdout", flags.holdout.map(|v| format!("{v:?}")));
    push("seed", shared.seed.map(|v| v.to_string()));
    let mut config = TrainConfig::default();
    config.apply(&pairs)?;
    Ok((config, pairs.into_iter().map(|(k, _)| k).collect()))
}

/// Adopts the corpus header's grid, window length and duration cap unless the
/// config set them, in which case they must agree.
fn reconcile(config: &mut TrainConfig, explicit: &BTreeSet<String>, corpus: &CorpusFile) -> Result<()> {
    let checks = [
        ("grid", config.grid as u64, corpus.grid as u64),
        ("window_len", config.window_len as u64, corpus.window_len as u64),
        ("max_dur", config.max_dur as u64, corpus.max_dur as u64),
    ];
    for (key, mine, theirs) in checks {
        if explicit.contains(key) && mine != theirs {
            return Err(TrainError::VocabMismatch(format!("config {key} = {mine}, corpus header has {theirs}")).into());
        }
    }
    config.grid = corpus.grid;
    config.window_len = corpus.window_len;
    config.max_dur = corpus.max_dur;
    config.validate()?;
    Ok(())
}

fn dataset_for(checkpoint: &Checkpoint, corpus: &CorpusFile) -> Result<Dataset> {
    Dataset::with_vocab(
        &corpus.songs,
        checkpoint.config.window_len,
        checkpoint.note_vocab.clone(),
        checkpoint.dur_vocab.clone(),
    )
    .map_err(|e| TrainError::VocabMismatch(format!("corpus does not fit the checkpoint vocabulary: {e}")).into())
}

fn is_midi(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
}

pub fn ingest(a: &IngestArgs) -> Result<bool> {
    let mut manifest = RunManifest::new("ingest");
    let (mut config, _) = resolve_config(&a.shared, &TrainFlags::default(), &mut manifest)?;
    if let Some(g) = a.grid {
        config.grid = g;
    }
    if let Some(l) = a.window_len {
        config.window_len = l;
    }
    if let Some(m) = a.max_dur {
        config.max_dur = m;
    }
    config.validate()?;

    let mut files: Vec<PathBuf> = std::fs::read_dir(&a.midi_dir)
        .with_context(|| format!("cannot list {}", a.midi_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_midi(p))
        .collect();
    files.sort();

    let mut songs = Vec::new();
    let mut skipped = 0;
    for path in &files {
        let bytes = read(path)?;
        manifest.input(path, &bytes);
        let extracted = parse_midi(&bytes)
            .map_err(anyhow::Error::from)
            .and_then(|f| events_to_piece(&f, config.grid).map_err(anyhow::Error::from));
        match extracted {
            Ok(x) => {
                if x.dangling_notes > 0 {
                    eprintln!("warning: {}: {} unterminated notes dropped", path.display(), x.dangling_notes);
                }
                songs.push(tokenize(&x.piece, config.max_dur));
            }
            Err(e) => {
                skipped += 1;
                eprintln!("warning: skipping {}: {e}", path.display());
            }
        }
    }
    if songs.is_empty() {
        bail!("no usable MIDI files in {}", a.midi_dir.display());
    }

    let corpus = CorpusFile { grid: config.grid, window_len: config.window_len, max_dur: config.max_dur, songs };
    let ds = Dataset::from_corpus(&corpus)?;
    let windows = ds.windows();
    create_out(&a.shared.out)?;
    std::fs::write(a.shared.out.join("corpus.txt"), corpus.to_text())?;
    println!("songs: {} ({} files skipped)", corpus.songs.len(), skipped);
    println!("tokens: {}", ds.token_count());
    println!("note vocabulary: {}", ds.note_vocab.len());
    println!("duration vocabulary: {}", ds.dur_vocab.len());
    println!("training windows: {} ({} songs too short)", windows.windows.len(), windows.skipped_songs);

    manifest.config([("grid", config.grid as u64), ("window_len", config.window_len as u64), ("max_dur", config.max_dur as u64)]);
    manifest.outputs.push("corpus.txt".into());
    manifest.details = Some(json!({
        "songs": corpus.songs.len(),
        "skipped_files": skipped,
        "tokens": ds.token_count(),
        "note_vocab": ds.note_vocab.len(),
        "dur_vocab": ds.dur_vocab.len(),
    }));
    manifest.write(&a.shared.out)?;
    Ok(true)
}

fn train_seeds(manifest: &mut RunManifest, root: u64) {
    manifest.seeds.insert("root".into(), root);
    for name in ["init", "shuffle", "dropout"] {
        manifest.seeds.insert(name.into(), derive_seed(root, name));
    }
}

pub fn train(a: &TrainArgs) -> Result<bool> {
    let mut manifest = RunManifest::new("train");
    let corpus = load_corpus(&a.corpus, &mut manifest)?;
    let (mut config, explicit) = resolve_config(&a.shared, &a.flags, &mut manifest)?;
    reconcile(&mut config, &explicit, &corpus)?;
    let ds = Dataset::from_corpus(&corpus)?;
    create_out(&a.shared.out)?;
    let outcome = train_with(&ds, &config, Some(&a.shared.out), |row| {
        eprintln!("epoch {:>4}  loss {:.4}  note acc {:.3}  dur acc {:.3}  ppl {:.2}", row.epoch, row.loss, row.note_acc, row.dur_acc, row.note_ppl);
    })?;

    manifest.config(config.to_pairs());
    manifest.outputs = outcome
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    manifest.outputs.push("metrics.csv".into());
    if !outcome.holdout_metrics.is_empty() {
        manifest.outputs.push("holdout_metrics.csv".into());
    }
    train_seeds(&mut manifest, config.seed);
    manifest.details = Some(json!({ "final_loss": outcome.final_checkpoint.final_loss }));
    manifest.write(&a.shared.out)?;
    Ok(true)
}

fn gen_config(flags: &GenFlags) -> Result<GenConfig> {
    let seed_source = match (flags.seed_song, flags.seed_offset) {
        (Some(song), Some(offset)) => SeedSource::Offset { song, offset },
        _ => SeedSource::RandomWindow,
    };
    let config = GenConfig {
        length: flags.length,
        seed_source,
        temperature: flags.temperature,
        mode: match flags.mode {
            ModeArg::Argmax => SampleMode::Argmax,
            ModeArg::Sample => SampleMode::Sample,
        },
        repeat_cap: flags.repeat_cap,
        seed: 0,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

fn gen_pairs(config: &GenConfig, count: usize) -> Vec<(String, String)> {
    let source = match &config.seed_source {
        SeedSource::RandomWindow => "random".to_string(),
        SeedSource::Offset { song, offset } => format!("song {song} offset {offset}"),
        SeedSource::Tokens(_) => "tokens".to_string(),
    };
    [
        ("gen.count", count.to_string()),
        ("gen.length", config.length.to_string()),
        ("gen.temperature", format!("{:?}", config.temperature)),
        ("gen.mode", config.mode.as_str().to_string()),
        ("gen.repeat_cap", config.repeat_cap.to_string()),
        ("gen.seed_source", source),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn seed_json(seed: &SeedWindow) -> serde_json::Value {
    json!({ "song": seed.song, "offset": seed.offset, "tokens": song_to_line(&seed.tokens) })
}

pub fn generate_cmd(a: &GenerateArgs) -> Result<bool> {
    let mut manifest = RunManifest::new("generate");
    let ckpt = load_checkpoint(&a.checkpoint, &mut manifest)?;
    let mut config = gen_config(&a.gen)?;
    let count = a.gen.count.unwrap_or(1);
    let dataset = match &a.corpus {
        Some(path) => Some(dataset_for(&ckpt, &load_corpus(path, &mut manifest)?)?),
        None => None,
    };
    if let Some(path) = &a.gen.tokens {
        let bytes = read(path)?;
        manifest.input(path, &bytes);
        let text = String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", path.display()))?;
        let line = text.lines().find(|l| !l.trim().is_empty() && !l.starts_with('#')).unwrap_or("");
        let song = melody_lstm::corpus::song_from_line(line, ckpt.config.max_dur)
            .map_err(|e| anyhow::anyhow!("bad seed tokens in {}: {e}", path.display()))?;
        config.seed_source = SeedSource::Tokens(song);
    } else if dataset.is_none() {
        return Err(usage("a seed window needs --corpus or --tokens"));
    }

    let root = a.shared.seed.unwrap_or(0);
    let window_seed = derive_seed(root, "seed-window");
    let sampling = derive_seed(root, "sampling");
    let seed = resolve_seed(dataset.as_ref(), &config.seed_source, &mut Rng::new(window_seed))?;

    create_out(&a.shared.out)?;
    let mut song_seeds = Vec::new();
    for i in 0..count {
        let g = GenConfig { seed: derive_indexed_seed(sampling, &[i as u64]), ..config.clone() };
        song_seeds.push(g.seed);
        let out = generate(&ckpt.params, &ckpt.note_vocab, &ckpt.dur_vocab, &seed, &g)?;
        if out.guard_saturations > 0 {
            eprintln!("warning: song {i}: repetition guard saturated {} times", out.guard_saturations);
        }
        let name = song_file_name(i);
        std::fs::write(a.shared.out.join(&name), song_to_midi_bytes(&out.tokens, ckpt.config.grid, DEFAULT_TEMPO)?)?;
        manifest.outputs.push(name.clone());
        if a.gen.emit_tokens {
            let txt = name.replace(".mid", ".txt");
            std::fs::write(a.shared.out.join(&txt), song_to_line(&out.tokens) + "\n")?;
            manifest.outputs.push(txt);
        }
        println!("{name}: {} events", out.tokens.len());
    }

    manifest.config(ckpt.config.to_pairs().into_iter().map(|(k, v)| (format!("train.{k}"), v)));
    manifest.config(gen_pairs(&config, count));
    manifest.seeds.insert("root".into(), root);
    manifest.seeds.insert("seed-window".into(), window_seed);
    manifest.seeds.insert("sampling".into(), sampling);
    manifest.details = Some(json!({ "seed_window": seed_json(&seed), "song_seeds": song_seeds }));
    manifest.write(&a.shared.out)?;
    Ok(true)
}

pub fn eval(a: &EvalArgs) -> Result<bool> {
    let mut manifest = RunManifest::new("eval");
    let ckpt = load_checkpoint(&a.checkpoint, &mut manifest)?;
    let ds = dataset_for(&ckpt, &load_corpus(&a.corpus, &mut manifest)?)?;
    let mut row = evaluate(&ckpt.params, &ds)?;
    row.epoch = ckpt.epoch as usize;
    println!("{METRICS_HEADER}\n{}", row.csv_line());
    create_out(&a.shared.out)?;
    std::fs::write(a.shared.out.join("eval.csv"), metrics_csv(&[row]))?;
    manifest.config(ckpt.config.to_pairs());
    manifest.outputs.push("eval.csv".into());
    manifest.write(&a.shared.out)?;
    Ok(true)
}

/// Parses `name: key=value, key=value`.
pub fn parse_variant(spec: &str) -> Result<Variant> {
    let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let mut overrides = Vec::new();
    for item in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item.split_once('=').ok_or_else(|| usage(format!("variant {spec:?}: expected key=value, got {item:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(Variant { name: name.trim().to_string(), overrides })
}

pub fn variants(a: &VariantsArgs) -> Result<bool> {
    let mut manifest = RunManifest::new("variants");
    let corpus = load_corpus(&a.corpus, &mut manifest)?;
    let (mut base, explicit) = resolve_config(&a.shared, &a.flags, &mut manifest)?;
    reconcile(&mut base, &explicit, &corpus)?;
    let mut specs = a.variants.clone();
    if let Some(path) = &a.variants_file {
        let bytes = read(path)?;
        manifest.input(path, &bytes);
        let text = String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", path.display()))?;
        specs.extend(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from));
    }
    if specs.is_empty() {
        return Err(usage("give at least one --variant or a --variants-file"));
    }
    let list = specs.iter().map(|s| parse_variant(s)).collect::<Result<Vec<_>>>()?;
    for v in &list {
        for (k, _) in &v.overrides {
            if ["grid", "window_len", "max_dur"].contains(&k.as_str()) {
                return Err(usage(format!("variant {}: {k} is fixed by the corpus", v.name)));
            }
        }
    }

    let mut gen = gen_config(&a.gen)?;
    gen.seed = a.shared.seed.unwrap_or(0);
    let count = a.gen.count.unwrap_or(5);
    let ds = Dataset::from_corpus(&corpus)?;
    create_out(&a.shared.out)?;
    let outcome = run_variants(&base, &list, &ds, &gen, count, &a.shared.out)?;

    let rel = |p: &Path| p.strip_prefix(&a.shared.out).unwrap_or(p).display().to_string();
    let mut details = Vec::new();
    for v in &outcome.variants {
        let mut files = vec![rel(&v.checkpoint)];
        files.extend(v.songs.iter().map(|p| rel(p)));
        manifest.outputs.extend(files);
        manifest.outputs.push(format!("{}/metrics.csv", v.name));
        details.push(json!({
            "name": v.name,
            "config": v.config.to_pairs().into_iter().collect::<std::collections::BTreeMap<_, _>>(),
            "checkpoint": rel(&v.checkpoint),
            "songs": v.songs.iter().map(|p| rel(p)).collect::<Vec<_>>(),
            "seed_window": seed_json(&outcome.seed_window),
            "final_loss": v.metrics.last().map(|m| m.loss),
        }));
    }
    manifest.outputs.push(VARIANTS_MANIFEST.into());
    manifest.config(base.to_pairs());
    manifest.config(gen_pairs(&gen, count));
    train_seeds(&mut manifest, base.seed);
    manifest.seeds.insert("gen-root".into(), gen.seed);
    manifest.seeds.insert("seed-window".into(), derive_seed(gen.seed, "seed-window"));
    manifest.seeds.insert("sampling".into(), derive_seed(gen.seed, "sampling"));
    manifest.details = Some(json!({
        "seed_window": seed_json(&outcome.seed_window),
        "song_seeds": outcome.song_seeds,
        "variants": details,
    }));
    manifest.write(&a.shared.out)?;
    println!("{} variants, {} songs each, written to {}", outcome.variants.len(), count, a.shared.out.display());
    Ok(true)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let seed = a.shared.seed.unwrap_or(0);
    let report = grad_check(&ModelConfig::small_reference(), &mut Rng::new(seed), a.tolerance)?;
    println!("{report}");
    println!("{}", if report.passed { "PASS" } else { "FAIL" });
    Ok(report.passed)
}

pub fn roundtrip(a: &RoundtripArgs) -> Result<bool> {
    let mut failures = 0;
    let mut errors = 0;
    for path in &a.files {
        let outcome = read(path).and_then(|bytes| {
            let first = parse_midi(&bytes)?;
            let written = write_midi(&first)?;
            let second = parse_midi(&written)?;
            let rewritten = write_midi(&second)?;
            Ok((first == second, written == rewritten, first.tracks.iter().map(|t| t.events.len()).sum::<usize>()))
        });
        match outcome {
            Ok((true, true, events)) => println!("ok    {} ({events} events)", path.display()),
            Ok((same_events, same_bytes, _)) => {
                failures += 1;
                println!("FAIL  {}: events equal {same_events}, bytes equal {same_bytes}", path.display());
            }
            Err(e) => {
                errors += 1;
                println!("ERROR {}: {e:#}", path.display());
            }
        }
    }
    if errors > 0 {
        bail!("{errors} of {} files could not be read or parsed", a.files.len());
    }
    Ok(failures == 0)
}
