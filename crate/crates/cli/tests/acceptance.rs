//! Acceptance checks, one pass/fail line each. Exits non-zero if any fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use melody_lstm::corpus::{synthetic_song, CorpusFile, Dataset, Song};
use melody_lstm::lstm::{grad_check, ModelConfig, ModelParams, Weights};
use melody_lstm::midi::{decode_vlq, encode_vlq, parse_midi, write_midi, VLQ_MAX};
use melody_lstm::numerics::Rng;
use melody_lstm::score::events_to_piece;
use melody_lstm::trainer::{evaluate, train, Checkpoint, TrainConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:.1?}, limit {limit:?}"))?;
    Ok(took)
}

fn cli(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = run(args, cwd);
    ensure(code(&out) == 0, || format!("`{}` exited {}: {}", args.join(" "), code(&out), stderr(&out)))?;
    Ok(stdout(&out))
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let report = grad_check(&ModelConfig::small_reference(), &mut Rng::new(0), 1e-4).map_err(|e| e.to_string())?;
    let took = within(Duration::from_secs(60), start)?;
    ensure(report.passed, || report.to_string())?;
    Ok(format!("max relative error {:.2e} over {} parameters in {took:.1?}", report.max_rel_err, report.checked))
}

/// 200 tokens built from four 25-token phrases. No 50-token context repeats
/// with a different continuation, so perfect recall is possible.
fn memorization_song() -> Song {
    let phrases = synthetic_song(100, 20, 17);
    let mut song = Song::default();
    for p in [0usize, 1, 0, 2, 0, 3, 1, 2] {
        song.notes.extend_from_slice(&phrases.notes[p * 25..p * 25 + 25]);
        song.durations.extend_from_slice(&phrases.durations[p * 25..p * 25 + 25]);
    }
    song
}

fn overfit_memorization() -> Outcome {
    let start = Instant::now();
    let ds = Dataset::from_songs(&[memorization_song()], 50).map_err(|e| e.to_string())?;
    ensure(ds.note_vocab.len() + ds.dur_vocab.len() <= 30, || "vocabulary too large".into())?;
    let config = TrainConfig { hidden: vec![64], lr: 1e-3, epochs: 200, batch_size: 8, seed: 1, ..TrainConfig::default() };
    let out = train(&ds, &config, None).map_err(|e| e.to_string())?;
    let row = evaluate(&out.params, &ds).map_err(|e| e.to_string())?;
    let took = within(Duration::from_secs(600), start)?;
    ensure(row.note_acc >= 0.95 && row.dur_acc >= 0.95, || format!("{row:?}"))?;
    Ok(format!("note acc {:.3}, duration acc {:.3} after {} epochs in {took:.1?}", row.note_acc, row.dur_acc, config.epochs))
}

/// A rest-free corpus ingested and trained for one epoch with windows of 50.
fn trained_workspace(dir: &Path, seed: &str, epochs: &str) -> Result<(), String> {
    write_songs(&dir.join("midi"), 3, 90, 10);
    cli(&["ingest", "midi", "--window-len", "50", "--out", "corpus"], dir)?;
    cli(&["train", "--corpus", "corpus/corpus.txt", "--epochs", epochs, "--hidden", "16", "--batch-size", "32", "--seed", seed, "--out", "model"], dir)?;
    Ok(())
}

fn generation_protocol() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained_workspace(dir, "5", "1")?;
    cli(&["generate", "--checkpoint", "model/final.ckpt", "--corpus", "corpus/corpus.txt", "--seed", "5", "--emit-tokens", "--out", "gen"], dir)?;
    let m = manifest(&dir.join("gen/manifest.json"));
    let seed_len = m["details"]["seed_window"]["tokens"].as_str().unwrap().split_whitespace().count();
    ensure(seed_len == 50, || format!("seed window has {seed_len} tokens"))?;
    let pairs = std::fs::read_to_string(dir.join("gen/out_000.txt")).unwrap().split_whitespace().count();
    ensure(pairs == 500, || format!("{pairs} generated pairs"))?;
    let midi = parse_midi(&std::fs::read(dir.join("gen/out_000.mid")).unwrap()).map_err(|e| e.to_string())?;
    let events = events_to_piece(&midi, 12).map_err(|e| e.to_string())?.piece.events.len();
    ensure(events == 500, || format!("re-parsed MIDI has {events} note events"))?;
    Ok(format!("seed of {seed_len} tokens, {pairs} pairs, {events} note events after re-parsing"))
}

fn five_songs_harness() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_songs(&dir.join("midi"), 3, 90, 10);
    cli(&["ingest", "midi", "--window-len", "50", "--out", "corpus"], dir)?;
    cli(
        &[
            "variants", "--corpus", "corpus/corpus.txt", "--variant", "steady: lr=0.001, batch_size=32", "--variant",
            "eager: lr=0.01, batch_size=16", "--epochs", "1", "--hidden", "16", "--length", "60", "--mode", "sample", "--seed",
            "11", "--out", "runs",
        ],
        dir,
    )?;
    let m = manifest(&dir.join("runs/manifest.json"));
    let variants = m["details"]["variants"].as_array().unwrap();
    let mut midi_files = 0;
    for v in variants {
        let songs: Vec<Vec<u8>> = v["songs"].as_array().unwrap().iter().map(|p| std::fs::read(dir.join("runs").join(p.as_str().unwrap())).unwrap()).collect();
        midi_files += songs.len();
        for (i, a) in songs.iter().enumerate() {
            ensure(songs[i + 1..].iter().all(|b| a != b), || format!("variant {} repeats a song", v["name"]))?;
        }
    }
    let windows: Vec<&serde_json::Value> = variants.iter().map(|v| &v["seed_window"]).collect();
    ensure(windows.windows(2).all(|w| w[0] == w[1]), || "seed windows differ between variants".into())?;
    ensure(midi_files == 10, || format!("{midi_files} MIDI files"))?;
    let on_disk = walk_mid(&dir.join("runs"));
    ensure(on_disk == 10, || format!("{on_disk} MIDI files on disk"))?;
    Ok(format!("{} variants, {midi_files} MIDI files, one shared seed window, songs distinct within each variant", variants.len()))
}

fn walk_mid(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| if p.is_dir() { walk_mid(&p) } else { usize::from(p.extension().is_some_and(|e| e == "mid")) })
        .sum()
}

fn midi_round_trip() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut files = handmade_files(tmp.path());
    files.extend(write_songs(tmp.path(), 4, 120, 24));
    for path in &files {
        let bytes = std::fs::read(path).unwrap();
        let first = parse_midi(&bytes).map_err(|e| format!("{}: {e}", path.display()))?;
        let written = write_midi(&first).map_err(|e| e.to_string())?;
        let second = parse_midi(&written).map_err(|e| e.to_string())?;
        ensure(first == second, || format!("{}: events changed", path.display()))?;
        ensure(write_midi(&second).map_err(|e| e.to_string())? == written, || format!("{}: bytes changed", path.display()))?;
    }
    let names: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
    let args: Vec<&str> = std::iter::once("roundtrip").chain(names.iter().map(String::as_str)).collect();
    cli(&args, tmp.path())?;

    for n in (0..=1u32 << 21).chain([VLQ_MAX]) {
        let enc = encode_vlq(n).map_err(|e| e.to_string())?;
        ensure(decode_vlq(&enc) == Ok((n, enc.len())), || format!("VLQ {n} does not round-trip"))?;
    }
    ensure(VLQ_MAX == (1 << 28) - 1, || "VLQ ceiling is not 2^28 - 1".into())?;
    let took = within(Duration::from_secs(30), start)?;
    Ok(format!("{} files stable, VLQ 0..=2^21 and 2^28-1 exact, in {took:.1?}", files.len()))
}

fn longest_run(tokens: &[&str], target: &str) -> usize {
    tokens.split(|t| *t != target).map(<[&str]>::len).max().unwrap_or(0)
}

fn repetition_guard() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained_workspace(dir, "2", "1")?;
    let mut ckpt = Checkpoint::load(&dir.join("model/final.ckpt")).map_err(|e| e.to_string())?;
    let favourite = ckpt.note_vocab.tokens()[0].clone();
    let mut weights = Weights::zeros(ckpt.params.config());
    weights.head_note.bias.as_mut_slice()[0] = 50.0;
    ckpt.params = ModelParams::from_weights(ckpt.params.config().clone(), weights).map_err(|e| e.to_string())?;
    ckpt.save(&dir.join("rigged.ckpt")).map_err(|e| e.to_string())?;

    let mut runs = Vec::new();
    for cap in ["8", "0"] {
        let out = format!("cap{cap}");
        cli(
            &["generate", "--checkpoint", "rigged.ckpt", "--corpus", "corpus/corpus.txt", "--mode", "argmax", "--repeat-cap", cap, "--emit-tokens", "--out", &out],
            dir,
        )?;
        let text = std::fs::read_to_string(dir.join(&out).join("out_000.txt")).unwrap();
        let notes: Vec<&str> = text.split_whitespace().map(|f| f.split(':').next().unwrap()).collect();
        runs.push((longest_run(&notes, favourite.as_str()), notes.len()));
    }
    ensure(runs[0].0 == 8, || format!("longest run with cap 8 is {}", runs[0].0))?;
    ensure(runs[1].0 == runs[1].1, || format!("longest run without guard is {} of {}", runs[1].0, runs[1].1))?;
    Ok(format!("token {favourite}: longest run {} with cap 8, {} of {} with the guard off", runs[0].0, runs[1].0, runs[1].1))
}

fn pipeline_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    for name in ["first", "second"] {
        let dir = tmp.path().join(name);
        write_songs(&dir.join("midi"), 2, 40, 8);
        cli(&["ingest", "midi", "--window-len", "12", "--out", "corpus", "--seed", "7"], &dir)?;
        cli(&["train", "--corpus", "corpus/corpus.txt", "--epochs", "3", "--hidden", "16,16", "--batch-size", "8", "--seed", "7", "--out", "model"], &dir)?;
        cli(&["generate", "--checkpoint", "model/final.ckpt", "--corpus", "corpus/corpus.txt", "--count", "3", "--length", "100", "--seed", "7", "--out", "gen"], &dir)?;
        results.push([snapshot(&dir.join("corpus")), snapshot(&dir.join("model")), snapshot(&dir.join("gen"))]);
    }
    for (what, (a, b)) in ["corpus", "checkpoints", "generated files"].iter().zip(results[0].iter().zip(&results[1])) {
        ensure(a == b, || format!("{what} differ between runs"))?;
    }
    let files: usize = results[0].iter().map(Vec::len).sum();
    Ok(format!("{files} output files byte-identical across two runs"))
}

fn untrained_perplexity() -> Outcome {
    let mut notes = Vec::new();
    for (pitches, seed) in [(12u8, 1u64), (40, 2)] {
        let songs: Vec<Song> = (0..3).map(|i| synthetic_song(80, pitches, seed * 10 + i)).collect();
        let corpus = CorpusFile { grid: 12, window_len: 50, max_dur: 48, songs };
        let ds = Dataset::from_corpus(&corpus).map_err(|e| e.to_string())?;
        let config = ModelConfig::new(ds.note_vocab.len(), ds.dur_vocab.len());
        let params = ModelParams::init(&config, &mut Rng::new(seed)).map_err(|e| e.to_string())?;
        let row = evaluate(&params, &ds).map_err(|e| e.to_string())?;
        let n = ds.note_vocab.len() as f64;
        ensure((row.note_ppl - n).abs() <= 0.2 * n, || format!("perplexity {:.2} for vocabulary {n}", row.note_ppl))?;
        notes.push(format!("{:.2} for vocabulary {n}", row.note_ppl));
    }
    Ok(format!("perplexity {}", notes.join(", ")))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient correctness", gradient_correctness),
        ("overfit memorization", overfit_memorization),
        ("generation protocol", generation_protocol),
        ("five-songs harness", five_songs_harness),
        ("MIDI round trip", midi_round_trip),
        ("repetition guard", repetition_guard),
        ("determinism", pipeline_determinism),
        ("untrained perplexity", untrained_perplexity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match check() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
