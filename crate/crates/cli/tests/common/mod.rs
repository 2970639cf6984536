#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use melody_lstm::corpus::{synthetic_song, Song};
use melody_lstm::generator::song_to_midi_bytes;

pub fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_melody-lstm")).args(args).current_dir(cwd).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes `count` rest-free monophonic songs as `song_NN.mid` into `dir`.
pub fn write_songs(dir: &Path, count: u64, len: usize, pitches: u8) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    (0..count)
        .map(|i| {
            let path = dir.join(format!("song_{i:02}.mid"));
            write_song(&path, &synthetic_song(len, pitches, 100 + i));
            path
        })
        .collect()
}

pub fn write_song(path: &Path, song: &Song) {
    std::fs::write(path, song_to_midi_bytes(song, 12, 500_000).unwrap()).unwrap();
}

fn vlq(mut v: u32) -> Vec<u8> {
    let mut out = vec![(v & 0x7F) as u8];
    v >>= 7;
    while v > 0 {
        out.insert(0, (v & 0x7F) as u8 | 0x80);
        v >>= 7;
    }
    out
}

fn chunk(tag: &[u8; 4], body: &[u8]) -> Vec<u8> {
    let mut out = tag.to_vec();
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    out
}

fn header(format: u16, tracks: u16, division: u16) -> Vec<u8> {
    let mut body = format.to_be_bytes().to_vec();
    body.extend_from_slice(&tracks.to_be_bytes());
    body.extend_from_slice(&division.to_be_bytes());
    chunk(b"MThd", &body)
}

/// Hand-assembled files exercising running status, velocity-0 note-ons,
/// SysEx, text and key-signature metas, program changes and two tracks.
pub fn handmade_files(dir: &Path) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    let mut conductor = Vec::new();
    conductor.extend([0x00, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20]);
    conductor.extend([0x00, 0xFF, 0x03, 0x04]);
    conductor.extend(b"lead");
    conductor.extend([0x00, 0xFF, 0x59, 0x02, 0x00, 0x00]);
    conductor.extend([0x00, 0xFF, 0x2F, 0x00]);

    let mut melody = Vec::new();
    melody.extend([0x00, 0xC0, 0x05]);
    melody.extend([0x00, 0xF0, 0x03, 0x43, 0x12, 0xF7]);
    melody.extend([0x00, 0x90, 60, 90]);
    melody.extend(vlq(96));
    melody.extend([60, 0]);
    melody.extend([0x00, 64, 80]);
    melody.extend(vlq(200));
    melody.extend([0x80, 64, 0]);
    melody.extend(vlq(1000));
    melody.extend([0x91, 67, 70]);
    melody.extend(vlq(300));
    melody.extend([67, 0]);
    melody.extend([0x00, 0xB0, 0x07, 0x64]);
    melody.extend([0x00, 0xFF, 0x2F, 0x00]);

    let mut multi = header(1, 2, 96);
    multi.extend(chunk(b"MTrk", &conductor));
    multi.extend(chunk(b"MTrk", &melody));

    let mut single = header(0, 1, 480);
    let mut body = melody.clone();
    body.splice(0..0, [0x00, 0xFF, 0x51, 0x03, 0x06, 0x1A, 0x80]);
    single.extend(chunk(b"MTrk", &body));

    let mut files = Vec::new();
    for (name, bytes) in [("multi.mid", multi), ("single.mid", single)] {
        let path = dir.join(name);
        std::fs::write(&path, bytes).unwrap();
        files.push(path);
    }
    files
}

/// Files in `dir` as `(name, bytes)`, sorted by name.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}
