//! Shared synthetic-manifest fixtures for integration tests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const NAMES: [&str; 8] = [
    "Avery", "Blake", "Casey", "Drew", "Emery", "Flynn", "Gray", "Harper",
];

/// Character-identification manifest built so the photo-name binding is only
/// readable from the context: a fixed pool of photo seeds is re-paired to
/// the names by a fresh permutation per sample, and the clip reuses the
/// photo seed of the single present character. The same clip vector answers
/// to different names across samples, so clip-to-name memorization carries
/// no signal; held-out samples use unseen permutations.
pub fn write_identify_manifest(dir: &Path, n_train: usize, n_test: usize, n_names: usize) -> PathBuf {
    let names = &NAMES[..n_names];
    let photo_pool: Vec<u64> = (0..names.len() as u64).map(|j| 9_000 + j).collect();
    let mut out = String::new();
    let mut emit = |idx: usize, split: &str, salt: u64| {
        let mut perm: Vec<usize> = (0..names.len()).collect();
        // Deterministic per-sample permutation (Fisher-Yates on a counter rng).
        let mut x = salt.wrapping_add(idx as u64).wrapping_mul(0x9e3779b97f4a7c15);
        for i in (1..perm.len()).rev() {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            perm.swap(i, (x % (i as u64 + 1)) as usize);
        }
        let target = idx % names.len();
        let bank: Vec<String> = names
            .iter()
            .enumerate()
            .map(|(i, n)| format!(r#"{{"name":"{n}","seed":{}}}"#, photo_pool[perm[i]]))
            .collect();
        writeln!(
            out,
            r#"{{"id":"{split}{idx}","task":"identify","split":"{split}","media":[{{"seed":{clip},"frames":1}}],"contexts":[{{"type":"characters","bank":[{bank}],"present":["{name}"]}}]}}"#,
            clip = photo_pool[perm[target]],
            bank = bank.join(","),
            name = names[target],
        )
        .unwrap();
    };
    for i in 0..n_train {
        emit(i, "train", 0xa11ce);
    }
    for i in 0..n_test {
        emit(i, "test", 0xb0b5eed);
    }
    let path = dir.join("identify.jsonl");
    std::fs::write(&path, out).unwrap();
    path
}

/// Caption manifest with a subtitle context carrying an unmistakable marker
/// word, for context-toggle soundness checks.
pub fn write_caption_manifest(dir: &Path, n: usize) -> PathBuf {
    let subs = "0.0\t4.0\tRiley\tzyxmarker dialogue line one\n5.0\t9.0\t\tzyxmarker again later\n";
    std::fs::write(dir.join("subs.tsv"), subs).unwrap();
    let plot = "the story begins in a small town\nthe hero finds a map\n\nthe map leads to the coast\nthe crew sets sail at dawn\n";
    std::fs::write(dir.join("plot.txt"), plot).unwrap();
    let mut out = String::new();
    for i in 0..n {
        writeln!(
            out,
            r#"{{"id":"c{i}","task":"caption","split":"{split}","media":[{{"seed":{seed},"frames":4}}],"contexts":[{{"type":"subtitle","file":"subs.tsv","start":0.0,"end":10.0}},{{"type":"plot","file":"plot.txt","t":{t},"duration":10.0}}],"question":"Please describe this video.","answer":"clip number {i} shows the crew"}}"#,
            split = if i % 2 == 0 { "train" } else { "test" },
            seed = 700 + i,
            t = i as f64,
        )
        .unwrap();
    }
    let path = dir.join("caption.jsonl");
    std::fs::write(&path, out).unwrap();
    path
}

/// Audio-description manifest: one group of clips at increasing timestamps,
/// each conditioning on the full history of earlier clips. Listed in
/// shuffled order to exercise timestamp sorting.
pub fn write_ad_manifest(dir: &Path, n: usize) -> PathBuf {
    let mut rows: Vec<String> = (0..n)
        .map(|i| {
            let hist: Vec<String> = (0..i).map(|j| format!("\"ad{j}\"")).collect();
            let contexts = if i == 0 {
                String::new()
            } else {
                format!(
                    r#","contexts":[{{"type":"history","ids":[{}]}}]"#,
                    hist.join(",")
                )
            };
            format!(
                r#"{{"id":"ad{i}","task":"ad","split":"test","media":[{{"seed":{seed},"frames":2}}]{contexts},"answer":"narration number {i} of the story","timestamp":{ts},"group":"movie"}}"#,
                seed = 900 + i,
                ts = i as f64 * 10.0,
            )
        })
        .collect();
    rows.reverse(); // manifest order is newest-first on purpose
    let path = dir.join("ad.jsonl");
    std::fs::write(&path, rows.join("\n") + "\n").unwrap();
    path
}

/// Plot-marker manifest: the answer word is literally the second token of
/// the plot, so visibility of the plot prefix decides the task.
pub fn write_plot_marker_manifest(dir: &Path, n_train: usize, n_test: usize) -> PathBuf {
    let words = ["ruby", "amber", "jade", "onyx"];
    let mut out = String::new();
    let mut emit = |idx: usize, split: &str| {
        let w = words[idx % words.len()];
        let plot_file = format!("marker_{w}.txt");
        let plot = format!(
            "codeword {w} stands first\nfiller sentence follows here\n\nmore filler text in a second paragraph\nnothing else matters now\n"
        );
        std::fs::write(dir.join(&plot_file), plot).unwrap();
        writeln!(
            out,
            r#"{{"id":"{split}{idx}","task":"mcq","split":"{split}","media":[{{"seed":{seed},"frames":1}}],"contexts":[{{"type":"plot","file":"{plot_file}","t":0.0,"duration":10.0,"w":2}}],"question":"which codeword","options":["ruby","amber","jade","onyx","none"],"gold":{gold}}}"#,
            seed = 40 + (idx % words.len()),
            gold = idx % words.len(),
        )
        .unwrap();
    };
    for i in 0..n_train {
        emit(i, "train");
    }
    for i in 0..n_test {
        emit(i, "test");
    }
    let path = dir.join("marker.jsonl");
    std::fs::write(&path, out).unwrap();
    path
}
