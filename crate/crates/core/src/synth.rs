//! Seeded synthetic Bash corpus: template commands with slot values and
//! paraphrased comments. Used for offline tests and demos.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;

const DIRS: &[&str] = &[".", "/tmp", "/var/log", "~/docs", "/home/user", "src", "/etc", "build"];
const EXTS: &[&str] = &["php", "txt", "log", "sh", "py", "c", "html", "jpg"];
const NAMES: &[&str] = &["config", "backup", "notes", "data", "report", "app"];
const NUMS: &[&str] = &["1", "5", "10", "20", "100", "3"];
const SIZES: &[&str] = &["1M", "10M", "100k", "1G"];
const USERS: &[&str] = &["root", "admin", "alice", "www-data"];
const PERMS: &[&str] = &["755", "644", "600", "777"];
const PATTERNS: &[&str] = &["error", "warning", "TODO", "main", "password", "timeout"];
const PROCS: &[&str] = &["nginx", "python", "java", "sshd", "node"];

/// `(code, [comment paraphrases])` with `{dir}`-style slots.
const TEMPLATES: &[(&str, &[&str])] = &[
    (
        "find {dir} -type f -name \"*.{ext}\"",
        &["find all {ext} files under {dirn}", "search {dirn} for {ext} files"],
    ),
    (
        "find {dir} -type f -size +{size}",
        &["find files larger than {size} in {dirn}", "list files bigger than {size} under {dirn}"],
    ),
    (
        "find {dir} -name \"*.{ext}\" -delete",
        &["delete all {ext} files under {dirn}", "remove every {ext} file in {dirn}"],
    ),
    ("find {dir} -mtime -{num}", &["find files modified in the last {num} days under {dirn}"]),
    (
        "grep -r \"{pat}\" {dir}",
        &["recursively search for {pat} in {dirn}", "search {dirn} recursively for the string {pat}"],
    ),
    ("grep -c \"{pat}\" {name}.{ext}", &["count lines containing {pat} in {name}.{ext}"]),
    ("grep -v \"{pat}\" {name}.{ext}", &["print lines of {name}.{ext} that do not contain {pat}"]),
    ("rm -rf {dir}", &["remove {dirn} and all its contents", "recursively delete {dirn}"]),
    (
        "ls -la {dir}",
        &["list all files in {dirn} with details", "show a detailed listing of {dirn} including hidden files"],
    ),
    (
        "chmod {perm} {name}.{ext}",
        &["set permissions of {name}.{ext} to {perm}", "change the mode of {name}.{ext} to {perm}"],
    ),
    ("chown {user} {name}.{ext}", &["change the owner of {name}.{ext} to {user}"]),
    (
        "tar -czf {name}.tar.gz {dir}",
        &["create a compressed archive {name}.tar.gz of {dirn}", "compress {dirn} into {name}.tar.gz"],
    ),
    ("tar -xzf {name}.tar.gz -C {dir}", &["extract {name}.tar.gz into {dirn}"]),
    (
        "wc -l {name}.{ext}",
        &["count the number of lines in {name}.{ext}", "print the line count of {name}.{ext}"],
    ),
    (
        "head -n {num} {name}.{ext}",
        &["print the first {num} lines of {name}.{ext}", "show the first {num} lines of {name}.{ext}"],
    ),
    ("tail -n {num} {name}.{ext}", &["print the last {num} lines of {name}.{ext}"]),
    ("sort {name}.{ext} | uniq -c", &["count occurrences of each unique line in {name}.{ext}"]),
    (
        "du -sh {dir}",
        &["show the total disk usage of {dirn}", "print the size of {dirn} in human readable form"],
    ),
    ("pkill {proc}", &["kill all {proc} processes"]),
    ("ps aux | grep {proc}", &["list running {proc} processes"]),
    ("cp {name}.{ext} {dir}", &["copy {name}.{ext} to {dirn}"]),
    ("mv {name}.{ext} {dir}", &["move {name}.{ext} to {dirn}"]),
    (
        "find {dir} -type f -name \"*.{ext}\" | xargs grep -l \"{pat}\"",
        &["find {ext} files under {dirn} that contain {pat}"],
    ),
    ("find {dir} -type f -user {user}", &["find files owned by {user} under {dirn}"]),
    ("find {dir} -empty -delete", &["delete all empty files and directories in {dirn}"]),
];

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in slots {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// One random `(code, comment)` pair.
pub fn sample_pair(rng: &mut ChaCha8Rng) -> (String, String) {
    let (code, comments) = TEMPLATES.choose(rng).unwrap();
    let dir = *DIRS.choose(rng).unwrap();
    let dirn = if dir == "." { "the current directory" } else { dir };
    let slots = [
        ("dirn", dirn),
        ("dir", dir),
        ("ext", EXTS.choose(rng).unwrap()),
        ("name", NAMES.choose(rng).unwrap()),
        ("num", NUMS.choose(rng).unwrap()),
        ("size", SIZES.choose(rng).unwrap()),
        ("user", USERS.choose(rng).unwrap()),
        ("perm", PERMS.choose(rng).unwrap()),
        ("pat", PATTERNS.choose(rng).unwrap()),
        ("proc", PROCS.choose(rng).unwrap()),
    ];
    let comment = comments[rng.random_range(0..comments.len())];
    (fill(code, &slots), fill(comment, &slots))
}

/// `n` distinct pairs, deterministic in `seed`.
pub fn synthetic_corpus(n: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    loop {
        let corpus = Corpus::from_pairs(pairs.iter().cloned());
        if corpus.len() >= n {
            return Corpus::from_pairs(corpus.samples.into_iter().take(n).map(|s| (s.code, s.comment)));
        }
        for _ in corpus.len()..n {
            pairs.push(sample_pair(&mut rng));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() {
        let a = synthetic_corpus(300, 4);
        assert_eq!(a, synthetic_corpus(300, 4));
        assert_eq!(a.len(), 300);
        assert_ne!(a, synthetic_corpus(300, 5));
    }

    #[test]
    fn slots_are_filled() {
        let c = synthetic_corpus(100, 1);
        for s in &c.samples {
            assert!(!s.code.contains('{') && !s.comment.contains('{'), "{s:?}");
        }
    }
}
