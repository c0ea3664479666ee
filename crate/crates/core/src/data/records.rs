//! Synthetic record files: one record per line,
//! `context words TAB id:prob,id:prob,... [TAB tags]`, with the vocabulary in
//! a `PATH.vocab` sidecar. Tags are `split=<name>` and `forbidden=id,id,...`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::synth::Record;
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::transformer::BOS;

/// A record mapped to token ids. `context` starts with BOS; the answer is
/// predicted at its last position.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedRecord {
    pub context: Vec<usize>,
    pub target: Vec<(usize, f64)>,
    pub forbidden: Vec<usize>,
    pub split: String,
}

/// Vocabulary over every context, target and forbidden word.
pub fn records_vocab(records: &[Record]) -> Result<Vocab> {
    let mut docs = Vec::with_capacity(records.len());
    for r in records {
        let mut words = r.context.clone();
        words.extend(r.target.iter().map(|t| t.0.clone()));
        words.extend(r.forbidden.iter().cloned());
        docs.push(words.join(" "));
    }
    Vocab::build(docs.iter().map(String::as_str), None)
}

pub fn encode_record(r: &Record, vocab: &Vocab) -> EncodedRecord {
    let mut context = vec![BOS];
    context.extend(r.context.iter().map(|w| vocab.id(w)));
    EncodedRecord {
        context,
        target: r.distribution().into_iter().map(|(w, p)| (vocab.id(&w), p)).collect(),
        forbidden: r.forbidden.iter().map(|w| vocab.id(w)).collect(),
        split: r.split.clone(),
    }
}

pub fn vocab_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

/// Writes `records` and the `.vocab` sidecar.
pub fn write_records(path: &Path, records: &[Record], vocab: &Vocab) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let e = encode_record(r, vocab);
        let targets: Vec<String> = e.target.iter().map(|(id, p)| format!("{id}:{p}")).collect();
        write!(out, "{}\t{}\tsplit={}", r.context.join(" "), targets.join(","), e.split).expect("string write");
        if !e.forbidden.is_empty() {
            let f: Vec<String> = e.forbidden.iter().map(usize::to_string).collect();
            write!(out, " forbidden={}", f.join(",")).expect("string write");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    vocab.save(&vocab_path(path))
}

fn parse_ids(s: &str, line: usize, v: usize) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            let id: usize = x.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad id `{x}`"),
            })?;
            if id >= v {
                return Err(Error::Parse {
                    line,
                    msg: format!("id {id} outside vocabulary of {v}"),
                });
            }
            Ok(id)
        })
        .collect()
}

/// Reads a record file and its vocabulary sidecar.
pub fn read_records(path: &Path) -> Result<(Vec<EncodedRecord>, Vocab)> {
    let vocab = Vocab::load(&vocab_path(path))?;
    let text = fs::read_to_string(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 2 || cols.len() > 3 {
            return Err(Error::Parse {
                line: n,
                msg: format!("expected 2 or 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let mut context = vec![BOS];
        context.extend(vocab.encode(cols[0]));
        let mut target = Vec::new();
        for pair in cols[1].split(',') {
            let (id, p) = pair.split_once(':').ok_or_else(|| Error::Parse {
                line: n,
                msg: format!("expected id:prob, found `{pair}`"),
            })?;
            let id = parse_ids(id, n, vocab.len())?[0];
            let p: f64 = p.parse().map_err(|_| Error::Parse {
                line: n,
                msg: format!("bad probability `{p}`"),
            })?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parse {
                    line: n,
                    msg: format!("probability {p} outside [0, 1]"),
                });
            }
            target.push((id, p));
        }
        let total: f64 = target.iter().map(|t| t.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Parse {
                line: n,
                msg: format!("target mass sums to {total}"),
            });
        }
        let mut forbidden = Vec::new();
        let mut split = String::from("all");
        if let Some(tags) = cols.get(2) {
            for tag in tags.split_whitespace() {
                match tag.split_once('=') {
                    Some(("split", s)) => split = s.to_string(),
                    Some(("forbidden", ids)) => forbidden = parse_ids(ids, n, vocab.len())?,
                    _ => {
                        return Err(Error::Parse {
                            line: n,
                            msg: format!("unknown tag `{tag}`"),
                        })
                    }
                }
            }
        }
        out.push(EncodedRecord {
            context,
            target,
            forbidden,
            split,
        });
    }
    if out.is_empty() {
        return Err(Error::Ingestion(format!("{} holds no records", path.display())));
    }
    Ok((out, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_bundled, SyntheticSpec, Task};

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("list.tsv");
        let recs = generate_bundled(&SyntheticSpec::new(Task::ListCompletion, 5, 2)).unwrap();
        let vocab = records_vocab(&recs).unwrap();
        write_records(&p, &recs, &vocab).unwrap();
        let (back, v2) = read_records(&p).unwrap();
        assert_eq!(v2, vocab);
        let want: Vec<EncodedRecord> = recs.iter().map(|r| encode_record(r, &vocab)).collect();
        assert_eq!(back, want);
        assert!(back.iter().all(|r| !r.forbidden.is_empty() && r.split == "list"));
    }

    #[test]
    fn retokenizing_reproduces_ids() {
        for task in [Task::Parallelogram, Task::ListCompletion, Task::Choice] {
            let recs = generate_bundled(&SyntheticSpec::new(task, 8, 4)).unwrap();
            let vocab = records_vocab(&recs).unwrap();
            for r in &recs {
                let e = encode_record(r, &vocab);
                let text = vocab.decode(&e.context);
                let mut again = vec![BOS];
                again.extend(vocab.encode(&text));
                assert_eq!(again, e.context);
            }
        }
    }

    #[test]
    fn malformed_lines_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.tsv");
        Vocab::from_words(["a", "b"]).save(&vocab_path(&p)).unwrap();
        for bad in ["a b", "a\t3:0.5", "a\t3:0.5,4:0.6", "a\t3:1\tcolor=red", "a\t9:1"] {
            fs::write(&p, bad).unwrap();
            assert!(matches!(read_records(&p), Err(Error::Parse { line: 1, .. })), "{bad}");
        }
        fs::write(&p, "a b\t3:0.5,4:0.5\n").unwrap();
        let (r, _) = read_records(&p).unwrap();
        assert_eq!(r[0].context, vec![BOS, 3, 4]);
        assert_eq!(r[0].split, "all");
    }
}
