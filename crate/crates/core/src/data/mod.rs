//! Tokenization, datasets, batching and file loaders.

mod batch;
pub mod synthetic;
mod tokenizer;

pub use batch::{batch_iter, chunk_stream, epoch_batches, Batch, Dataset, Example};
pub use tokenizer::{Tokenizer, TokenizerMode, CLS, PAD, RESERVED, SEP, UNK};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// One document per non-blank line.
pub fn load_text(path: &Path, tokenizer: &Tokenizer) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Dataset::new(
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Example {
                tokens: tokenizer.encode(l),
                label: None,
            })
            .collect(),
    ))
}

/// `label<TAB>text` per line, label a non-negative integer.
pub fn load_tsv(path: &Path, tokenizer: &Tokenizer) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .quoting(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    let mut examples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
        let line = i + 1;
        if record.len() != 2 {
            return Err(Error::input(format!(
                "{} line {line}: expected `label<TAB>text`, found {} fields",
                path.display(),
                record.len()
            )));
        }
        let label = record[0].trim().parse::<usize>().map_err(|_| {
            Error::input(format!("{} line {line}: bad label {:?}", path.display(), &record[0]))
        })?;
        examples.push(Example {
            tokens: tokenizer.encode(&record[1]),
            label: Some(label),
        });
    }
    Ok(Dataset::new(examples))
}

pub fn write_tsv(path: &Path, rows: &[(usize, String)]) -> Result<()> {
    let mut out = Vec::new();
    for (label, text) in rows {
        if text.contains(['\t', '\n', '\r']) {
            return Err(Error::input(format!("text for label {label} contains a tab or newline")));
        }
        writeln!(out, "{label}\t{text}").expect("writing to a Vec cannot fail");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, docs: &[String]) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        if d.contains(['\n', '\r']) {
            return Err(Error::input("document contains a newline"));
        }
        out.push_str(d);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tsv");
        write_tsv(&p, &[(1, "ab c".into()), (0, "\"q\"".into())]).unwrap();
        let tok = Tokenizer::byte_level();
        let d = load_tsv(&p, &tok).unwrap();
        assert_eq!(d.examples[0].label, Some(1));
        assert_eq!(tok.decode(&d.examples[1].tokens).unwrap(), "\"q\"");
        fs::write(&p, "x\thello\n").unwrap();
        assert!(matches!(load_tsv(&p, &tok), Err(Error::Input(_))));
    }

    #[test]
    fn text_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        write_text(&p, &["one".into(), "two".into()]).unwrap();
        let d = load_text(&p, &Tokenizer::byte_level()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.num_labels(), None);
    }
}
