//! Line-delimited dataset records: space-separated token ids, a tab, the label.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::Sample;
use crate::error::{Error, Result};

pub fn write_records(path: &Path, samples: &[Sample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        let ids: Vec<String> = s.tokens.iter().map(usize::to_string).collect();
        writeln!(w, "{}\t{}", ids.join(" "), s.label)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Sample>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Data(format!("{}:{}: {what}", path.display(), i + 1));
        let (ids, label) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        let tokens = ids
            .split(' ')
            .map(str::parse)
            .collect::<std::result::Result<Vec<usize>, _>>()
            .map_err(|_| bad("bad token id"))?;
        let label = label.trim().parse().map_err(|_| bad("bad label"))?;
        out.push(Sample { tokens, label });
    }
    Ok(out)
}
