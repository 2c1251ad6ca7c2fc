//! Interaction logs, chronological splits and prepared datasets.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParseMode {
    /// Fail on the first malformed row.
    Strict,
    /// Skip malformed rows and count them.
    Lenient,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedLog {
    pub interactions: Vec<Interaction>,
    pub malformed: usize,
    /// 1-based line numbers of skipped rows.
    pub malformed_lines: Vec<usize>,
}

/// Reads a delimited log with a `user_id,item_id,timestamp` header (any
/// column order, comma or tab separated).
pub fn parse_interactions(path: &Path, mode: ParseMode) -> Result<ParsedLog> {
    let file = std::fs::File::open(path)?;
    parse_interactions_from(file, &path.display().to_string(), mode)
}

pub fn parse_interactions_from<R: Read>(
    mut reader: R,
    origin: &str,
    mode: ParseMode,
) -> Result<ParsedLog> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let header = text.lines().next().unwrap_or("");
    let delimiter = if header.contains('\t') { b'\t' } else { b',' };
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let (Some(cu), Some(ci), Some(ct)) = (column("user_id"), column("item_id"), column("timestamp"))
    else {
        return Err(Error::Parse {
            path: origin.to_string(),
            line: 1,
            msg: format!(
                "header must name user_id, item_id and timestamp, got '{}'",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    };
    let mut out = ParsedLog::default();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let fields = (record.get(cu), record.get(ci), record.get(ct));
        let problem = match fields {
            _ if record.len() != headers.len() => Some(format!(
                "expected {} fields, found {}",
                headers.len(),
                record.len()
            )),
            (Some(u), Some(i), Some(t)) => {
                if u.is_empty() || i.is_empty() {
                    Some("empty user or item id".to_string())
                } else {
                    match t.parse::<u64>() {
                        Ok(ts) => {
                            out.interactions.push(Interaction {
                                user_id: u.to_string(),
                                item_id: i.to_string(),
                                timestamp: ts,
                            });
                            None
                        }
                        Err(_) => Some(format!("unparsable timestamp '{t}'")),
                    }
                }
            }
            _ => Some("missing fields".to_string()),
        };
        if let Some(msg) = problem {
            match mode {
                ParseMode::Strict => {
                    return Err(Error::Parse {
                        path: origin.to_string(),
                        line,
                        msg,
                    })
                }
                ParseMode::Lenient => {
                    out.malformed += 1;
                    out.malformed_lines.push(line);
                }
            }
        }
    }
    Ok(out)
}

/// Train:validation:test proportions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRatios {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl SplitRatios {
    pub const LIMITED_DATA: SplitRatios = SplitRatios {
        train: 3,
        val: 2,
        test: 5,
    };
    pub const STANDARD: SplitRatios = SplitRatios {
        train: 6,
        val: 2,
        test: 2,
    };

    /// `(train_end, val_end)` for a sequence of length `n`: train and
    /// validation lengths are floored, the remainder goes to test.
    pub fn split_points(&self, n: usize) -> (usize, usize) {
        let total = (self.train + self.val + self.test) as usize;
        let train_end = n * self.train as usize / total;
        let val_end = train_end + n * self.val as usize / total;
        (train_end, val_end)
    }
}

impl fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.val, self.test)
    }
}

impl FromStr for SplitRatios {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, c] = parts[..] else {
            return Err(format!("ratios must look like 3:2:5, got '{s}'"));
        };
        let parse = |p: &str| {
            p.trim()
                .parse::<u32>()
                .map_err(|_| format!("bad ratio component '{p}' in '{s}'"))
        };
        let r = SplitRatios {
            train: parse(a)?,
            val: parse(b)?,
            test: parse(c)?,
        };
        if r.train == 0 || r.val == 0 || r.test == 0 {
            return Err(format!("ratio components must be positive, got '{s}'"));
        }
        Ok(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Train,
    Val,
    Test,
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Segment::Train => "train",
            Segment::Val => "val",
            Segment::Test => "test",
        })
    }
}

impl FromStr for Segment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Segment::Train),
            "val" => Ok(Segment::Val),
            "test" => Ok(Segment::Test),
            _ => Err(format!("segment must be train|val|test, got '{s}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: String,
    /// Dense item indices, `1..=n_items`.
    pub items: Vec<usize>,
    pub timestamps: Vec<u64>,
    pub train_end: usize,
    pub val_end: usize,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn segment(&self, seg: Segment) -> std::ops::Range<usize> {
        match seg {
            Segment::Train => 0..self.train_end,
            Segment::Val => self.train_end..self.val_end,
            Segment::Test => self.val_end..self.items.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    /// `vocab[i - 1]` is the external id of item index `i`.
    pub vocab: Vec<String>,
    pub users: Vec<UserSequence>,
    pub ratios: SplitRatios,
    pub min_seq_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSummary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub mean_length: f64,
}

impl SequenceDataset {
    pub fn n_items(&self) -> usize {
        self.vocab.len()
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.vocab
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i + 1))
            .collect()
    }

    pub fn summary(&self) -> DatasetSummary {
        let interactions: usize = self.users.iter().map(UserSequence::len).sum();
        let mut seen = vec![false; self.vocab.len() + 1];
        for u in &self.users {
            for &i in &u.items {
                seen[i] = true;
            }
        }
        DatasetSummary {
            users: self.users.len(),
            items: seen.iter().filter(|&&s| s).count(),
            interactions,
            mean_length: if self.users.is_empty() {
                0.0
            } else {
                interactions as f64 / self.users.len() as f64
            },
        }
    }

    /// Number of prediction instances in a segment (positions with a non-empty context).
    pub fn instances(&self, seg: Segment) -> usize {
        self.users
            .iter()
            .map(|u| u.segment(seg).filter(|&p| p > 0).count())
            .sum()
    }
}

/// Groups by user, orders each user chronologically (ties keep file order),
/// drops short users, then splits each sequence.
pub fn build_dataset(
    interactions: &[Interaction],
    min_seq_len: usize,
    ratios: SplitRatios,
) -> Result<SequenceDataset> {
    let mut vocab = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut user_order = Vec::new();
    let mut per_user: HashMap<&str, Vec<(u64, usize)>> = HashMap::new();
    for it in interactions {
        let item = *index.entry(it.item_id.as_str()).or_insert_with(|| {
            vocab.push(it.item_id.clone());
            vocab.len()
        });
        per_user
            .entry(it.user_id.as_str())
            .or_insert_with(|| {
                user_order.push(it.user_id.as_str());
                Vec::new()
            })
            .push((it.timestamp, item));
    }
    let mut users = Vec::new();
    for uid in user_order {
        let mut events = per_user.remove(uid).unwrap_or_default();
        if events.len() < min_seq_len.max(1) {
            continue;
        }
        events.sort_by_key(|&(t, _)| t);
        let (train_end, val_end) = ratios.split_points(events.len());
        users.push(UserSequence {
            user_id: uid.to_string(),
            items: events.iter().map(|&(_, i)| i).collect(),
            timestamps: events.iter().map(|&(t, _)| t).collect(),
            train_end,
            val_end,
        });
    }
    if users.is_empty() {
        return Err(Error::Dataset(format!(
            "no users with at least {min_seq_len} interactions"
        )));
    }
    Ok(SequenceDataset {
        vocab,
        users,
        ratios,
        min_seq_len,
    })
}

/// The most recent `max_context` items of `prefix`.
pub fn truncate_context(prefix: &[usize], max_context: usize) -> &[usize] {
    &prefix[prefix.len().saturating_sub(max_context.max(1))..]
}

const PREPARED_MAGIC: &str = "# ttt4rec-dataset v1";

/// Writes the prepared form: comment header, `item` rows, then `user` rows.
/// `ratios_text` is recorded exactly as given.
pub fn write_prepared<W: Write>(ds: &SequenceDataset, ratios_text: &str, out: W) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    let s = ds.summary();
    writeln!(out, "{PREPARED_MAGIC}")?;
    writeln!(out, "# ratios={ratios_text}")?;
    writeln!(out, "# min_len={}", ds.min_seq_len)?;
    writeln!(
        out,
        "# users={} items={} vocab={} interactions={}",
        s.users,
        s.items,
        ds.vocab.len(),
        s.interactions
    )?;
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .has_headers(false)
        .from_writer(out);
    for (i, id) in ds.vocab.iter().enumerate() {
        w.write_record(["item", &(i + 1).to_string(), id])?;
    }
    for u in &ds.users {
        let items = u.items.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        let times = u.timestamps.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
        w.write_record([
            "user",
            &u.user_id,
            &u.train_end.to_string(),
            &u.val_end.to_string(),
            &items,
            &times,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_prepared(path: &Path) -> Result<SequenceDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_prepared(&text, &path.display().to_string())
}

pub fn parse_prepared(text: &str, origin: &str) -> Result<SequenceDataset> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    if text.lines().next() != Some(PREPARED_MAGIC) {
        return Err(err(1, "not a prepared dataset file".into()));
    }
    let mut ratios = None;
    let mut min_seq_len = 0;
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some(r) = line.strip_prefix("# ratios=") {
            ratios = Some(r.parse::<SplitRatios>().map_err(|e| err(2, e))?);
        } else if let Some(m) = line.strip_prefix("# min_len=") {
            min_seq_len = m.parse().map_err(|_| err(3, format!("bad min_len '{m}'")))?;
        }
    }
    let ratios = ratios.ok_or_else(|| err(2, "missing ratios".into()))?;
    let body: String = text
        .lines()
        .skip_while(|l| l.starts_with('#'))
        .flat_map(|l| [l, "\n"])
        .collect();
    let header_lines = text.lines().take_while(|l| l.starts_with('#')).count();
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(false)
        .from_reader(body.as_bytes());
    let mut vocab = Vec::new();
    let mut users = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = header_lines + rec.position().map_or(0, |p| p.line() as usize);
        let num = |i: usize| -> Result<usize> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(line, format!("field {i} is not a number")))
        };
        let list = |i: usize| -> Result<Vec<u64>> {
            rec.get(i)
                .unwrap_or("")
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| err(line, format!("bad number '{v}'"))))
                .collect()
        };
        match rec.get(0) {
            Some("item") => {
                if num(1)? != vocab.len() + 1 {
                    return Err(err(line, "item indices must be dense and in order".into()));
                }
                vocab.push(rec.get(2).unwrap_or("").to_string());
            }
            Some("user") => {
                let items: Vec<usize> = list(4)?.into_iter().map(|v| v as usize).collect();
                let timestamps = list(5)?;
                let (train_end, val_end) = (num(2)?, num(3)?);
                if items.len() != timestamps.len()
                    || train_end > val_end
                    || val_end > items.len()
                    || items.iter().any(|&i| i == 0 || i > vocab.len())
                {
                    return Err(err(line, "inconsistent user record".into()));
                }
                users.push(UserSequence {
                    user_id: rec.get(1).unwrap_or("").to_string(),
                    items,
                    timestamps,
                    train_end,
                    val_end,
                });
            }
            other => return Err(err(line, format!("unknown record kind {other:?}"))),
        }
    }
    Ok(SequenceDataset {
        vocab,
        users,
        ratios,
        min_seq_len,
    })
}
