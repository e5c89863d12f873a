//! Interaction-log ingestion, k-core filtering, head/tail labelling and
//! leave-two-out splitting.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Id reserved for left padding.
pub const PAD_ID: usize = 0;

const SEQ_MAGIC: &[u8; 4] = b"S4SQ";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    /// `user item timestamp` per line.
    Triplet,
    /// `user item1 item2 ... itemN` per line, already in order.
    Seqline,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(Self::Triplet),
            "seqline" => Ok(Self::Seqline),
            other => Err(Error::Config(format!("unknown input format {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawInteraction {
    pub user_token: String,
    pub item_token: String,
    pub timestamp: Option<i64>,
}

/// One user's chronologically ordered raw item tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSequence {
    pub user_token: String,
    pub items: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RawInput {
    Events(Vec<RawInteraction>),
    Sequences(Vec<RawSequence>),
}

impl RawInput {
    /// Groups events per user (users in first-appearance order) and orders
    /// each group by timestamp; ties keep input order.
    pub fn into_sequences(self) -> Vec<RawSequence> {
        match self {
            RawInput::Sequences(seqs) => merge_user_lines(seqs),
            RawInput::Events(events) => {
                let mut index: HashMap<String, usize> = HashMap::new();
                type Events = Vec<(Option<i64>, String)>;
                let mut groups: Vec<(String, Events)> = Vec::new();
                for e in events {
                    let slot = *index.entry(e.user_token.clone()).or_insert_with(|| {
                        groups.push((e.user_token.clone(), Vec::new()));
                        groups.len() - 1
                    });
                    groups[slot].1.push((e.timestamp, e.item_token));
                }
                groups
                    .into_iter()
                    .map(|(user_token, mut items)| {
                        items.sort_by_key(|(ts, _)| *ts);
                        RawSequence {
                            user_token,
                            items: items.into_iter().map(|(_, it)| it).collect(),
                        }
                    })
                    .collect()
            }
        }
    }
}

fn merge_user_lines(seqs: Vec<RawSequence>) -> Vec<RawSequence> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut out: Vec<RawSequence> = Vec::new();
    for s in seqs {
        match index.get(&s.user_token) {
            Some(&i) => out[i].items.extend(s.items),
            None => {
                index.insert(s.user_token.clone(), out.len());
                out.push(s);
            }
        }
    }
    out
}

pub fn ingest(path: &Path, format: InputFormat) -> Result<RawInput> {
    let file = fs::File::open(path)?;
    parse(BufReader::new(file), format)
}

pub fn parse<R: Read>(reader: BufReader<R>, format: InputFormat) -> Result<RawInput> {
    let mut events = Vec::new();
    let mut seqs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        match format {
            InputFormat::Triplet => {
                if fields.len() < 2 || fields.len() > 3 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("expected `user item [timestamp]`, found {} fields", fields.len()),
                    });
                }
                let timestamp = match fields.get(2) {
                    Some(ts) => Some(parse_timestamp(ts).ok_or_else(|| Error::Parse {
                        line: lineno,
                        msg: format!("invalid timestamp {ts:?}"),
                    })?),
                    None => None,
                };
                events.push(RawInteraction {
                    user_token: fields[0].to_owned(),
                    item_token: fields[1].to_owned(),
                    timestamp,
                });
            }
            InputFormat::Seqline => {
                if fields.len() < 2 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "sequence line has a user but no items".into(),
                    });
                }
                seqs.push(RawSequence {
                    user_token: fields[0].to_owned(),
                    items: fields[1..].iter().map(|s| (*s).to_owned()).collect(),
                });
            }
        }
    }
    match format {
        InputFormat::Triplet if events.is_empty() => Err(Error::EmptyInput),
        InputFormat::Seqline if seqs.is_empty() => Err(Error::EmptyInput),
        InputFormat::Triplet => Ok(RawInput::Events(events)),
        InputFormat::Seqline => Ok(RawInput::Sequences(seqs)),
    }
}

fn parse_timestamp(s: &str) -> Option<i64> {
    s.parse::<i64>()
        .ok()
        .or_else(|| s.parse::<f64>().ok().filter(|x| x.is_finite()).map(|x| x as i64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepareOptions {
    pub min_count: usize,
    pub head_ratio: f64,
    pub max_len: usize,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            min_count: 5,
            head_ratio: 0.2,
            max_len: 50,
        }
    }
}

impl PrepareOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.head_ratio > 0.0 && self.head_ratio < 1.0) {
            return Err(Error::Config(format!(
                "head_ratio must lie in (0,1), got {}",
                self.head_ratio
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("plain struct");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: usize,
    pub items: Vec<usize>,
    pub is_head: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetStats {
    pub num_actions: usize,
    pub avg_length: f64,
    pub sparsity: f64,
    pub excluded_users: usize,
    pub excluded_items: usize,
    pub filter_rounds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDataset {
    pub num_users: usize,
    pub num_items: usize,
    /// Sorted by `user_id`; `sequences[u - 1].user_id == u`.
    pub sequences: Vec<InteractionSequence>,
    pub mask_token_id: usize,
    pub head_length_threshold: usize,
    pub options: PrepareOptions,
    pub stats: DatasetStats,
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
}

impl PreparedDataset {
    /// Builds a dataset from already dense ids (`1..=num_items`), e.g. for
    /// synthetic experiments. Sequences are assigned user ids in order.
    pub fn from_id_sequences(seqs: Vec<Vec<usize>>, num_items: usize, head_ratio: f64) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyInput);
        }
        for (u, s) in seqs.iter().enumerate() {
            if let Some(&bad) = s.iter().find(|&&i| i == PAD_ID || i > num_items) {
                return Err(Error::Data(format!(
                    "user {}: item id {bad} outside 1..={num_items}",
                    u + 1
                )));
            }
        }
        let num_users = seqs.len();
        let sequences = seqs
            .into_iter()
            .enumerate()
            .map(|(u, items)| InteractionSequence {
                user_id: u + 1,
                items,
                is_head: false,
            })
            .collect();
        let mut ds = Self {
            num_users,
            num_items,
            sequences,
            mask_token_id: num_items + 1,
            head_length_threshold: 0,
            options: PrepareOptions {
                min_count: 0,
                head_ratio,
                ..PrepareOptions::default()
            },
            stats: DatasetStats::default(),
            user_tokens: (1..=num_users).map(|u| u.to_string()).collect(),
            item_tokens: (1..=num_items).map(|i| i.to_string()).collect(),
        };
        ds.stats = compute_stats(&ds.sequences, num_items, 0, 0, 0);
        label_head_tail(&mut ds, head_ratio);
        Ok(ds)
    }

    pub fn num_head(&self) -> usize {
        self.sequences.iter().filter(|s| s.is_head).count()
    }

    pub fn sequence(&self, user_id: usize) -> &InteractionSequence {
        &self.sequences[user_id - 1]
    }

    /// Empirical item frequency over all interactions, indexed by item id.
    pub fn item_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_items + 1];
        for s in &self.sequences {
            for &i in &s.items {
                counts[i] += 1;
            }
        }
        counts
    }
}

fn compute_stats(
    seqs: &[InteractionSequence],
    num_items: usize,
    excluded_users: usize,
    excluded_items: usize,
    filter_rounds: usize,
) -> DatasetStats {
    let num_actions: usize = seqs.iter().map(|s| s.items.len()).sum();
    let n = seqs.len().max(1) as f64;
    DatasetStats {
        num_actions,
        avg_length: num_actions as f64 / n,
        sparsity: 1.0 - num_actions as f64 / (n * num_items.max(1) as f64),
        excluded_users,
        excluded_items,
        filter_rounds,
    }
}

/// Iterated k-core filter, dense id remapping and head/tail labelling.
pub fn preprocess(raw: Vec<RawSequence>, options: &PrepareOptions) -> Result<PreparedDataset> {
    options.validate()?;
    if raw.iter().all(|s| s.items.is_empty()) {
        return Err(Error::EmptyInput);
    }
    let min = options.min_count;
    let all_items: std::collections::HashSet<&str> =
        raw.iter().flat_map(|s| s.items.iter().map(String::as_str)).collect();
    let total_items = all_items.len();
    let total_users = raw.len();

    let mut seqs: Vec<(String, Vec<String>)> = raw.into_iter().map(|s| (s.user_token, s.items)).collect();
    let mut rounds = 0;
    loop {
        rounds += 1;
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for (_, items) in &seqs {
            for it in items {
                *counts.entry(it.as_str()).or_default() += 1;
            }
        }
        let rare: std::collections::HashSet<String> = counts
            .into_iter()
            .filter(|&(_, c)| c < min)
            .map(|(k, _)| k.to_owned())
            .collect();
        let before: usize = seqs.iter().map(|(_, s)| s.len()).sum();
        let users_before = seqs.len();
        for (_, items) in seqs.iter_mut() {
            items.retain(|it| !rare.contains(it));
        }
        seqs.retain(|(_, items)| items.len() >= min && !items.is_empty());
        let after: usize = seqs.iter().map(|(_, s)| s.len()).sum();
        if after == before && seqs.len() == users_before {
            break;
        }
    }
    if seqs.is_empty() {
        return Err(Error::Degenerate(min));
    }

    let mut item_ids: HashMap<String, usize> = HashMap::new();
    let mut item_tokens = Vec::new();
    let mut user_tokens = Vec::with_capacity(seqs.len());
    let mut sequences = Vec::with_capacity(seqs.len());
    for (u, (user, items)) in seqs.into_iter().enumerate() {
        let ids = items
            .into_iter()
            .map(|it| {
                *item_ids.entry(it.clone()).or_insert_with(|| {
                    item_tokens.push(it);
                    item_tokens.len()
                })
            })
            .collect();
        user_tokens.push(user);
        sequences.push(InteractionSequence {
            user_id: u + 1,
            items: ids,
            is_head: false,
        });
    }
    let num_items = item_tokens.len();
    let num_users = sequences.len();
    let stats = compute_stats(
        &sequences,
        num_items,
        total_users - num_users,
        total_items - num_items,
        rounds,
    );
    let mut ds = PreparedDataset {
        num_users,
        num_items,
        sequences,
        mask_token_id: num_items + 1,
        head_length_threshold: 0,
        options: *options,
        stats,
        user_tokens,
        item_tokens,
    };
    label_head_tail(&mut ds, options.head_ratio);
    Ok(ds)
}

/// Marks the `ceil(head_ratio * |U|)` longest sequences as head; equal
/// lengths are ordered by ascending user id.
pub fn label_head_tail(ds: &mut PreparedDataset, head_ratio: f64) {
    let n = ds.sequences.len();
    let n_head = ((head_ratio * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&ds.sequences[a], &ds.sequences[b]);
        sb.items.len().cmp(&sa.items.len()).then(sa.user_id.cmp(&sb.user_id))
    });
    for s in ds.sequences.iter_mut() {
        s.is_head = false;
    }
    for &i in &order[..n_head] {
        ds.sequences[i].is_head = true;
    }
    ds.head_length_threshold = order[..n_head].last().map_or(0, |&i| ds.sequences[i].items.len());
    ds.options.head_ratio = head_ratio;
}

/// Leave-two-out split of one user's sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitView {
    pub user_id: usize,
    pub is_head: bool,
    /// The most recent `max_len` of the first `n - 2` items.
    pub train_items: Vec<usize>,
    pub valid_target: usize,
    pub test_target: usize,
}

impl SplitView {
    /// Prefix used to predict the validation item.
    pub fn valid_prefix(&self) -> &[usize] {
        &self.train_items
    }

    /// Prefix used to predict the test item, truncated to `max_len`.
    pub fn test_prefix(&self, max_len: usize) -> Vec<usize> {
        let mut p = self.train_items.clone();
        p.push(self.valid_target);
        let start = p.len().saturating_sub(max_len);
        p.split_off(start)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub views: Vec<SplitView>,
    /// Users with fewer than three interactions.
    pub excluded: usize,
}

pub fn split(ds: &PreparedDataset, max_len: usize) -> Splits {
    let mut views = Vec::with_capacity(ds.sequences.len());
    let mut excluded = 0;
    for s in &ds.sequences {
        let n = s.items.len();
        if n < 3 {
            log::warn!("user {} has {n} interactions; excluded from the split", s.user_id);
            excluded += 1;
            continue;
        }
        let train = &s.items[..n - 2];
        let start = train.len().saturating_sub(max_len);
        views.push(SplitView {
            user_id: s.user_id,
            is_head: s.is_head,
            train_items: train[start..].to_vec(),
            valid_target: s.items[n - 2],
            test_target: s.items[n - 1],
        });
    }
    Splits { views, excluded }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    num_users: usize,
    num_items: usize,
    mask_token_id: usize,
    head_length_threshold: usize,
    num_head: usize,
    options: PrepareOptions,
    config_hash: String,
    stats: DatasetStats,
}

/// Writes `manifest.json`, `sequences.bin`, `users.txt` and `items.txt`.
pub fn write_prepared(ds: &PreparedDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        num_users: ds.num_users,
        num_items: ds.num_items,
        mask_token_id: ds.mask_token_id,
        head_length_threshold: ds.head_length_threshold,
        num_head: ds.num_head(),
        options: ds.options,
        config_hash: ds.options.hash(),
        stats: ds.stats.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    let mut buf = Vec::with_capacity(16 + ds.stats.num_actions * 4 + ds.num_users * 9);
    buf.extend_from_slice(SEQ_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.sequences.len() as u64).to_le_bytes());
    for s in &ds.sequences {
        buf.extend_from_slice(&(s.user_id as u32).to_le_bytes());
        buf.push(u8::from(s.is_head));
        buf.extend_from_slice(&(s.items.len() as u32).to_le_bytes());
        for &i in &s.items {
            buf.extend_from_slice(&(i as u32).to_le_bytes());
        }
    }
    fs::write(dir.join("sequences.bin"), buf)?;
    fs::write(dir.join("users.txt"), ds.user_tokens.join("\n"))?;
    fs::write(dir.join("items.txt"), ds.item_tokens.join("\n"))?;
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format("sequences.bin is truncated".into()));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn take_u32(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().expect("4 bytes")))
}

fn read_tokens(path: &Path, expected: usize) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok((1..=expected).map(|i| i.to_string()).collect());
    }
    let text = fs::read_to_string(path)?;
    let tokens: Vec<String> = if text.is_empty() {
        Vec::new()
    } else {
        text.split('\n').map(str::to_owned).collect()
    };
    if tokens.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} tokens, found {}",
            path.display(),
            tokens.len()
        )));
    }
    Ok(tokens)
}

pub fn read_prepared(dir: &Path) -> Result<PreparedDataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let bytes = fs::read(dir.join("sequences.bin"))?;
    let mut buf = bytes.as_slice();
    if take(&mut buf, 4)? != SEQ_MAGIC {
        return Err(Error::Format("sequences.bin: bad magic".into()));
    }
    let _version = take_u32(&mut buf)?;
    let count = u64::from_le_bytes(take(&mut buf, 8)?.try_into().expect("8 bytes")) as usize;
    let mut sequences = Vec::with_capacity(count);
    for _ in 0..count {
        let user_id = take_u32(&mut buf)? as usize;
        let is_head = take(&mut buf, 1)?[0] != 0;
        let len = take_u32(&mut buf)? as usize;
        let items = (0..len)
            .map(|_| take_u32(&mut buf).map(|x| x as usize))
            .collect::<Result<Vec<_>>>()?;
        if let Some(&bad) = items.iter().find(|&&i| i == PAD_ID || i > manifest.num_items) {
            return Err(Error::Data(format!("user {user_id}: item id {bad} out of range")));
        }
        sequences.push(InteractionSequence {
            user_id,
            items,
            is_head,
        });
    }
    if sequences.len() != manifest.num_users {
        return Err(Error::Format(format!(
            "manifest lists {} users, sequences.bin holds {}",
            manifest.num_users,
            sequences.len()
        )));
    }
    Ok(PreparedDataset {
        num_users: manifest.num_users,
        num_items: manifest.num_items,
        sequences,
        mask_token_id: manifest.mask_token_id,
        head_length_threshold: manifest.head_length_threshold,
        options: manifest.options,
        stats: manifest.stats,
        user_tokens: read_tokens(&dir.join("users.txt"), manifest.num_users)?,
        item_tokens: read_tokens(&dir.join("items.txt"), manifest.num_items)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_str(s: &str, f: InputFormat) -> Result<RawInput> {
        parse(BufReader::new(s.as_bytes()), f)
    }

    #[test]
    fn seqline_parses_one_sequence() {
        let raw = parse_str("u1 a b c\n", InputFormat::Seqline).unwrap();
        let seqs = raw.into_sequences();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].user_token, "u1");
        assert_eq!(seqs[0].items, vec!["a", "b", "c"]);
    }

    #[test]
    fn user_without_items_is_a_parse_error() {
        let err = parse_str("u0 x y\nu1\n", InputFormat::Seqline).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn malformed_triplet_names_line() {
        let err = parse_str("u a 1\nu b notatime\n", InputFormat::Triplet).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn empty_file_is_empty_input() {
        assert!(matches!(
            parse_str("\n\n", InputFormat::Triplet),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn timestamp_ties_keep_input_order() {
        let raw = parse_str("u c 5\nu a 3\nu z 5\nu b 3\n", InputFormat::Triplet).unwrap();
        let seqs = raw.into_sequences();
        assert_eq!(seqs[0].items, vec!["a", "b", "c", "z"]);
    }

    fn raw(user: &str, items: &[&str]) -> RawSequence {
        RawSequence {
            user_token: user.into(),
            items: items.iter().map(|s| (*s).into()).collect(),
        }
    }

    #[test]
    fn user_with_four_events_is_removed() {
        let mut seqs: Vec<_> = (0..5)
            .map(|u| raw(&format!("u{u}"), &["a", "b", "c", "d", "e"]))
            .collect();
        seqs.push(raw("short", &["a", "b", "c", "d"]));
        let ds = preprocess(seqs, &PrepareOptions::default()).unwrap();
        assert_eq!(ds.num_users, 5);
        assert!(ds.user_tokens.iter().all(|u| u != "short"));
        assert_eq!(ds.stats.excluded_users, 1);
    }

    /// Single pass over the raw log, used as the contrast for the fixed point.
    fn single_pass(seqs: &[RawSequence], min: usize) -> Vec<RawSequence> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in seqs {
            for it in &s.items {
                *counts.entry(it).or_default() += 1;
            }
        }
        seqs.iter()
            .map(|s| RawSequence {
                user_token: s.user_token.clone(),
                items: s
                    .items
                    .iter()
                    .filter(|it| counts[it.as_str()] >= min)
                    .cloned()
                    .collect(),
            })
            .filter(|s| s.items.len() >= min)
            .collect()
    }

    #[test]
    fn iterated_filter_removes_residue_of_single_pass() {
        // Ten users. Item "x" is held by users 0..5 only; users 0..4 are
        // otherwise too short and disappear, which drags "x" below five.
        let mut seqs = Vec::new();
        for u in 0..5 {
            seqs.push(raw(&format!("s{u}"), &["x", "p", "q", "r"]));
        }
        for u in 0..5 {
            seqs.push(raw(
                &format!("l{u}"),
                &["a", "b", "c", "d", "e", if u == 0 { "x" } else { "a" }],
            ));
        }
        let one = single_pass(&seqs, 5);
        assert!(one.iter().any(|s| s.items.contains(&"x".to_string())));
        let ds = preprocess(seqs, &PrepareOptions::default()).unwrap();
        let x_id = ds.item_tokens.iter().position(|t| t == "x");
        assert!(x_id.is_none(), "fixed point must drop x");
        // 5-core holds at the fixed point
        let counts = ds.item_counts();
        assert!(counts[1..].iter().all(|&c| c >= 5));
        assert!(ds.sequences.iter().all(|s| s.items.len() >= 5));
    }

    #[test]
    fn degenerate_dataset_is_an_error() {
        let seqs = vec![raw("u", &["a", "b"])];
        assert!(matches!(
            preprocess(seqs, &PrepareOptions::default()),
            Err(Error::Degenerate(5))
        ));
    }

    #[test]
    fn head_is_longest_fraction() {
        let seqs: Vec<Vec<usize>> = (0..10).map(|u| vec![1; 9 - u]).collect();
        let ds = PreparedDataset::from_id_sequences(seqs, 1, 0.2).unwrap();
        let heads: Vec<_> = ds
            .sequences
            .iter()
            .filter(|s| s.is_head)
            .map(|s| s.items.len())
            .collect();
        assert_eq!(heads, vec![9, 8]);
        assert_eq!(ds.head_length_threshold, 8);
    }

    #[test]
    fn head_ties_go_to_lowest_user_ids() {
        let seqs: Vec<Vec<usize>> = (0..10).map(|_| vec![1; 4]).collect();
        let ds = PreparedDataset::from_id_sequences(seqs, 1, 0.2).unwrap();
        let heads: Vec<_> = ds.sequences.iter().filter(|s| s.is_head).map(|s| s.user_id).collect();
        assert_eq!(heads, vec![1, 2]);
    }

    #[test]
    fn beauty_head_count() {
        // ceil(0.2 * 22363)
        let n = 22363usize;
        let seqs: Vec<Vec<usize>> = (0..n).map(|u| vec![1; 3 + u % 17]).collect();
        let ds = PreparedDataset::from_id_sequences(seqs, 1, 0.2).unwrap();
        assert_eq!(ds.num_head(), 4473);
    }

    #[test]
    fn split_leaves_two_out() {
        let ds = PreparedDataset::from_id_sequences(vec![vec![1, 2, 3, 4, 5], vec![1, 2, 3]], 5, 0.2).unwrap();
        let sp = split(&ds, 50);
        assert_eq!(sp.views[0].train_items, vec![1, 2, 3]);
        assert_eq!(sp.views[0].valid_target, 4);
        assert_eq!(sp.views[0].test_target, 5);
        assert_eq!(sp.views[1].train_items, vec![1]);
    }

    #[test]
    fn split_truncates_to_most_recent() {
        let items: Vec<usize> = (1..=60).collect();
        let ds = PreparedDataset::from_id_sequences(vec![items], 60, 0.2).unwrap();
        let v = &split(&ds, 50).views[0];
        let expected: Vec<usize> = (9..=58).collect();
        assert_eq!(v.train_items, expected);
        assert_eq!((v.valid_target, v.test_target), (59, 60));
        assert_eq!(v.test_prefix(50), (10..=59).collect::<Vec<_>>());
    }

    #[test]
    fn short_sequences_are_excluded_from_split() {
        let ds = PreparedDataset::from_id_sequences(vec![vec![1, 2], vec![1, 2, 1]], 2, 0.5).unwrap();
        let sp = split(&ds, 50);
        assert_eq!(sp.excluded, 1);
        assert_eq!(sp.views.len(), 1);
    }
}
